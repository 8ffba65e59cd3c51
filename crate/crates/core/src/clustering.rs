//! Cluster formation and maintenance.
//!
//! Every algorithm reduces to a score per vehicle; candidates are ranked by
//! `(score, id)` ascending, lower is better. [`step_clustering`] is a pure
//! transition from the previous state and the current feature frame, and runs
//! six phases in a fixed order:
//!
//! 1. drop departed vehicles, start arrivals unclustered
//! 2. orphan members whose head is gone or out of range
//! 3. contention: a head with a strictly better head in range for `t_cont`
//!    consecutive steps abdicates
//! 4. idle demotion: a head without members for `t_idle` steps is demoted
//! 5. re-affiliation of unclustered vehicles to the nearest head in range
//! 6. greedy election among the remaining unclustered vehicles
//!
//! All iteration is in ascending id order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::features::FeatureFrame;
use crate::ingest::VehicleId;

pub const DEFAULT_W_V: f64 = 0.5;
pub const DEFAULT_W_D: f64 = 0.5;
pub const DEFAULT_T_IDLE: u32 = 3;
pub const DEFAULT_T_CONT: u32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "CH")]
    Head,
    #[serde(rename = "CM")]
    Member,
    #[serde(rename = "UNCLUSTERED")]
    Unclustered,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Head => "CH",
            Role::Member => "CM",
            Role::Unclustered => "UNCLUSTERED",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    LowestId,
    HighestDegree,
    Mobility,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::LowestId, Algorithm::HighestDegree, Algorithm::Mobility];

    pub fn id(self) -> &'static str {
        match self {
            Algorithm::LowestId => "lowest_id",
            Algorithm::HighestDegree => "highest_degree",
            Algorithm::Mobility => "mobility",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Algorithm::LowestId => "Lowest ID",
            Algorithm::HighestDegree => "Highest degree",
            Algorithm::Mobility => "Mobility-weighted (relative speed and distance)",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Algorithm {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| ConfigError::UnknownAlgorithm(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("unknown algorithm `{0}` (valid: lowest_id, highest_degree, mobility)")]
    UnknownAlgorithm(String),
    #[error("transmission range must be a positive finite number, got {0}")]
    InvalidRange(f64),
    #[error("weights must be finite and >= 0, and w_v + w_d > 0 for mobility (got w_v={w_v}, w_d={w_d})")]
    InvalidWeights { w_v: f64, w_d: f64 },
    #[error("{0} must be >= 1")]
    InvalidTimer(&'static str),
    #[error("frame was built with range {frame} but the configuration uses {config}")]
    RangeMismatch { frame: f64, config: f64 },
    #[error("vehicle {0} is not present in the frame")]
    UnknownVehicle(VehicleId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub range: f64,
    pub algorithm: Algorithm,
    pub w_v: f64,
    pub w_d: f64,
    pub t_idle: u32,
    pub t_cont: u32,
}

impl ClusterConfig {
    pub fn new(algorithm: Algorithm, range: f64) -> Self {
        ClusterConfig {
            range,
            algorithm,
            w_v: DEFAULT_W_V,
            w_d: DEFAULT_W_D,
            t_idle: DEFAULT_T_IDLE,
            t_cont: DEFAULT_T_CONT,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.range > 0.0 && self.range.is_finite()) {
            return Err(ConfigError::InvalidRange(self.range));
        }
        let weights_ok = self.w_v.is_finite()
            && self.w_d.is_finite()
            && self.w_v >= 0.0
            && self.w_d >= 0.0
            && (self.algorithm != Algorithm::Mobility || self.w_v + self.w_d > 0.0);
        if !weights_ok {
            return Err(ConfigError::InvalidWeights {
                w_v: self.w_v,
                w_d: self.w_d,
            });
        }
        if self.t_idle < 1 {
            return Err(ConfigError::InvalidTimer("t_idle"));
        }
        if self.t_cont < 1 {
            return Err(ConfigError::InvalidTimer("t_cont"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamSpec {
    pub name: &'static str,
    #[serde(rename = "type")]
    pub kind: &'static str,
    pub default: Value,
    pub required: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlgorithmDescriptor {
    pub id: &'static str,
    pub label: &'static str,
    pub params: Vec<ParamSpec>,
}

/// The algorithm registry, in fixed order.
pub fn list_algorithms() -> Vec<AlgorithmDescriptor> {
    Algorithm::ALL
        .into_iter()
        .map(|a| {
            let mut params = vec![ParamSpec {
                name: "range_m",
                kind: "number",
                default: Value::Null,
                required: true,
            }];
            if a == Algorithm::Mobility {
                params.push(ParamSpec {
                    name: "w_v",
                    kind: "number",
                    default: json!(DEFAULT_W_V),
                    required: false,
                });
                params.push(ParamSpec {
                    name: "w_d",
                    kind: "number",
                    default: json!(DEFAULT_W_D),
                    required: false,
                });
            }
            params.push(ParamSpec {
                name: "t_idle",
                kind: "integer",
                default: json!(DEFAULT_T_IDLE),
                required: false,
            });
            params.push(ParamSpec {
                name: "t_cont",
                kind: "integer",
                default: json!(DEFAULT_T_CONT),
                required: false,
            });
            AlgorithmDescriptor {
                id: a.id(),
                label: a.label(),
                params,
            }
        })
        .collect()
}

/// Election score of `v` in `frame`; lower is better.
pub fn score_vehicle(v: &VehicleId, frame: &FeatureFrame, cfg: &ClusterConfig) -> Result<f64, ConfigError> {
    let i = frame
        .index_of(v)
        .ok_or_else(|| ConfigError::UnknownVehicle(v.clone()))?;
    Ok(score_at(frame, cfg, i))
}

fn score_at(frame: &FeatureFrame, cfg: &ClusterConfig, i: usize) -> f64 {
    let e = &frame.entries[i];
    match cfg.algorithm {
        Algorithm::LowestId => 0.0,
        Algorithm::HighestDegree => -(e.degree as f64),
        Algorithm::Mobility => cfg.w_v * e.avg_rel_speed + cfg.w_d * e.avg_rel_dist / cfg.range,
    }
}

/// Orders by score, then by frame index (which is id order).
fn rank(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[a].total_cmp(&scores[b]).then(a.cmp(&b))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClusterState {
    pub time: f64,
    pub roles: BTreeMap<VehicleId, Role>,
    /// Head of each member; defined exactly for members.
    pub cluster_of: BTreeMap<VehicleId, VehicleId>,
    /// Sorted members of every head (possibly empty).
    pub members: BTreeMap<VehicleId, Vec<VehicleId>>,
    pub idle_count: BTreeMap<VehicleId, u32>,
    pub contention: BTreeMap<VehicleId, u32>,
}

impl ClusterState {
    pub fn role(&self, id: &VehicleId) -> Option<Role> {
        self.roles.get(id).copied()
    }

    pub fn heads(&self) -> impl Iterator<Item = &VehicleId> {
        self.members.keys()
    }

    pub fn count(&self, role: Role) -> usize {
        self.roles.values().filter(|&&r| r == role).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Unclustered,
    Head,
    Member(usize),
}

/// Mutable per-step working set, indexed by frame position.
struct Work<'a> {
    frame: &'a FeatureFrame,
    scores: Vec<f64>,
    slots: Vec<Slot>,
    idle: Vec<u32>,
    contention: Vec<u32>,
}

impl<'a> Work<'a> {
    fn new(frame: &'a FeatureFrame, cfg: &ClusterConfig) -> Self {
        let n = frame.len();
        Work {
            frame,
            scores: (0..n).map(|i| score_at(frame, cfg, i)).collect(),
            slots: vec![Slot::Unclustered; n],
            idle: vec![0; n],
            contention: vec![0; n],
        }
    }

    fn is(&self, i: usize, slot: Slot) -> bool {
        self.slots[i] == slot
    }

    fn neighbor_indices(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.frame.entries[i].neighbors.iter().map(|n| n.index)
    }

    fn members_of(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.slots.len()];
        for (i, s) in self.slots.iter().enumerate() {
            if let Slot::Member(h) = *s {
                members[h].push(i);
            }
        }
        members
    }

    fn seed(&mut self, prev: &ClusterState) {
        for (i, e) in self.frame.entries.iter().enumerate() {
            let id = &e.state.id;
            self.slots[i] = match prev.role(id) {
                Some(Role::Head) => {
                    self.idle[i] = prev.idle_count.get(id).copied().unwrap_or(0);
                    self.contention[i] = prev.contention.get(id).copied().unwrap_or(0);
                    Slot::Head
                }
                Some(Role::Member) => prev
                    .cluster_of
                    .get(id)
                    .filter(|h| prev.role(h) == Some(Role::Head))
                    .and_then(|h| self.frame.index_of(h))
                    .map_or(Slot::Unclustered, Slot::Member),
                _ => Slot::Unclustered,
            };
        }
    }

    fn prune_members(&mut self) {
        for i in 0..self.slots.len() {
            if let Slot::Member(h) = self.slots[i] {
                let head_id = &self.frame.entries[h].state.id;
                if self.slots[h] != Slot::Head || self.frame.entries[i].neighbor(head_id).is_none() {
                    self.slots[i] = Slot::Unclustered;
                }
            }
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn resolve_contention(&mut self, members: &mut [Vec<usize>], t_cont: u32) {
        for c in 0..self.slots.len() {
            if !self.is(c, Slot::Head) {
                continue;
            }
            let outranked = self
                .neighbor_indices(c)
                .any(|b| self.is(b, Slot::Head) && rank(&self.scores, b, c) == Ordering::Less);
            if outranked {
                self.contention[c] += 1;
            } else {
                self.contention[c] = 0;
            }
            if self.contention[c] >= t_cont {
                self.slots[c] = Slot::Unclustered;
                for m in members[c].drain(..) {
                    self.slots[m] = Slot::Unclustered;
                }
            }
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn demote_idle(&mut self, members: &[Vec<usize>], t_idle: u32) {
        for c in 0..self.slots.len() {
            if !self.is(c, Slot::Head) {
                continue;
            }
            if members[c].is_empty() {
                self.idle[c] += 1;
            } else {
                self.idle[c] = 0;
            }
            if self.idle[c] >= t_idle {
                self.slots[c] = Slot::Unclustered;
            }
        }
    }

    fn reaffiliate(&mut self) {
        for i in 0..self.slots.len() {
            if !self.is(i, Slot::Unclustered) {
                continue;
            }
            // neighbors are id-sorted, so min_by keeps the lower id on distance ties
            let nearest = self.frame.entries[i]
                .neighbors
                .iter()
                .filter(|n| self.is(n.index, Slot::Head))
                .min_by(|a, b| a.distance.total_cmp(&b.distance));
            if let Some(n) = nearest {
                let h = n.index;
                self.slots[i] = Slot::Member(h);
                self.idle[h] = 0;
            }
        }
    }

    /// Greedy election by `(score, id)`. Roles only move away from
    /// unclustered, so one pass in rank order picks the same heads as
    /// repeatedly taking the best remaining candidate.
    fn elect(&mut self) {
        let mut order: Vec<usize> = (0..self.slots.len()).collect();
        order.sort_by(|&a, &b| rank(&self.scores, a, b));
        for c in order {
            if !self.is(c, Slot::Unclustered) {
                continue;
            }
            if !self.neighbor_indices(c).any(|j| self.is(j, Slot::Unclustered)) {
                continue;
            }
            self.slots[c] = Slot::Head;
            self.idle[c] = 0;
            self.contention[c] = 0;
            let joiners: Vec<usize> = self
                .neighbor_indices(c)
                .filter(|&j| self.is(j, Slot::Unclustered))
                .collect();
            for j in joiners {
                self.slots[j] = Slot::Member(c);
            }
        }
    }

    fn into_state(self) -> ClusterState {
        let mut state = ClusterState {
            time: self.frame.time,
            ..Default::default()
        };
        let id = |i: usize| self.frame.entries[i].state.id.clone();
        for (i, slot) in self.slots.iter().enumerate() {
            if *slot == Slot::Head {
                state.members.insert(id(i), Vec::new());
                state.idle_count.insert(id(i), self.idle[i]);
                state.contention.insert(id(i), self.contention[i]);
            }
        }
        for (i, slot) in self.slots.iter().enumerate() {
            let role = match *slot {
                Slot::Head => Role::Head,
                Slot::Unclustered => Role::Unclustered,
                Slot::Member(h) => {
                    let head = id(h);
                    // ascending i keeps member lists sorted
                    state.members.get_mut(&head).expect("member of a head").push(id(i));
                    state.cluster_of.insert(id(i), head);
                    Role::Member
                }
            };
            state.roles.insert(id(i), role);
        }
        state
    }
}

fn check_frame(frame: &FeatureFrame, cfg: &ClusterConfig) -> Result<(), ConfigError> {
    cfg.validate()?;
    if frame.range != cfg.range {
        return Err(ConfigError::RangeMismatch {
            frame: frame.range,
            config: cfg.range,
        });
    }
    Ok(())
}

/// Advances the clustering by one timestep.
pub fn step_clustering(
    prev: Option<&ClusterState>,
    frame: &FeatureFrame,
    cfg: &ClusterConfig,
) -> Result<ClusterState, ConfigError> {
    check_frame(frame, cfg)?;
    let mut work = Work::new(frame, cfg);
    if let Some(prev) = prev {
        work.seed(prev);
    }
    work.prune_members();
    let mut members = work.members_of();
    work.resolve_contention(&mut members, cfg.t_cont);
    work.demote_idle(&members, cfg.t_idle);
    work.reaffiliate();
    work.elect();
    Ok(work.into_state())
}

/// Outcome of the election phase alone.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Election {
    pub heads: BTreeMap<VehicleId, Vec<VehicleId>>,
    pub unclustered: BTreeSet<VehicleId>,
}

/// Runs only the election phase over `frame`, treating the vehicles in
/// `candidates` as unclustered and every other vehicle as already assigned.
pub fn elect(
    frame: &FeatureFrame,
    cfg: &ClusterConfig,
    candidates: &BTreeSet<VehicleId>,
) -> Result<Election, ConfigError> {
    check_frame(frame, cfg)?;
    let mut work = Work::new(frame, cfg);
    let n = frame.len();
    // Vehicles outside the candidate set are parked on a placeholder slot that
    // never matches Unclustered.
    for i in 0..n {
        if !candidates.contains(&frame.entries[i].state.id) {
            work.slots[i] = Slot::Member(usize::MAX);
        }
    }
    work.elect();
    let mut out = Election::default();
    for (i, slot) in work.slots.iter().enumerate() {
        let id = frame.entries[i].state.id.clone();
        match *slot {
            Slot::Head => {
                out.heads.entry(id).or_default();
            }
            Slot::Member(h) if h != usize::MAX => {
                out.heads.entry(frame.entries[h].state.id.clone()).or_default().push(id);
            }
            Slot::Unclustered => {
                out.unclustered.insert(id);
            }
            Slot::Member(_) => {}
        }
    }
    for members in out.heads.values_mut() {
        members.sort();
    }
    Ok(out)
}

/// Roles in frame order. Fails unless `state` covers exactly the frame's
/// vehicles.
pub fn roles_by_index(state: &ClusterState, frame: &FeatureFrame) -> Result<Vec<Role>, String> {
    if state.roles.len() != frame.len() {
        return Err(format!(
            "{} roles for {} present vehicles",
            state.roles.len(),
            frame.len()
        ));
    }
    // both sides are sorted by id
    frame
        .entries
        .iter()
        .zip(&state.roles)
        .map(|(e, (id, &role))| {
            if *id == e.state.id {
                Ok(role)
            } else {
                Err(format!("vehicle {} has no role", e.state.id))
            }
        })
        .collect()
}

/// Verifies every structural invariant of `state` against the frame that
/// produced it. Returns the first violation found.
pub fn check_invariants(state: &ClusterState, frame: &FeatureFrame) -> Result<(), String> {
    let roles = roles_by_index(state, frame)?;
    for (e, &role) in frame.entries.iter().zip(&roles) {
        let id = &e.state.id;
        let is_head = state.members.contains_key(id);
        if (role == Role::Head) != is_head {
            return Err(format!("vehicle {id}: role {role} disagrees with head set"));
        }
        if (role == Role::Head) != (state.idle_count.contains_key(id) && state.contention.contains_key(id)) {
            return Err(format!("vehicle {id}: timers present iff head"));
        }
        match (role, state.cluster_of.get(id)) {
            (Role::Member, Some(head)) => {
                let Some(rel) = e.neighbor(head) else {
                    return Err(format!("member {id} is out of range of head {head}"));
                };
                if roles[rel.index] != Role::Head {
                    return Err(format!("member {id} points at non-head {head}"));
                }
                if state.members[head].binary_search(id).is_err() {
                    return Err(format!("member {id} missing from members of {head}"));
                }
            }
            (Role::Member, None) => return Err(format!("member {id} has no head")),
            (_, Some(_)) => return Err(format!("non-member {id} has a head")),
            (Role::Unclustered, None) => {
                if let Some(n) = e.neighbors.iter().find(|n| roles[n.index] == Role::Unclustered) {
                    return Err(format!("unclustered {id} and {} are within range", n.other));
                }
            }
            (Role::Head, None) => {}
        }
    }
    if state.cluster_of.len() != state.count(Role::Member) {
        return Err("cluster_of has entries for absent vehicles".into());
    }
    for (head, members) in &state.members {
        if !members.windows(2).all(|w| w[0] < w[1]) {
            return Err(format!("members of {head} not strictly sorted"));
        }
        for m in members {
            if state.cluster_of.get(m) != Some(head) {
                return Err(format!("members of {head} lists {m}, which is not its member"));
            }
        }
    }
    Ok(())
}
