#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use cvanetsim_core::{Algorithm, ClusterConfig, Timestep, VehicleState};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Vehicles wandering in a `side`-metre square. Each step a vehicle may
/// leave (and a fresh one arrive) with probability `churn`.
pub fn random_walk(seed: u64, n: usize, steps: usize, side: f64, churn: f64) -> Vec<Timestep> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut next_id = 0usize;
    let mut spawn = |rng: &mut StdRng| {
        next_id += 1;
        VehicleState::new(
            format!("v{next_id:05}"),
            rng.gen_range(0.0..side),
            rng.gen_range(0.0..side),
            rng.gen_range(0.0..35.0),
            rng.gen_range(0.0..360.0),
        )
    };
    let mut fleet: Vec<VehicleState> = (0..n).map(|_| spawn(&mut rng)).collect();
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        out.push(Timestep::new(k as f64, fleet.clone()));
        for v in fleet.iter_mut() {
            let a = v.angle.to_radians();
            v.x = (v.x + v.speed * a.sin()).clamp(0.0, side);
            v.y = (v.y + v.speed * a.cos()).clamp(0.0, side);
            v.speed = (v.speed + rng.gen_range(-2.0..2.0)).clamp(0.0, 40.0);
            v.angle = (v.angle + rng.gen_range(-20.0..20.0)).rem_euclid(360.0);
        }
        for v in fleet.iter_mut() {
            if rng.gen_bool(churn) {
                *v = spawn(&mut rng);
            }
        }
    }
    out
}

fn dist(a: &VehicleState, b: &VehicleState) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
}

/// Score of every vehicle computed straight from positions, all pairs.
pub fn oracle_scores(ts: &Timestep, cfg: &ClusterConfig) -> Vec<f64> {
    let vs = &ts.vehicles;
    (0..vs.len())
        .map(|i| {
            let (mut deg, mut sum_v, mut sum_d) = (0usize, 0.0, 0.0);
            let a = &vs[i];
            let (ax, ay) = (
                a.speed * a.angle.to_radians().sin(),
                a.speed * a.angle.to_radians().cos(),
            );
            for (j, b) in vs.iter().enumerate() {
                let d = dist(a, b);
                if j == i || d > cfg.range {
                    continue;
                }
                let (bx, by) = (
                    b.speed * b.angle.to_radians().sin(),
                    b.speed * b.angle.to_radians().cos(),
                );
                deg += 1;
                sum_v += ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
                sum_d += d;
            }
            let (mv, md) = if deg == 0 {
                (0.0, 0.0)
            } else {
                (sum_v / deg as f64, sum_d / deg as f64)
            };
            match cfg.algorithm {
                Algorithm::LowestId => 0.0,
                Algorithm::HighestDegree => -(deg as f64),
                Algorithm::Mobility => cfg.w_v * mv + cfg.w_d * md / cfg.range,
            }
        })
        .collect()
}

/// Greedy (score, id) election over explicit lists: repeatedly take the best
/// unclustered vehicle that still has an unclustered neighbor, make it head
/// and absorb every unclustered vehicle in range.
pub fn oracle_election(
    ts: &Timestep,
    cfg: &ClusterConfig,
    candidates: &BTreeSet<String>,
) -> (BTreeMap<String, Vec<String>>, BTreeSet<String>) {
    let vs = &ts.vehicles;
    let scores = oracle_scores(ts, cfg);
    let mut unclustered: Vec<usize> = (0..vs.len())
        .filter(|&i| candidates.contains(vs[i].id.as_str()))
        .collect();
    let mut heads = BTreeMap::new();
    loop {
        let eligible: Vec<usize> = unclustered
            .iter()
            .copied()
            .filter(|&i| unclustered.iter().any(|&j| j != i && dist(&vs[i], &vs[j]) <= cfg.range))
            .collect();
        let Some(&best) = eligible.iter().min_by(|&&a, &&b| {
            scores[a]
                .partial_cmp(&scores[b])
                .unwrap()
                .then_with(|| vs[a].id.as_str().cmp(vs[b].id.as_str()))
        }) else {
            break;
        };
        let mut members: Vec<String> = unclustered
            .iter()
            .filter(|&&j| j != best && dist(&vs[best], &vs[j]) <= cfg.range)
            .map(|&j| vs[j].id.to_string())
            .collect();
        members.sort();
        unclustered.retain(|&j| j != best && dist(&vs[best], &vs[j]) > cfg.range);
        heads.insert(vs[best].id.to_string(), members);
    }
    let rest = unclustered.into_iter().map(|i| vs[i].id.to_string()).collect();
    (heads, rest)
}
