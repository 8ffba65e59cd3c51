//! Per-timestep kinematic features: velocity vectors, neighbor relations
//! within the transmission range, degree, and relative speed/distance means.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::ingest::{Timestep, VehicleId, VehicleState};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VelocityVector {
    pub vx: f64,
    pub vy: f64,
}

/// Converts a compass heading (0 = north, clockwise) into east/north components.
pub fn heading_to_velocity(speed: f64, angle: f64) -> VelocityVector {
    let rad = angle.to_radians();
    VelocityVector {
        vx: speed * rad.sin(),
        vy: speed * rad.cos(),
    }
}

/// Smallest absolute difference between two headings, in `[0, 180]`.
pub fn heading_difference(a: f64, b: f64) -> f64 {
    let mut d = (a - b).abs();
    if d >= 360.0 {
        d %= 360.0;
    }
    d.min(360.0 - d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborRelation {
    pub other: VehicleId,
    /// Position of `other` in the owning frame's entries.
    pub index: usize,
    pub distance: f64,
    pub rel_speed: f64,
    pub heading_diff: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VehicleFeatures {
    pub state: VehicleState,
    pub velocity: VelocityVector,
    /// Sorted by neighbor id.
    pub neighbors: Vec<NeighborRelation>,
    pub degree: usize,
    pub avg_rel_speed: f64,
    pub avg_rel_dist: f64,
}

impl VehicleFeatures {
    /// Relation to `other`, if it is in range.
    pub fn neighbor(&self, other: &VehicleId) -> Option<&NeighborRelation> {
        self.neighbors
            .binary_search_by(|n| n.other.cmp(other))
            .ok()
            .map(|i| &self.neighbors[i])
    }
}

/// Features for every vehicle of one timestep, in the timestep's id order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFrame {
    pub time: f64,
    pub range: f64,
    pub entries: Vec<VehicleFeatures>,
}

impl FeatureFrame {
    pub fn index_of(&self, id: &VehicleId) -> Option<usize> {
        self.entries.binary_search_by(|e| e.state.id.cmp(id)).ok()
    }

    pub fn get(&self, id: &VehicleId) -> Option<&VehicleFeatures> {
        self.index_of(id).map(|i| &self.entries[i])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Uniform grid with cell side equal to the query radius.
///
/// Any pair within the radius lies in the same or an adjacent cell, so a query
/// only inspects the surrounding 3×3 block before the exact distance filter.
pub struct NeighborIndex<'a> {
    vehicles: &'a [VehicleState],
    range: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl<'a> NeighborIndex<'a> {
    pub fn build(ts: &'a Timestep, range: f64) -> Self {
        assert!(range > 0.0 && range.is_finite(), "range must be positive, got {range}");
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, v) in ts.vehicles.iter().enumerate() {
            cells.entry(cell_of(v, range)).or_default().push(i);
        }
        NeighborIndex {
            vehicles: &ts.vehicles,
            range,
            cells,
        }
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    /// Indices of vehicles within the range of vehicle `i` (excluding `i`),
    /// ascending, paired with their distance.
    pub fn neighbors_of(&self, i: usize) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(32);
        self.for_each_neighbor(i, |j, d| out.push((j, d)));
        out.sort_unstable_by_key(|&(j, _)| j);
        out
    }

    /// Calls `f(j, distance)` for every vehicle in range of `i`, in no
    /// particular order.
    fn for_each_neighbor(&self, i: usize, mut f: impl FnMut(usize, f64)) {
        let me = &self.vehicles[i];
        let (cx, cy) = cell_of(me, self.range);
        // Cheap reject on squared distance, with slack so that the exact
        // `d <= range` test below alone decides boundary cases.
        let r2 = self.range * self.range * (1.0 + 1e-9);
        for dx in -1..=1 {
            for dy in -1..=1 {
                let Some(bucket) = self.cells.get(&(cx + dx, cy + dy)) else {
                    continue;
                };
                for &j in bucket {
                    if j == i {
                        continue;
                    }
                    let other = &self.vehicles[j];
                    let (ex, ey) = (other.x - me.x, other.y - me.y);
                    let d2 = ex * ex + ey * ey;
                    if d2 > r2 {
                        continue;
                    }
                    let d = d2.sqrt();
                    if d <= self.range {
                        f(j, d);
                    }
                }
            }
        }
    }
}

fn norm(dx: f64, dy: f64) -> f64 {
    (dx * dx + dy * dy).sqrt()
}

fn cell_of(v: &VehicleState, range: f64) -> (i64, i64) {
    ((v.x / range).floor() as i64, (v.y / range).floor() as i64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Parallelism {
    #[default]
    Sequential,
    /// Per-vehicle extraction on the rayon pool. Output is identical to `Sequential`.
    Rayon,
}

pub fn compute_features(ts: &Timestep, range: f64) -> FeatureFrame {
    compute_features_with(ts, range, Parallelism::Sequential)
}

pub fn compute_features_with(ts: &Timestep, range: f64, parallelism: Parallelism) -> FeatureFrame {
    let index = NeighborIndex::build(ts, range);
    let velocities: Vec<VelocityVector> = ts
        .vehicles
        .iter()
        .map(|v| heading_to_velocity(v.speed, v.angle))
        .collect();

    let extract = |i: usize| vehicle_features(ts, &index, &velocities, i);
    let entries = match parallelism {
        Parallelism::Sequential => (0..ts.vehicles.len()).map(extract).collect(),
        Parallelism::Rayon => (0..ts.vehicles.len()).into_par_iter().map(extract).collect(),
    };
    FeatureFrame {
        time: ts.time,
        range,
        entries,
    }
}

fn vehicle_features(
    ts: &Timestep,
    index: &NeighborIndex<'_>,
    velocities: &[VelocityVector],
    i: usize,
) -> VehicleFeatures {
    let me = &ts.vehicles[i];
    let v = velocities[i];
    let mut neighbors = Vec::with_capacity(32);
    index.for_each_neighbor(i, |j, distance| {
        let other = &ts.vehicles[j];
        let w = velocities[j];
        neighbors.push(NeighborRelation {
            other: other.id.clone(),
            index: j,
            distance,
            rel_speed: norm(v.vx - w.vx, v.vy - w.vy),
            heading_diff: heading_difference(me.angle, other.angle),
        });
    });
    neighbors.sort_unstable_by_key(|r| r.index);

    let degree = neighbors.len();
    let (avg_rel_speed, avg_rel_dist) = if degree == 0 {
        (0.0, 0.0)
    } else {
        let n = degree as f64;
        (
            neighbors.iter().map(|r| r.rel_speed).sum::<f64>() / n,
            neighbors.iter().map(|r| r.distance).sum::<f64>() / n,
        )
    };
    VehicleFeatures {
        state: me.clone(),
        velocity: v,
        neighbors,
        degree,
        avg_rel_speed,
        avg_rel_dist,
    }
}
