//! Post-processing: per-timestep series, role intervals, the aggregate
//! stability metrics, and the byte encodings of graph data and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{ClusterState, Role};
use crate::engine::TimestepRecord;
use crate::ingest::{Timestep, VehicleId};

pub const GRAPH_CSV_HEADER: &str = "t,n_vehicles,n_clusters,n_cm,n_unclustered";
pub const REPORT_CSV_HEADER: &str = "t,veh,x,y,speed,angle,degree,role,cluster,dist_ch";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub t: f64,
    pub n_vehicles: usize,
    pub n_clusters: usize,
    pub n_cm: usize,
    pub n_unclustered: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntervalKind {
    #[serde(rename = "CH")]
    Head,
    #[serde(rename = "CM")]
    Member,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IntervalStat {
    pub veh: VehicleId,
    pub kind: IntervalKind,
    pub start_t: f64,
    pub n_steps: usize,
    pub duration: f64,
    /// Head the member stayed attached to; `None` for head intervals.
    pub ch: Option<VehicleId>,
}

#[derive(Clone, Debug, PartialEq)]
struct OpenInterval {
    kind: IntervalKind,
    ch: Option<VehicleId>,
    start_t: f64,
    n_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub avg_ch_duration_s: f64,
    pub avg_cm_duration_s: f64,
    pub avg_ch_changes_per_vehicle: f64,
    pub avg_num_clusters: f64,
    pub avg_num_cm: f64,
    pub avg_num_unclustered: f64,
    pub n_timesteps: usize,
    pub n_vehicles: usize,
    pub nominal_dt: f64,
}

impl MetricsSummary {
    /// The flat JSON document stored and served for a finished run.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("summary serializes");
        out.push(b'\n');
        out
    }
}

/// Folds a run's cluster states, one timestep at a time, into the series and
/// interval statistics behind [`MetricsSummary`].
#[derive(Clone, Debug, Default)]
pub struct Accumulator {
    series: Vec<SeriesPoint>,
    closed: Vec<(VehicleId, OpenInterval)>,
    open: BTreeMap<VehicleId, OpenInterval>,
    seen: BTreeSet<VehicleId>,
    ch_acquisitions: usize,
}

impl Accumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn series(&self) -> &[SeriesPoint] {
        &self.series
    }

    pub fn ch_acquisitions(&self) -> usize {
        self.ch_acquisitions
    }

    pub fn accumulate(&mut self, state: &ClusterState, ts: &Timestep) -> Result<(), UsageError> {
        if state.time != ts.time {
            return Err(UsageError(format!(
                "state time {} does not match timestep time {}",
                state.time, ts.time
            )));
        }
        if let Some(last) = self.series.last() {
            if ts.time <= last.t {
                return Err(UsageError(format!(
                    "out-of-order state: t={} after t={}",
                    ts.time, last.t
                )));
            }
        }
        if state.roles.len() != ts.vehicles.len() {
            return Err(UsageError(format!(
                "state has {} roles for {} vehicles at t={}",
                state.roles.len(),
                ts.vehicles.len(),
                ts.time
            )));
        }
        let first_step = self.series.is_empty();
        let mut point = SeriesPoint {
            t: ts.time,
            n_vehicles: ts.vehicles.len(),
            n_clusters: 0,
            n_cm: 0,
            n_unclustered: 0,
        };

        let mut still_open = BTreeMap::new();
        for v in &ts.vehicles {
            let role = state
                .role(&v.id)
                .ok_or_else(|| UsageError(format!("vehicle {} has no role at t={}", v.id, ts.time)))?;
            let key = match role {
                Role::Head => {
                    point.n_clusters += 1;
                    Some((IntervalKind::Head, None))
                }
                Role::Member => {
                    point.n_cm += 1;
                    Some((IntervalKind::Member, state.cluster_of.get(&v.id).cloned()))
                }
                Role::Unclustered => {
                    point.n_unclustered += 1;
                    None
                }
            };
            let previous = self.open.remove(&v.id);
            let was_head = matches!(&previous, Some(o) if o.kind == IntervalKind::Head);
            if role == Role::Head && !was_head && !first_step {
                self.ch_acquisitions += 1;
            }
            let next = match (previous, key) {
                (Some(mut o), Some((kind, ch))) if o.kind == kind && o.ch == ch => {
                    o.n_steps += 1;
                    Some(o)
                }
                (previous, key) => {
                    if let Some(o) = previous {
                        self.closed.push((v.id.clone(), o));
                    }
                    key.map(|(kind, ch)| OpenInterval {
                        kind,
                        ch,
                        start_t: ts.time,
                        n_steps: 1,
                    })
                }
            };
            if let Some(o) = next {
                still_open.insert(v.id.clone(), o);
            }
            if !self.seen.contains(&v.id) {
                self.seen.insert(v.id.clone());
            }
        }
        // whatever is left belongs to vehicles that departed
        for (id, o) in std::mem::replace(&mut self.open, still_open) {
            self.closed.push((id, o));
        }
        self.series.push(point);
        Ok(())
    }

    /// All intervals, closed and still open, with durations in seconds.
    pub fn intervals(&self, nominal_dt: f64) -> Vec<IntervalStat> {
        self.closed
            .iter()
            .map(|(id, o)| (id, o))
            .chain(self.open.iter())
            .map(|(id, o)| IntervalStat {
                veh: id.clone(),
                kind: o.kind,
                start_t: o.start_t,
                n_steps: o.n_steps,
                duration: o.n_steps as f64 * nominal_dt,
                ch: o.ch.clone(),
            })
            .collect()
    }

    pub fn finalize(&self, nominal_dt: f64) -> Result<MetricsSummary, UsageError> {
        if self.series.is_empty() {
            return Err(UsageError("no states accumulated".into()));
        }
        let intervals = self.intervals(nominal_dt);
        let mean_duration = |kind: IntervalKind| {
            let durations: Vec<f64> = intervals
                .iter()
                .filter(|i| i.kind == kind)
                .map(|i| i.duration)
                .collect();
            mean(&durations)
        };
        let column = |f: fn(&SeriesPoint) -> usize| {
            let values: Vec<f64> = self.series.iter().map(|p| f(p) as f64).collect();
            mean(&values)
        };
        let n_vehicles = self.seen.len();
        Ok(MetricsSummary {
            avg_ch_duration_s: mean_duration(IntervalKind::Head),
            avg_cm_duration_s: mean_duration(IntervalKind::Member),
            avg_ch_changes_per_vehicle: if n_vehicles == 0 {
                0.0
            } else {
                self.ch_acquisitions as f64 / n_vehicles as f64
            },
            avg_num_clusters: column(|p| p.n_clusters),
            avg_num_cm: column(|p| p.n_cm),
            avg_num_unclustered: column(|p| p.n_unclustered),
            n_timesteps: self.series.len(),
            n_vehicles,
            nominal_dt,
        })
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

pub fn emit_graph_csv(series: &[SeriesPoint]) -> Vec<u8> {
    let mut out = String::with_capacity(24 * (series.len() + 1));
    out.push_str(GRAPH_CSV_HEADER);
    out.push('\n');
    for p in series {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            p.t, p.n_vehicles, p.n_clusters, p.n_cm, p.n_unclustered
        );
    }
    out.into_bytes()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Jsonl,
    Csv,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Jsonl => "jsonl",
            ReportFormat::Csv => "csv",
        }
    }

    /// Bytes preceding the first record.
    pub fn header(self) -> &'static [u8] {
        match self {
            ReportFormat::Jsonl => b"",
            ReportFormat::Csv => b"t,veh,x,y,speed,angle,degree,role,cluster,dist_ch\n",
        }
    }

    /// Appends one record, including its line terminator.
    pub fn encode(self, record: &TimestepRecord, out: &mut Vec<u8>) {
        match self {
            ReportFormat::Jsonl => {
                serde_json::to_writer(&mut *out, record).expect("record serializes");
                out.push(b'\n');
            }
            ReportFormat::Csv => {
                let mut line = String::with_capacity(96);
                let _ = write!(
                    line,
                    "{},{},{},{},{},{},{},{},",
                    record.t,
                    csv_field(record.veh.as_str()),
                    record.x,
                    record.y,
                    record.speed,
                    record.angle,
                    record.degree,
                    record.role
                );
                if let Some(c) = &record.cluster {
                    line.push_str(&csv_field(c.as_str()));
                }
                line.push(',');
                if let Some(d) = record.dist_ch {
                    let _ = write!(line, "{d}");
                }
                line.push('\n');
                out.extend_from_slice(line.as_bytes());
            }
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(ReportFormat::Jsonl),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format `{other}` (expected csv or jsonl)")),
        }
    }
}

fn csv_field(s: &str) -> std::borrow::Cow<'_, str> {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\"")).into()
    } else {
        s.into()
    }
}

/// Encodes a complete report. Records are expected in `(t, veh)` order.
pub fn emit_report(records: &[TimestepRecord], format: ReportFormat) -> Vec<u8> {
    let mut out = format.header().to_vec();
    for r in records {
        format.encode(r, &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::VehicleState;

    fn id(s: &str) -> VehicleId {
        VehicleId::new(s)
    }

    fn timestep(t: f64, ids: &[&str]) -> Timestep {
        Timestep::new(
            t,
            ids.iter().map(|i| VehicleState::new(i, 0.0, 0.0, 0.0, 0.0)).collect(),
        )
    }

    /// Builds a state from `(vehicle, role, head)` triples.
    fn state(t: f64, roles: &[(&str, Role, Option<&str>)]) -> ClusterState {
        let mut s = ClusterState {
            time: t,
            ..Default::default()
        };
        for &(v, role, head) in roles {
            s.roles.insert(id(v), role);
            if role == Role::Head {
                s.members.entry(id(v)).or_default();
            }
            if let Some(h) = head {
                s.cluster_of.insert(id(v), id(h));
                s.members.entry(id(h)).or_default().push(id(v));
            }
        }
        s
    }

    fn t3_state(t: f64) -> ClusterState {
        state(
            t,
            &[
                ("A", Role::Head, None),
                ("B", Role::Member, Some("A")),
                ("C", Role::Unclustered, None),
            ],
        )
    }

    #[test]
    fn static_t3_two_steps() {
        let mut acc = Accumulator::new();
        for t in [0.0, 1.0] {
            acc.accumulate(&t3_state(t), &timestep(t, &["A", "B", "C"])).unwrap();
        }
        let counts: Vec<_> = acc
            .series()
            .iter()
            .map(|p| (p.t, p.n_vehicles, p.n_clusters, p.n_cm, p.n_unclustered))
            .collect();
        assert_eq!(counts, vec![(0.0, 3, 1, 1, 1), (1.0, 3, 1, 1, 1)]);

        let intervals = acc.intervals(1.0);
        assert_eq!(intervals.len(), 2);
        let ch = intervals.iter().find(|i| i.kind == IntervalKind::Head).unwrap();
        assert_eq!((ch.veh.as_str(), ch.n_steps), ("A", 2));
        let cm = intervals.iter().find(|i| i.kind == IntervalKind::Member).unwrap();
        assert_eq!((cm.veh.as_str(), cm.n_steps, cm.ch.clone()), ("B", 2, Some(id("A"))));

        let s = acc.finalize(1.0).unwrap();
        assert_eq!(s.avg_ch_duration_s, 2.0);
        assert_eq!(s.avg_cm_duration_s, 2.0);
        assert_eq!(s.avg_ch_changes_per_vehicle, 0.0);
        assert_eq!(s.avg_num_clusters, 1.0);
        assert_eq!(s.avg_num_cm, 1.0);
        assert_eq!(s.avg_num_unclustered, 1.0);
        assert_eq!((s.n_timesteps, s.n_vehicles), (2, 3));

        assert_eq!(
            emit_graph_csv(acc.series()),
            b"t,n_vehicles,n_clusters,n_cm,n_unclustered\n0,3,1,1,1\n1,3,1,1,1\n".to_vec()
        );
    }

    #[test]
    fn head_switch_splits_member_interval() {
        // B follows A for steps 0..5, then D (which becomes a head at step 5).
        let mut acc = Accumulator::new();
        for k in 0..10 {
            let t = k as f64;
            let s = if k < 5 {
                state(
                    t,
                    &[
                        ("A", Role::Head, None),
                        ("B", Role::Member, Some("A")),
                        ("D", Role::Unclustered, None),
                    ],
                )
            } else {
                state(
                    t,
                    &[
                        ("A", Role::Unclustered, None),
                        ("B", Role::Member, Some("D")),
                        ("D", Role::Head, None),
                    ],
                )
            };
            acc.accumulate(&s, &timestep(t, &["A", "B", "D"])).unwrap();
        }
        let b: Vec<_> = acc
            .intervals(1.0)
            .into_iter()
            .filter(|i| i.veh.as_str() == "B")
            .map(|i| (i.n_steps, i.ch.unwrap()))
            .collect();
        assert_eq!(b, vec![(5, id("A")), (5, id("D"))]);
        assert_eq!(acc.ch_acquisitions(), 1);
        let s = acc.finalize(1.0).unwrap();
        assert!((s.avg_ch_changes_per_vehicle - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn all_unclustered() {
        let mut acc = Accumulator::new();
        for t in [0.0, 0.5, 1.0] {
            let s = state(t, &[("A", Role::Unclustered, None), ("B", Role::Unclustered, None)]);
            acc.accumulate(&s, &timestep(t, &["A", "B"])).unwrap();
        }
        let s = acc.finalize(0.5).unwrap();
        assert_eq!(s.avg_ch_duration_s, 0.0);
        assert_eq!(s.avg_num_clusters, 0.0);
        assert_eq!(s.avg_num_unclustered, 2.0);
    }

    #[test]
    fn departure_closes_interval_and_return_counts_as_acquisition() {
        let mut acc = Accumulator::new();
        acc.accumulate(&state(0.0, &[("A", Role::Head, None)]), &timestep(0.0, &["A"]))
            .unwrap();
        acc.accumulate(&state(1.0, &[]), &timestep(1.0, &[])).unwrap();
        acc.accumulate(&state(2.0, &[("A", Role::Head, None)]), &timestep(2.0, &["A"]))
            .unwrap();
        let steps: Vec<usize> = acc.intervals(1.0).iter().map(|i| i.n_steps).collect();
        assert_eq!(steps, vec![1, 1]);
        assert_eq!(acc.ch_acquisitions(), 1);
    }

    #[test]
    fn out_of_order_and_empty_are_usage_errors() {
        let mut acc = Accumulator::new();
        assert!(acc.finalize(1.0).is_err());
        acc.accumulate(&state(1.0, &[]), &timestep(1.0, &[])).unwrap();
        assert!(acc.accumulate(&state(0.5, &[]), &timestep(0.5, &[])).is_err());
        assert!(acc.accumulate(&state(2.0, &[]), &timestep(3.0, &[])).is_err());
    }

    #[test]
    fn graph_csv_formatting() {
        assert_eq!(emit_graph_csv(&[]), format!("{GRAPH_CSV_HEADER}\n").into_bytes());
        let mut acc = Accumulator::new();
        for t in [0.0, 0.5] {
            acc.accumulate(&state(t, &[]), &timestep(t, &[])).unwrap();
        }
        let text = String::from_utf8(emit_graph_csv(acc.series())).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows, vec!["0,0,0,0,0", "0.5,0,0,0,0"]);
    }

    fn record(veh: &str, role: Role, cluster: Option<&str>, dist: Option<f64>) -> TimestepRecord {
        TimestepRecord {
            t: 0.0,
            veh: id(veh),
            x: 50.0,
            y: 0.0,
            speed: 10.0,
            angle: 90.0,
            degree: 1,
            role,
            cluster: cluster.map(id),
            dist_ch: dist,
        }
    }

    #[test]
    fn report_encodings() {
        let b = record("B", Role::Member, Some("A"), Some(50.0));
        let c = record("C", Role::Unclustered, None, None);
        let csv = String::from_utf8(emit_report(&[b.clone(), c.clone()], ReportFormat::Csv)).unwrap();
        assert_eq!(
            csv,
            "t,veh,x,y,speed,angle,degree,role,cluster,dist_ch\n\
             0,B,50,0,10,90,1,CM,A,50\n\
             0,C,50,0,10,90,1,UNCLUSTERED,,\n"
        );
        let jsonl = String::from_utf8(emit_report(&[b, c], ReportFormat::Jsonl)).unwrap();
        let lines: Vec<serde_json::Value> = jsonl.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines[0]["role"], "CM");
        assert_eq!(lines[0]["cluster"], "A");
        assert_eq!(lines[0]["dist_ch"], 50.0);
        assert!(lines[1]["cluster"].is_null() && lines[1]["dist_ch"].is_null());
        assert!(jsonl
            .starts_with(r#"{"t":0.0,"veh":"B","x":50.0,"y":0.0,"speed":10.0,"angle":90.0,"degree":1,"role":"CM""#));
    }

    #[test]
    fn empty_reports() {
        assert!(emit_report(&[], ReportFormat::Jsonl).is_empty());
        assert_eq!(
            emit_report(&[], ReportFormat::Csv),
            format!("{REPORT_CSV_HEADER}\n").into_bytes()
        );
    }

    #[test]
    fn csv_quotes_awkward_ids() {
        let r = record("a,b", Role::Head, Some("a,b"), Some(0.0));
        let csv = String::from_utf8(emit_report(&[r], ReportFormat::Csv)).unwrap();
        assert!(csv.ends_with("0,\"a,b\",50,0,10,90,1,CH,\"a,b\",0\n"));
    }
}
