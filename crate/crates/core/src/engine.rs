//! The simulation core: one discrete event per trace timestep, chaining
//! feature extraction, the clustering step, record emission and metric
//! accumulation.

use std::io::{self, Write};
use std::sync::atomic::{AtomicBool, Ordering};

use serde::Serialize;
use thiserror::Error;

use crate::clustering::{
    check_invariants, roles_by_index, step_clustering, ClusterConfig, ClusterState, ConfigError, Role,
};
use crate::features::{compute_features_with, FeatureFrame, Parallelism};
use crate::ingest::{validate_scenario, Scenario, VehicleId};
use crate::postproc::{emit_graph_csv, Accumulator, MetricsSummary, ReportFormat, SeriesPoint};

#[derive(Clone, Debug)]
pub struct RunConfig<'a> {
    pub scenario: &'a Scenario,
    pub cluster: ClusterConfig,
    /// When false, the record sink is never called.
    pub emit_report: bool,
    pub parallelism: Parallelism,
}

impl<'a> RunConfig<'a> {
    pub fn new(scenario: &'a Scenario, cluster: ClusterConfig) -> Self {
        RunConfig {
            scenario,
            cluster,
            emit_report: true,
            parallelism: Parallelism::Sequential,
        }
    }
}

/// One vehicle at one event, as written to the report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimestepRecord {
    pub t: f64,
    pub veh: VehicleId,
    pub x: f64,
    pub y: f64,
    pub speed: f64,
    pub angle: f64,
    pub degree: usize,
    pub role: Role,
    pub cluster: Option<VehicleId>,
    pub dist_ch: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub summary: MetricsSummary,
    pub series: Vec<SeriesPoint>,
    pub final_state: ClusterState,
    pub n_events: usize,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("scenario is not runnable: {}", .0.join("; "))]
    InvalidScenario(Vec<String>),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run cancelled")]
    Cancelled,
    #[error("internal error: {0}")]
    Internal(String),
    #[error("writing report: {0}")]
    Sink(#[from] io::Error),
}

/// Drives the event loop over every timestep of the scenario.
///
/// `progress` receives the completed fraction after every event. `cancel` is
/// polled before each event.
pub fn run_simulation(
    cfg: &RunConfig<'_>,
    sink: &mut dyn FnMut(&TimestepRecord) -> io::Result<()>,
    progress: &mut dyn FnMut(f64),
    cancel: &AtomicBool,
) -> Result<RunResult, EngineError> {
    cfg.cluster.validate()?;
    let validation = validate_scenario(cfg.scenario);
    if !validation.is_runnable() {
        return Err(EngineError::InvalidScenario(validation.errors));
    }

    let timesteps = &cfg.scenario.timesteps;
    let total = timesteps.len();
    let mut acc = Accumulator::new();
    let mut state: Option<ClusterState> = None;
    progress(0.0);

    for (k, ts) in timesteps.iter().enumerate() {
        if cancel.load(Ordering::Relaxed) {
            return Err(EngineError::Cancelled);
        }
        let frame = compute_features_with(ts, cfg.cluster.range, cfg.parallelism);
        let next = step_clustering(state.as_ref(), &frame, &cfg.cluster)?;
        check_invariants(&next, &frame).map_err(|e| EngineError::Internal(format!("t={}: {e}", ts.time)))?;
        if cfg.emit_report {
            emit_records(&frame, &next, sink)?;
        }
        acc.accumulate(&next, ts)
            .map_err(|e| EngineError::Internal(e.to_string()))?;
        state = Some(next);
        progress((k + 1) as f64 / total as f64);
    }

    let summary = acc
        .finalize(cfg.scenario.nominal_dt)
        .map_err(|e| EngineError::Internal(e.to_string()))?;
    Ok(RunResult {
        summary,
        series: acc.series().to_vec(),
        final_state: state.unwrap_or_default(),
        n_events: total,
    })
}

fn emit_records(
    frame: &FeatureFrame,
    state: &ClusterState,
    sink: &mut dyn FnMut(&TimestepRecord) -> io::Result<()>,
) -> Result<(), EngineError> {
    let roles = roles_by_index(state, frame).map_err(EngineError::Internal)?;
    for (e, &role) in frame.entries.iter().zip(&roles) {
        let v = &e.state;
        let (cluster, dist_ch) = match role {
            Role::Head => (Some(v.id.clone()), Some(0.0)),
            Role::Member => {
                let head = &state.cluster_of[&v.id];
                let rel = e
                    .neighbor(head)
                    .ok_or_else(|| EngineError::Internal(format!("member {} out of range", v.id)))?;
                (Some(head.clone()), Some(rel.distance))
            }
            Role::Unclustered => (None, None),
        };
        sink(&TimestepRecord {
            t: frame.time,
            veh: v.id.clone(),
            x: v.x,
            y: v.y,
            speed: v.speed,
            angle: v.angle,
            degree: e.degree,
            role,
            cluster,
            dist_ch,
        })?;
    }
    Ok(())
}

/// Everything a finished run persists besides the report stream.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub result: RunResult,
    pub summary_json: Vec<u8>,
    pub graph_csv: Vec<u8>,
}

/// Runs the simulation and streams the encoded report into `report`.
///
/// This is the single code path behind both the CLI and the service, so
/// their outputs agree byte for byte.
pub fn run_to_writer<W: Write>(
    cfg: &RunConfig<'_>,
    format: ReportFormat,
    report: W,
    progress: &mut dyn FnMut(f64),
    cancel: &AtomicBool,
) -> Result<RunArtifacts, EngineError> {
    let mut out = io::BufWriter::with_capacity(1 << 16, report);
    out.write_all(format.header())?;
    let mut line = Vec::with_capacity(256);
    let mut sink = |r: &TimestepRecord| {
        line.clear();
        format.encode(r, &mut line);
        out.write_all(&line)
    };
    let result = run_simulation(cfg, &mut sink, progress, cancel)?;
    out.flush()?;
    Ok(RunArtifacts {
        summary_json: result.summary.to_json_bytes(),
        graph_csv: emit_graph_csv(&result.series),
        result,
    })
}
