//! Trace-driven VANET clustering simulator.
//!
//! The pipeline is `ingest` (scenario files) → `features` (per-timestep
//! kinematics and neighbor sets) → `clustering` (cluster-head election and
//! maintenance) → `postproc` (reports and stability metrics), driven one
//! timestep at a time by `engine`. `storage` persists scenarios and runs.

pub mod clustering;
pub mod engine;
pub mod features;
pub mod ingest;
pub mod postproc;
pub mod storage;

pub use clustering::{Algorithm, ClusterConfig, ClusterState, Role};
pub use engine::{run_simulation, RunConfig, RunResult, TimestepRecord};
pub use features::{compute_features, FeatureFrame};
pub use ingest::{parse_csv, parse_fcd_xml, validate_scenario, Scenario, Timestep, VehicleId, VehicleState};
pub use postproc::MetricsSummary;
