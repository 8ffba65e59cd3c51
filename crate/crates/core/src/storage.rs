//! File-backed persistence for scenarios and runs.
//!
//! Layout under the data directory:
//!
//! ```text
//! scenarios/<id>/body         original upload
//! scenarios/<id>/meta.json
//! runs/<id>/config.json       scenario id and cluster configuration
//! runs/<id>/status.json       status, progress, error
//! runs/<id>/report.jsonl      report stream (report.jsonl.part while running)
//! runs/<id>/summary.json
//! runs/<id>/graph.csv
//! ```
//!
//! Every metadata file is replaced atomically (write to a temp file, then
//! rename). Summary, graph and report exist only for runs in `done`.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{ClusterConfig, ConfigError};
use crate::ingest::{validate_scenario, ParseError, Scenario, TraceFormat, ValidationReport};
use crate::postproc::MetricsSummary;

const REPORT_FILE: &str = "report.jsonl";
const REPORT_PART: &str = "report.jsonl.part";
const SUMMARY_FILE: &str = "summary.json";
const GRAPH_FILE: &str = "graph.csv";
const STATUS_FILE: &str = "status.json";
const CONFIG_FILE: &str = "config.json";

/// Only move progress to disk in steps of at least this much.
const PROGRESS_PERSIST_STEP: f64 = 0.01;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{kind} {id} not found")]
    NotFound { kind: &'static str, id: String },
    #[error("{0}")]
    Usage(String),
    #[error("run {id} is {status}, results are only available once it is done")]
    NotDone { id: String, status: RunStatus },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("scenario is not runnable: {}", .0.errors.join("; "))]
    Invalid(ValidationReport),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("corrupt record {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Queued,
    Running,
    Done,
    Failed,
    Cancelled,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunStatus::Done | RunStatus::Failed | RunStatus::Cancelled)
    }

    fn can_become(self, next: RunStatus) -> bool {
        use RunStatus::*;
        matches!(
            (self, next),
            (Queued, Running)
                | (Queued, Cancelled)
                | (Queued, Failed)
                | (Running, Done)
                | (Running, Failed)
                | (Running, Cancelled)
        )
    }
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RunStatus::Queued => "queued",
            RunStatus::Running => "running",
            RunStatus::Done => "done",
            RunStatus::Failed => "failed",
            RunStatus::Cancelled => "cancelled",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub id: String,
    pub name: String,
    /// Unix time in nanoseconds.
    pub created_at: u64,
    pub format: TraceFormat,
    pub n_timesteps: usize,
    pub n_vehicles: usize,
    pub validation: ValidationReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioRecord {
    pub meta: ScenarioMeta,
    pub body: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub scenario_id: String,
    pub config: ClusterConfig,
    pub status: RunStatus,
    pub progress: f64,
    pub error: String,
    /// Unix time in nanoseconds.
    pub created_at: u64,
}

#[derive(Serialize, Deserialize)]
struct RunConfigDoc {
    id: String,
    scenario_id: String,
    config: ClusterConfig,
    created_at: u64,
}

#[derive(Serialize, Deserialize)]
struct RunStatusDoc {
    status: RunStatus,
    progress: f64,
    error: String,
}

struct Registry {
    runs: BTreeMap<String, RunRecord>,
    persisted_progress: BTreeMap<String, f64>,
    last_stamp: u64,
}

pub struct Store {
    root: PathBuf,
    registry: Mutex<Registry>,
}

fn new_id() -> String {
    let bytes: [u8; 16] = rand::random();
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn is_id(s: &str) -> bool {
    s.len() == 32 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn remove_if_exists(path: &Path) -> io::Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
        _ => Ok(()),
    }
}

impl Store {
    /// Opens (creating if needed) the store at `root`.
    ///
    /// Runs left `running` by a previous process are marked failed with
    /// error "interrupted" and their partial reports removed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Store> {
        let root = root.into();
        fs::create_dir_all(root.join("scenarios"))?;
        fs::create_dir_all(root.join("runs"))?;

        let mut runs = BTreeMap::new();
        for entry in fs::read_dir(root.join("runs"))? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let dir = entry.path();
            if !is_id(&name) || !dir.join(CONFIG_FILE).exists() {
                continue;
            }
            let cfg: RunConfigDoc = read_json(&dir.join(CONFIG_FILE))?;
            let status: RunStatusDoc = read_json(&dir.join(STATUS_FILE))?;
            let mut record = RunRecord {
                id: cfg.id,
                scenario_id: cfg.scenario_id,
                config: cfg.config,
                status: status.status,
                progress: status.progress,
                error: status.error,
                created_at: cfg.created_at,
            };
            if record.status == RunStatus::Running {
                record.status = RunStatus::Failed;
                record.error = "interrupted".to_string();
                remove_if_exists(&dir.join(REPORT_PART))?;
                write_status(&dir, &record)?;
            }
            runs.insert(record.id.clone(), record);
        }
        let last_stamp = runs.values().map(|r| r.created_at).max().unwrap_or(0);
        Ok(Store {
            root,
            registry: Mutex::new(Registry {
                runs,
                persisted_progress: BTreeMap::new(),
                last_stamp,
            }),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn registry(&self) -> std::sync::MutexGuard<'_, Registry> {
        self.registry.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Wall-clock nanoseconds, strictly increasing within this process.
    fn stamp(&self) -> u64 {
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        let mut reg = self.registry();
        reg.last_stamp = now.max(reg.last_stamp + 1);
        reg.last_stamp
    }

    fn scenario_dir(&self, id: &str) -> Result<PathBuf> {
        let dir = self.root.join("scenarios").join(id);
        if is_id(id) && dir.join("meta.json").exists() {
            Ok(dir)
        } else {
            Err(StoreError::NotFound {
                kind: "scenario",
                id: id.to_string(),
            })
        }
    }

    fn run_dir(&self, id: &str) -> PathBuf {
        self.root.join("runs").join(id)
    }

    /// Parses and validates `body`, then stores it. Unparseable or
    /// unrunnable scenarios are rejected.
    pub fn put_scenario(&self, name: &str, format: TraceFormat, body: &[u8]) -> Result<ScenarioMeta> {
        let scenario = format.parse(body)?;
        let validation = validate_scenario(&scenario);
        if !validation.is_runnable() {
            return Err(StoreError::Invalid(validation));
        }
        let meta = ScenarioMeta {
            id: new_id(),
            name: name.to_string(),
            created_at: self.stamp(),
            format,
            n_timesteps: validation.n_timesteps,
            n_vehicles: validation.n_vehicles,
            validation,
        };
        let scenarios = self.root.join("scenarios");
        let staging = scenarios.join(format!(".staging-{}", meta.id));
        fs::create_dir_all(&staging)?;
        let mut f = File::create(staging.join("body"))?;
        f.write_all(body)?;
        f.sync_all()?;
        write_atomic(
            &staging.join("meta.json"),
            &serde_json::to_vec_pretty(&meta).expect("meta serializes"),
        )?;
        fs::rename(&staging, scenarios.join(&meta.id))?;
        Ok(meta)
    }

    pub fn get_scenario(&self, id: &str) -> Result<ScenarioRecord> {
        let dir = self.scenario_dir(id)?;
        Ok(ScenarioRecord {
            meta: read_json(&dir.join("meta.json"))?,
            body: fs::read(dir.join("body"))?,
        })
    }

    /// Loads and parses a stored scenario.
    pub fn load_scenario(&self, id: &str) -> Result<(ScenarioMeta, Scenario)> {
        let rec = self.get_scenario(id)?;
        let mut scenario = rec.meta.format.parse(&rec.body)?;
        scenario.name = rec.meta.name.clone();
        Ok((rec.meta, scenario))
    }

    /// All scenarios, newest first.
    pub fn list_scenarios(&self) -> Result<Vec<ScenarioMeta>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join("scenarios"))? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if is_id(&name) {
                out.push(read_json::<ScenarioMeta>(&entry.path().join("meta.json"))?);
            }
        }
        out.sort_by(|a, b| b.created_at.cmp(&a.created_at).then_with(|| a.id.cmp(&b.id)));
        Ok(out)
    }

    pub fn create_run(&self, scenario_id: &str, config: ClusterConfig) -> Result<RunRecord> {
        self.scenario_dir(scenario_id)?;
        config.validate()?;
        let record = RunRecord {
            id: new_id(),
            scenario_id: scenario_id.to_string(),
            config,
            status: RunStatus::Queued,
            progress: 0.0,
            error: String::new(),
            created_at: self.stamp(),
        };
        let dir = self.run_dir(&record.id);
        fs::create_dir_all(&dir)?;
        let doc = RunConfigDoc {
            id: record.id.clone(),
            scenario_id: record.scenario_id.clone(),
            config: record.config.clone(),
            created_at: record.created_at,
        };
        write_status(&dir, &record)?;
        write_atomic(
            &dir.join(CONFIG_FILE),
            &serde_json::to_vec_pretty(&doc).expect("config serializes"),
        )?;
        self.registry().runs.insert(record.id.clone(), record.clone());
        Ok(record)
    }

    pub fn get_run(&self, id: &str) -> Result<RunRecord> {
        self.registry()
            .runs
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound {
                kind: "run",
                id: id.to_string(),
            })
    }

    /// All runs, newest first.
    pub fn list_runs(&self) -> Vec<RunRecord> {
        let mut runs: Vec<RunRecord> = self.registry().runs.values().cloned().collect();
        runs.sort_by(|a, b| b.created_at.cmp(&a.created_at).then_with(|| a.id.cmp(&b.id)));
        runs
    }

    /// Moves a run to `status`. Reaching `done` goes through
    /// [`Store::attach_artifacts`] instead. Leaving for `failed` or
    /// `cancelled` discards any partial report.
    pub fn update_run(&self, id: &str, status: RunStatus, error: Option<&str>) -> Result<RunRecord> {
        if status == RunStatus::Done {
            return Err(StoreError::Usage(
                "runs become done only by attaching their artifacts".into(),
            ));
        }
        let mut reg = self.registry();
        let record = reg.runs.get_mut(id).ok_or_else(|| StoreError::NotFound {
            kind: "run",
            id: id.to_string(),
        })?;
        if !record.status.can_become(status) {
            return Err(StoreError::Usage(format!(
                "illegal transition {} -> {} for run {id}",
                record.status, status
            )));
        }
        let dir = self.root.join("runs").join(id);
        if matches!(status, RunStatus::Failed | RunStatus::Cancelled) {
            remove_if_exists(&dir.join(REPORT_PART))?;
        }
        let mut next = record.clone();
        next.status = status;
        next.error = error.unwrap_or_default().to_string();
        write_status(&dir, &next)?;
        *record = next.clone();
        reg.persisted_progress.insert(id.to_string(), next.progress);
        Ok(next)
    }

    /// Records progress of a running run. Disk writes are coalesced; the
    /// in-memory value is always current.
    pub fn set_progress(&self, id: &str, progress: f64) -> Result<()> {
        let mut reg = self.registry();
        let Registry {
            runs,
            persisted_progress,
            ..
        } = &mut *reg;
        let record = runs.get_mut(id).ok_or_else(|| StoreError::NotFound {
            kind: "run",
            id: id.to_string(),
        })?;
        if record.status != RunStatus::Running {
            return Err(StoreError::Usage(format!("run {id} is {}, not running", record.status)));
        }
        let progress = progress.clamp(record.progress, 1.0);
        record.progress = progress;
        let last = persisted_progress.get(id).copied().unwrap_or(0.0);
        if progress - last >= PROGRESS_PERSIST_STEP {
            write_status(&self.root.join("runs").join(id), record)?;
            persisted_progress.insert(id.to_string(), progress);
        }
        Ok(())
    }

    /// Opens the report stream of a running run for appending.
    pub fn report_writer(&self, id: &str) -> Result<File> {
        let status = self.get_run(id)?.status;
        if status != RunStatus::Running {
            return Err(StoreError::Usage(format!("run {id} is {status}, not running")));
        }
        Ok(OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.run_dir(id).join(REPORT_PART))?)
    }

    /// Publishes the results of a running run and marks it done.
    pub fn attach_artifacts(&self, id: &str, summary: &MetricsSummary, graph_csv: &[u8]) -> Result<RunRecord> {
        let mut reg = self.registry();
        let record = reg.runs.get_mut(id).ok_or_else(|| StoreError::NotFound {
            kind: "run",
            id: id.to_string(),
        })?;
        if record.status != RunStatus::Running {
            return Err(StoreError::Usage(format!(
                "illegal transition {} -> done for run {id}",
                record.status
            )));
        }
        let dir = self.root.join("runs").join(id);
        let part = dir.join(REPORT_PART);
        if !part.exists() {
            File::create(&part)?;
        }
        File::open(&part)?.sync_all()?;
        fs::rename(&part, dir.join(REPORT_FILE))?;
        write_atomic(&dir.join(SUMMARY_FILE), &summary.to_json_bytes())?;
        write_atomic(&dir.join(GRAPH_FILE), graph_csv)?;
        let mut next = record.clone();
        next.status = RunStatus::Done;
        next.progress = 1.0;
        write_status(&dir, &next)?;
        *record = next.clone();
        reg.persisted_progress.remove(id);
        Ok(next)
    }

    fn done_dir(&self, id: &str) -> Result<PathBuf> {
        let run = self.get_run(id)?;
        if run.status != RunStatus::Done {
            return Err(StoreError::NotDone {
                id: id.to_string(),
                status: run.status,
            });
        }
        Ok(self.run_dir(id))
    }

    pub fn read_summary_bytes(&self, id: &str) -> Result<Vec<u8>> {
        Ok(fs::read(self.done_dir(id)?.join(SUMMARY_FILE))?)
    }

    pub fn read_summary(&self, id: &str) -> Result<MetricsSummary> {
        read_json(&self.done_dir(id)?.join(SUMMARY_FILE))
    }

    pub fn read_graph(&self, id: &str) -> Result<Vec<u8>> {
        Ok(fs::read(self.done_dir(id)?.join(GRAPH_FILE))?)
    }

    /// Report records `offset..offset + limit` (by record index), as stored.
    /// `limit = None` reads to the end.
    pub fn read_report(&self, id: &str, offset: usize, limit: Option<usize>) -> Result<Vec<u8>> {
        let path = self.done_dir(id)?.join(REPORT_FILE);
        if offset == 0 && limit.is_none() {
            return Ok(fs::read(path)?);
        }
        let mut reader = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        let mut line = Vec::new();
        let mut index = 0usize;
        let end = limit.map_or(usize::MAX, |l| offset.saturating_add(l));
        while index < end {
            line.clear();
            if reader.read_until(b'\n', &mut line)? == 0 {
                break;
            }
            if index >= offset {
                out.extend_from_slice(&line);
            }
            index += 1;
        }
        Ok(out)
    }
}

fn write_status(dir: &Path, record: &RunRecord) -> io::Result<()> {
    let doc = RunStatusDoc {
        status: record.status,
        progress: record.progress,
        error: record.error.clone(),
    };
    write_atomic(
        &dir.join(STATUS_FILE),
        &serde_json::to_vec_pretty(&doc).expect("status serializes"),
    )
}
