//! Bounded worker pool executing queued runs in FIFO order.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;

use cvanetsim_core::engine::{run_to_writer, EngineError, RunConfig};
use cvanetsim_core::features::Parallelism;
use cvanetsim_core::postproc::ReportFormat;
use cvanetsim_core::storage::{RunRecord, RunStatus, Store, StoreError};

#[derive(Default)]
struct Queue {
    pending: VecDeque<String>,
    stopping: bool,
}

struct Shared {
    store: Arc<Store>,
    queue: Mutex<Queue>,
    wake: Condvar,
    cancel_flags: Mutex<HashMap<String, Arc<AtomicBool>>>,
    parallelism: Parallelism,
}

pub struct Executor {
    shared: Arc<Shared>,
    workers: Mutex<Vec<thread::JoinHandle<()>>>,
}

#[derive(Debug)]
pub enum CancelError {
    AlreadyFinished(RunStatus),
    Store(StoreError),
}

impl Executor {
    /// Starts `workers` threads. Runs still `queued` in the store are
    /// re-submitted oldest first.
    pub fn start(store: Arc<Store>, workers: usize, parallelism: Parallelism) -> Executor {
        let shared = Arc::new(Shared {
            store,
            queue: Mutex::new(Queue::default()),
            wake: Condvar::new(),
            cancel_flags: Mutex::new(HashMap::new()),
            parallelism,
        });
        let handles = (0..workers.max(1))
            .map(|n| {
                let shared = Arc::clone(&shared);
                thread::Builder::new()
                    .name(format!("run-worker-{n}"))
                    .spawn(move || worker_loop(&shared))
                    .expect("spawn worker thread")
            })
            .collect();
        let exec = Executor {
            shared,
            workers: Mutex::new(handles),
        };
        let mut queued: Vec<RunRecord> = exec
            .shared
            .store
            .list_runs()
            .into_iter()
            .filter(|r| r.status == RunStatus::Queued)
            .collect();
        queued.sort_by_key(|r| r.created_at);
        for r in queued {
            exec.submit(&r.id);
        }
        exec
    }

    pub fn submit(&self, run_id: &str) {
        self.shared
            .cancel_flags
            .lock()
            .unwrap()
            .insert(run_id.to_string(), Arc::new(AtomicBool::new(false)));
        self.shared.queue.lock().unwrap().pending.push_back(run_id.to_string());
        self.shared.wake.notify_one();
    }

    /// Cancels a queued run immediately, or asks a running one to stop.
    pub fn cancel(&self, run_id: &str) -> Result<RunRecord, CancelError> {
        let store = &self.shared.store;
        loop {
            let run = store.get_run(run_id).map_err(CancelError::Store)?;
            match run.status {
                RunStatus::Queued => match store.update_run(run_id, RunStatus::Cancelled, None) {
                    Ok(r) => return Ok(r),
                    // a worker picked it up in the meantime
                    Err(StoreError::Usage(_)) => continue,
                    Err(e) => return Err(CancelError::Store(e)),
                },
                RunStatus::Running => {
                    if let Some(flag) = self.shared.cancel_flags.lock().unwrap().get(run_id) {
                        flag.store(true, Ordering::Relaxed);
                    }
                    return Ok(run);
                }
                status => return Err(CancelError::AlreadyFinished(status)),
            }
        }
    }

    /// Stops handing out queued runs. Workers exit once their current run
    /// finishes; runs still queued stay queued in the store.
    pub fn shutdown(&self) {
        self.shared.queue.lock().unwrap().stopping = true;
        self.shared.wake.notify_all();
        self.workers.lock().unwrap().clear();
    }
}

fn worker_loop(shared: &Shared) {
    loop {
        let run_id = {
            let mut q = shared.queue.lock().unwrap();
            loop {
                if q.stopping {
                    return;
                }
                if let Some(id) = q.pending.pop_front() {
                    break id;
                }
                q = shared.wake.wait(q).unwrap();
            }
        };
        let flag = shared.cancel_flags.lock().unwrap().get(&run_id).cloned();
        let flag = flag.unwrap_or_else(|| Arc::new(AtomicBool::new(false)));
        execute(shared, &run_id, &flag);
        shared.cancel_flags.lock().unwrap().remove(&run_id);
    }
}

enum Failure {
    Cancelled,
    Error(String),
}

fn execute(shared: &Shared, run_id: &str, cancel: &AtomicBool) {
    let store = &shared.store;
    // Cancelled while queued, or otherwise no longer ours to run.
    let Ok(run) = store.update_run(run_id, RunStatus::Running, None) else {
        return;
    };
    let failed = |e: &dyn std::fmt::Display| Failure::Error(e.to_string());
    let outcome = (|| -> Result<(), Failure> {
        let (_, scenario) = store.load_scenario(&run.scenario_id).map_err(|e| failed(&e))?;
        let writer = store.report_writer(run_id).map_err(|e| failed(&e))?;
        let mut cfg = RunConfig::new(&scenario, run.config.clone());
        cfg.parallelism = shared.parallelism;
        let mut progress = |p: f64| {
            let _ = store.set_progress(run_id, p);
        };
        let art = run_to_writer(&cfg, ReportFormat::Jsonl, writer, &mut progress, cancel).map_err(|e| match e {
            EngineError::Cancelled => Failure::Cancelled,
            e => failed(&e),
        })?;
        store
            .attach_artifacts(run_id, &art.result.summary, &art.graph_csv)
            .map_err(|e| failed(&e))?;
        Ok(())
    })();
    let recorded = match outcome {
        Ok(()) => Ok(()),
        Err(Failure::Cancelled) => store.update_run(run_id, RunStatus::Cancelled, None).map(drop),
        Err(Failure::Error(msg)) => {
            tracing::warn!(run = run_id, error = %msg, "run failed");
            store.update_run(run_id, RunStatus::Failed, Some(&msg)).map(drop)
        }
    };
    if let Err(e) = recorded {
        tracing::error!(run = run_id, error = %e, "could not record run outcome");
    }
}
