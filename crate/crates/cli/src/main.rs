//! `cvanetsim` command-line front end.
//!
//! Exit codes: 0 success, 1 domain error (bad input, invalid configuration),
//! 2 I/O error.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;

use clap::{Parser, Subcommand};

use cvanetsim_core::clustering::{
    list_algorithms, Algorithm, ClusterConfig, DEFAULT_T_CONT, DEFAULT_T_IDLE, DEFAULT_W_D, DEFAULT_W_V,
};
use cvanetsim_core::engine::{run_to_writer, EngineError, RunConfig};
use cvanetsim_core::features::Parallelism;
use cvanetsim_core::ingest::{validate_scenario, Scenario, TraceFormat};
use cvanetsim_core::postproc::ReportFormat;
use cvanetsim_server::{App, ServerConfig, DEFAULT_WORKERS};

#[derive(Parser)]
#[command(name = "cvanetsim", version, about = "Trace-driven VANET clustering simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file and print its validation report.
    Validate { file: PathBuf },
    /// Run a clustering simulation and write summary, graph data and report.
    Run(RunArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Scenario file: SUMO FCD XML or `t,id,x,y,speed,angle` CSV.
    #[arg(long)]
    scenario: PathBuf,
    /// lowest_id, highest_degree or mobility.
    #[arg(long)]
    algorithm: String,
    /// Transmission range in meters.
    #[arg(long)]
    range: f64,
    #[arg(long, default_value_t = DEFAULT_W_V)]
    wv: f64,
    #[arg(long, default_value_t = DEFAULT_W_D)]
    wd: f64,
    #[arg(long = "t-idle", default_value_t = DEFAULT_T_IDLE)]
    t_idle: u32,
    #[arg(long = "t-cont", default_value_t = DEFAULT_T_CONT)]
    t_cont: u32,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Report encoding.
    #[arg(long, default_value = "jsonl")]
    format: ReportFormat,
    /// Extract per-vehicle features on a thread pool. Output is unchanged.
    #[arg(long)]
    parallel: bool,
}

#[derive(clap::Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    #[arg(long, env = "CVANETSIM_DATA_DIR", default_value = "cvanetsim-data")]
    data_dir: PathBuf,
    /// Maximum number of runs executing at once.
    #[arg(long, default_value_t = DEFAULT_WORKERS)]
    workers: usize,
    /// Directory of web UI assets to serve at `/`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[arg(long)]
    parallel: bool,
}

enum Failure {
    Domain(String),
    Io(String),
}

impl Failure {
    fn exit(self) -> ExitCode {
        match self {
            Failure::Domain(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(1)
            }
            Failure::Io(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(2)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Validate { file } => validate(&file),
        Command::Run(args) => run(&args),
        Command::Serve(args) => serve(args),
    };
    match result {
        Ok(code) => code,
        Err(f) => f.exit(),
    }
}

fn read_scenario(path: &Path) -> Result<Scenario, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::Io(format!("reading {}: {e}", path.display())))?;
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("xml") => TraceFormat::Fcd,
        Some(ext) if ext.eq_ignore_ascii_case("csv") => TraceFormat::Csv,
        _ => TraceFormat::sniff(&bytes),
    };
    let mut scenario = format
        .parse(&bytes)
        .map_err(|e| Failure::Domain(format!("{}: {e}", path.display())))?;
    scenario.name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(scenario)
}

fn validate(path: &Path) -> Result<ExitCode, Failure> {
    let scenario = read_scenario(path)?;
    let report = validate_scenario(&scenario);
    println!("timesteps: {}", report.n_timesteps);
    println!("vehicles:  {}", report.n_vehicles);
    for w in &report.warnings {
        println!("warning: {w}");
    }
    for e in &report.errors {
        println!("error: {e}");
    }
    Ok(if report.is_runnable() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cluster_config(args: &RunArgs) -> Result<ClusterConfig, Failure> {
    let algorithm: Algorithm = args.algorithm.parse().map_err(|_| {
        let ids: Vec<&str> = list_algorithms().iter().map(|a| a.id).collect();
        Failure::Domain(format!(
            "unknown algorithm `{}`; valid algorithms: {}",
            args.algorithm,
            ids.join(", ")
        ))
    })?;
    let cfg = ClusterConfig {
        range: args.range,
        algorithm,
        w_v: args.wv,
        w_d: args.wd,
        t_idle: args.t_idle,
        t_cont: args.t_cont,
    };
    cfg.validate().map_err(|e| Failure::Domain(e.to_string()))?;
    Ok(cfg)
}

fn run(args: &RunArgs) -> Result<ExitCode, Failure> {
    let cluster = cluster_config(args)?;
    let scenario = read_scenario(&args.scenario)?;
    let validation = validate_scenario(&scenario);
    if !validation.is_runnable() {
        return Err(Failure::Domain(format!(
            "scenario is not runnable: {}",
            validation.errors.join("; ")
        )));
    }
    let io_err = |what: &str, p: &Path, e: io::Error| Failure::Io(format!("{what} {}: {e}", p.display()));
    fs::create_dir_all(&args.out).map_err(|e| io_err("creating", &args.out, e))?;
    let report_path = args.out.join(format!("report.{}", args.format.extension()));
    let report = File::create(&report_path).map_err(|e| io_err("creating", &report_path, e))?;

    let mut cfg = RunConfig::new(&scenario, cluster);
    if args.parallel {
        cfg.parallelism = Parallelism::Rayon;
    }
    let art = run_to_writer(&cfg, args.format, report, &mut |_| {}, &AtomicBool::new(false)).map_err(|e| match e {
        EngineError::Sink(e) => io_err("writing", &report_path, e),
        e => Failure::Domain(e.to_string()),
    })?;

    for (name, bytes) in [("summary.json", &art.summary_json), ("graph.csv", &art.graph_csv)] {
        let path = args.out.join(name);
        fs::write(&path, bytes).map_err(|e| io_err("writing", &path, e))?;
    }
    io::stdout()
        .write_all(&art.summary_json)
        .map_err(|e| Failure::Io(e.to_string()))?;
    Ok(ExitCode::SUCCESS)
}

fn serve(args: ServeArgs) -> Result<ExitCode, Failure> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(io::stderr)
        .init();

    let listener = std::net::TcpListener::bind(&args.addr)
        .map_err(|e| Failure::Domain(format!("cannot bind {}: {e}", args.addr)))?;
    listener.set_nonblocking(true).map_err(|e| Failure::Io(e.to_string()))?;
    let local = listener.local_addr().map_err(|e| Failure::Io(e.to_string()))?;

    let mut cfg = ServerConfig::new(&args.data_dir);
    cfg.workers = args.workers;
    cfg.static_dir = args.static_dir;
    if args.parallel {
        cfg.parallelism = Parallelism::Rayon;
    }
    let app = App::open(&cfg).map_err(|e| Failure::Io(format!("opening {}: {e}", args.data_dir.display())))?;

    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Io(e.to_string()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::from_std(listener).map_err(|e| Failure::Io(e.to_string()))?;
        println!("listening on http://{local}");
        let _ = io::stdout().flush();
        cvanetsim_server::serve(listener, app, &cfg, shutdown_signal())
            .await
            .map_err(|e| Failure::Io(e.to_string()))
    })?;
    Ok(ExitCode::SUCCESS)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let terminate = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let terminate = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = terminate => {}
    }
    tracing::info!("shutting down");
}
