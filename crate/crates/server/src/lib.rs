//! HTTP/1.1 service for uploading scenarios, launching clustering runs and
//! retrieving their results. All endpoints live under `/api/v1`.

mod executor;

use std::future::Future;
use std::io;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

use cvanetsim_core::clustering::{list_algorithms, Algorithm, ClusterConfig};
use cvanetsim_core::features::Parallelism;
use cvanetsim_core::ingest::TraceFormat;
use cvanetsim_core::storage::{ScenarioMeta, Store, StoreError};

pub use executor::{CancelError, Executor};

pub const DEFAULT_BODY_LIMIT: usize = 256 * 1024 * 1024;
pub const DEFAULT_WORKERS: usize = 2;

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub data_dir: PathBuf,
    pub workers: usize,
    pub body_limit: usize,
    pub static_dir: Option<PathBuf>,
    pub parallelism: Parallelism,
}

impl ServerConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServerConfig {
            data_dir: data_dir.into(),
            workers: DEFAULT_WORKERS,
            body_limit: DEFAULT_BODY_LIMIT,
            static_dir: None,
            parallelism: Parallelism::Sequential,
        }
    }
}

pub struct App {
    pub store: Arc<Store>,
    pub executor: Executor,
}

impl App {
    /// Opens the store (recovering interrupted runs) and starts the workers.
    pub fn open(cfg: &ServerConfig) -> Result<Arc<App>, StoreError> {
        let store = Arc::new(Store::open(&cfg.data_dir)?);
        let executor = Executor::start(Arc::clone(&store), cfg.workers, cfg.parallelism);
        Ok(Arc::new(App { store, executor }))
    }
}

pub fn router(app: Arc<App>, cfg: &ServerConfig) -> Router {
    let api = Router::new()
        .route("/api/v1/scenarios", get(list_scenarios).post(upload_scenario))
        .route("/api/v1/scenarios/{id}", get(get_scenario))
        .route("/api/v1/algorithms", get(algorithms))
        .route("/api/v1/runs", get(list_runs).post(create_run))
        .route("/api/v1/runs/{id}", get(get_run).delete(cancel_run))
        .route("/api/v1/runs/{id}/summary", get(run_summary))
        .route("/api/v1/runs/{id}/graph.csv", get(run_graph))
        .route("/api/v1/runs/{id}/report.jsonl", get(run_report))
        .layer(DefaultBodyLimit::max(cfg.body_limit))
        .with_state(app);
    match &cfg.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    app: Arc<App>,
    cfg: &ServerConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    let router = router(Arc::clone(&app), cfg);
    axum::serve(listener, router).with_graceful_shutdown(shutdown).await?;
    app.executor.shutdown();
    Ok(())
}

struct ApiError {
    status: StatusCode,
    errors: Vec<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            errors: vec![message.into()],
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::NotFound { .. } => StatusCode::NOT_FOUND,
            StoreError::NotDone { .. } | StoreError::Usage(_) => StatusCode::CONFLICT,
            StoreError::Parse(_) | StoreError::Config(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StoreError::Invalid(report) => {
                return ApiError {
                    status: StatusCode::UNPROCESSABLE_ENTITY,
                    errors: report.errors.clone(),
                }
            }
            StoreError::Corrupt { .. } | StoreError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<tokio::task::JoinError> for ApiError {
    fn from(e: tokio::task::JoinError) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "error": self.errors.first().cloned().unwrap_or_default(),
            "errors": self.errors,
        });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs blocking store work off the async executor.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> Result<T, StoreError> + Send + 'static,
    T: Send + 'static,
{
    Ok(tokio::task::spawn_blocking(f).await??)
}

fn scenario_json(meta: &ScenarioMeta) -> serde_json::Value {
    json!({
        "id": meta.id,
        "name": meta.name,
        "created_at": meta.created_at,
        "format": meta.format,
        "n_timesteps": meta.n_timesteps,
        "n_vehicles": meta.n_vehicles,
        "warnings": meta.validation.warnings,
        "errors": meta.validation.errors,
    })
}

#[derive(Deserialize)]
struct UploadQuery {
    name: Option<String>,
}

fn trace_format(headers: &HeaderMap) -> Option<TraceFormat> {
    let ct = headers.get(header::CONTENT_TYPE)?.to_str().ok()?;
    let mime = ct.split(';').next()?.trim().to_ascii_lowercase();
    match mime.as_str() {
        "text/csv" => Some(TraceFormat::Csv),
        "application/xml" | "text/xml" => Some(TraceFormat::Fcd),
        _ => None,
    }
}

async fn upload_scenario(
    State(app): State<Arc<App>>,
    Query(q): Query<UploadQuery>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let format = trace_format(&headers).ok_or_else(|| {
        ApiError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "content type must be text/csv, application/xml or text/xml",
        )
    })?;
    let name = q.name.unwrap_or_else(|| "scenario".to_string());
    let store = Arc::clone(&app.store);
    let meta = blocking(move || store.put_scenario(&name, format, &body)).await?;
    Ok((StatusCode::CREATED, Json(scenario_json(&meta))))
}

async fn list_scenarios(State(app): State<Arc<App>>) -> ApiResult<impl IntoResponse> {
    let store = Arc::clone(&app.store);
    let metas = blocking(move || store.list_scenarios()).await?;
    Ok(Json(metas.iter().map(scenario_json).collect::<Vec<_>>()))
}

async fn get_scenario(State(app): State<Arc<App>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let store = Arc::clone(&app.store);
    let rec = blocking(move || store.get_scenario(&id)).await?;
    Ok(Json(scenario_json(&rec.meta)))
}

async fn algorithms() -> impl IntoResponse {
    Json(list_algorithms())
}

#[derive(Deserialize, Default)]
struct RunParams {
    w_v: Option<f64>,
    w_d: Option<f64>,
    t_idle: Option<u32>,
    t_cont: Option<u32>,
}

#[derive(Deserialize)]
struct RunRequest {
    scenario_id: String,
    algorithm: String,
    range_m: f64,
    #[serde(default)]
    params: RunParams,
}

impl RunRequest {
    fn cluster_config(&self) -> ApiResult<ClusterConfig> {
        let unprocessable = |e: &dyn std::fmt::Display| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string());
        let algorithm: Algorithm = self.algorithm.parse().map_err(|e| unprocessable(&e))?;
        let mut cfg = ClusterConfig::new(algorithm, self.range_m);
        let p = &self.params;
        cfg.w_v = p.w_v.unwrap_or(cfg.w_v);
        cfg.w_d = p.w_d.unwrap_or(cfg.w_d);
        cfg.t_idle = p.t_idle.unwrap_or(cfg.t_idle);
        cfg.t_cont = p.t_cont.unwrap_or(cfg.t_cont);
        cfg.validate().map_err(|e| unprocessable(&e))?;
        Ok(cfg)
    }
}

async fn create_run(State(app): State<Arc<App>>, Json(req): Json<RunRequest>) -> ApiResult<impl IntoResponse> {
    let cfg = req.cluster_config()?;
    let store = Arc::clone(&app.store);
    let scenario_id = req.scenario_id.clone();
    let run = blocking(move || store.create_run(&scenario_id, cfg)).await?;
    app.executor.submit(&run.id);
    Ok((StatusCode::ACCEPTED, Json(run)))
}

async fn list_runs(State(app): State<Arc<App>>) -> impl IntoResponse {
    Json(app.store.list_runs())
}

async fn get_run(State(app): State<Arc<App>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(app.store.get_run(&id)?))
}

async fn cancel_run(State(app): State<Arc<App>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let app2 = Arc::clone(&app);
    let res = tokio::task::spawn_blocking(move || app2.executor.cancel(&id)).await?;
    match res {
        Ok(run) => Ok((StatusCode::ACCEPTED, Json(run))),
        Err(CancelError::AlreadyFinished(status)) => {
            Err(ApiError::new(StatusCode::CONFLICT, format!("run already {status}")))
        }
        Err(CancelError::Store(e)) => Err(e.into()),
    }
}

fn bytes_response(content_type: &'static str, body: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, content_type)], body).into_response()
}

async fn run_summary(State(app): State<Arc<App>>, Path(id): Path<String>) -> ApiResult<Response> {
    let store = Arc::clone(&app.store);
    let body = blocking(move || store.read_summary_bytes(&id)).await?;
    Ok(bytes_response("application/json", body))
}

async fn run_graph(State(app): State<Arc<App>>, Path(id): Path<String>) -> ApiResult<Response> {
    let store = Arc::clone(&app.store);
    let body = blocking(move || store.read_graph(&id)).await?;
    Ok(bytes_response("text/csv", body))
}

#[derive(Deserialize)]
struct Page {
    #[serde(default)]
    offset: usize,
    limit: Option<usize>,
}

async fn run_report(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
    Query(page): Query<Page>,
) -> ApiResult<Response> {
    let store = Arc::clone(&app.store);
    let body = blocking(move || store.read_report(&id, page.offset, page.limit)).await?;
    Ok(bytes_response("application/x-ndjson", body))
}
