//! HTTP job service: dataset upload, queued analysis runs with progress,
//! and result and scene retrieval.

pub mod store;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::mpsc;

use crate::analysis::{run_analysis, AnalysisConfig, AnalysisProgress, AnalysisResult};
use crate::data::{exclude_studies, parse_dataset, validate_dataset, DataError, Dataset};
use crate::outputs::{
    forest_data, prevalence_tree, render, sroc_scene_groups, ForestOrder, OutputError, OutputFormat, Renderable,
    SceneOptions, TreeOrdering,
};
pub use store::{Job, JobProgress, JobState, Store};

pub const DEFAULT_MAX_UPLOAD: usize = 5 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub store_dir: PathBuf,
    pub max_upload: usize,
    /// Concurrent jobs; each job runs its chains in parallel.
    pub workers: usize,
}

impl ServiceConfig {
    pub fn new(store_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            store_dir: store_dir.into(),
            max_upload: DEFAULT_MAX_UPLOAD,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

struct Entry {
    job: Job,
    cancel: Arc<AtomicBool>,
}

pub struct AppState {
    store: Store,
    jobs: Mutex<HashMap<String, Entry>>,
    queue: mpsc::UnboundedSender<String>,
    seq: AtomicU64,
    max_upload: usize,
}

/// `{code, message, details}` error body.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    details: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into(), details: serde_json::Value::Null }
    }

    fn details(mut self, details: serde_json::Value) -> Self {
        self.details = details;
        self
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} {id:?}"))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"code": self.code, "message": self.message, "details": self.details}))).into_response()
    }
}

fn body_error(r: BytesRejection) -> ApiError {
    let status = r.status();
    let code = if status == StatusCode::PAYLOAD_TOO_LARGE { "payload_too_large" } else { "bad_request" };
    ApiError::new(status, code, r.body_text())
}

fn data_error_details(e: &DataError) -> serde_json::Value {
    match e {
        DataError::MalformedCsv { row, .. } => json!({"row": row}),
        DataError::BadCount { row, column, value }
        | DataError::BadRating { row, column, value }
        | DataError::BadCovariate { row, column, value, .. } => json!({"row": row, "column": column, "value": value}),
        DataError::DuplicateStudyId { row, id } => json!({"row": row, "id": id}),
        other => json!({"error": format!("{other:?}")}),
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl AppState {
    fn snapshot(&self, id: &str) -> Option<Job> {
        self.jobs.lock().expect("job table").get(id).map(|e| e.job.clone())
    }

    /// Applies `f` to the job and persists it; false when the job is gone.
    fn update(&self, id: &str, f: impl FnOnce(&mut Job)) -> bool {
        let mut jobs = self.jobs.lock().expect("job table");
        let Some(entry) = jobs.get_mut(id) else { return false };
        f(&mut entry.job);
        let _ = self.store.put_job(&entry.job);
        true
    }

    fn load_dataset(&self, id: &str) -> Result<Dataset, ApiError> {
        let text = self.store.dataset(id).ok_or_else(|| ApiError::not_found("dataset", id))?;
        parse_dataset(&text).map_err(ApiError::internal)
    }
}

fn run_job(state: &AppState, id: &str) {
    let Some((job, cancel)) = ({
        let jobs = state.jobs.lock().expect("job table");
        jobs.get(id).map(|e| (e.job.clone(), e.cancel.clone()))
    }) else {
        return;
    };
    if job.state != JobState::Queued || cancel.load(Ordering::SeqCst) {
        return;
    }
    state.update(id, |j| j.state = JobState::Running);
    let outcome = state.load_dataset(&job.dataset_id).map_err(|e| e.message).and_then(|d| {
        let observer = |p: AnalysisProgress| {
            let done = p.stage as f64 + p.iteration as f64 / p.total.max(1) as f64;
            let fraction = (done / p.stages.max(1) as f64).clamp(0.0, 1.0);
            let mut jobs = state.jobs.lock().expect("job table");
            if let Some(e) = jobs.get_mut(id) {
                let prev = e.job.progress.map_or(0.0, |q| q.fraction);
                e.job.progress = Some(JobProgress {
                    stage: p.stage,
                    stages: p.stages,
                    chain: p.chain,
                    iteration: p.iteration,
                    total: p.total,
                    fraction: fraction.max(prev),
                });
            }
            !cancel.load(Ordering::SeqCst)
        };
        run_analysis(&d, &job.config, &observer).map_err(|e| e.to_string())
    });
    if cancel.load(Ordering::SeqCst) {
        return;
    }
    match outcome {
        Ok(result) => {
            if let Err(e) = state.store.put_result(id, &result.to_json()) {
                state.update(id, |j| {
                    j.state = JobState::Failed;
                    j.error = Some(format!("could not store result: {e}"));
                    j.finished = Some(now());
                });
                return;
            }
            state.update(id, |j| {
                j.state = JobState::Done;
                j.has_result = true;
                j.finished = Some(now());
                if let Some(p) = &mut j.progress {
                    p.fraction = 1.0;
                }
            });
        }
        Err(msg) => {
            state.update(id, |j| {
                j.state = JobState::Failed;
                j.error = Some(msg);
                j.finished = Some(now());
            });
        }
    }
}

/// Opens the store, requeues unfinished jobs and starts the workers. Must be
/// called inside a Tokio runtime.
pub fn app(cfg: &ServiceConfig) -> std::io::Result<(Router, Arc<AppState>)> {
    let store = Store::open(&cfg.store_dir)?;
    let (tx, rx) = mpsc::unbounded_channel::<String>();
    let mut table = HashMap::new();
    let mut pending = Vec::new();
    let mut max_seq = 0;
    for mut job in store.jobs()? {
        max_seq = max_seq.max(job.seq);
        if matches!(job.state, JobState::Queued | JobState::Running) {
            job.state = JobState::Queued;
            job.progress = None;
            store.put_job(&job)?;
            pending.push(job.id.clone());
        }
        table.insert(job.id.clone(), Entry { job, cancel: Arc::new(AtomicBool::new(false)) });
    }
    let state = Arc::new(AppState {
        store,
        jobs: Mutex::new(table),
        queue: tx,
        seq: AtomicU64::new(max_seq + 1),
        max_upload: cfg.max_upload,
    });
    for id in pending {
        let _ = state.queue.send(id);
    }
    let rx = Arc::new(tokio::sync::Mutex::new(rx));
    for _ in 0..cfg.workers.max(1) {
        let rx = rx.clone();
        let st = state.clone();
        tokio::spawn(async move {
            loop {
                let next = rx.lock().await.recv().await;
                let Some(id) = next else { break };
                let st = st.clone();
                let _ = tokio::task::spawn_blocking(move || run_job(&st, &id)).await;
            }
        });
    }
    Ok((router(state.clone()), state))
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.max_upload;
    Router::new()
        .route("/api/health", get(health))
        .route("/api/datasets", post(submit_dataset).layer(DefaultBodyLimit::max(limit)))
        .route("/api/jobs", post(submit_job))
        .route("/api/jobs/{id}", get(job_status).delete(delete_job))
        .route("/api/jobs/{id}/result", get(job_result))
        .route("/api/jobs/{id}/scene", get(job_scene))
        .with_state(state)
}

pub async fn serve(cfg: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let (router, _) = app(&cfg)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "version": crate::fit::VERSION}))
}

async fn submit_dataset(
    State(st): State<Arc<AppState>>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let body = body.map_err(body_error)?;
    let text = std::str::from_utf8(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_encoding", format!("body is not UTF-8: {e}")))?;
    let d = parse_dataset(text).map_err(|e| {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_dataset", e.to_string()).details(data_error_details(&e))
    })?;
    let id = d.content_hash();
    st.store.put_dataset(&id, text).map_err(ApiError::internal)?;
    Ok(Json(json!({"dataset_id": id, "report": validate_dataset(&d)})))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JobRequest {
    dataset_id: String,
    config: AnalysisConfig,
}

async fn submit_job(
    State(st): State<Arc<AppState>>,
    body: Result<Bytes, BytesRejection>,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let body = body.map_err(body_error)?;
    let value: serde_json::Value = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_json", e.to_string()))?;
    let req: JobRequest = serde_json::from_value(value)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", e.to_string()))?;
    let d = st.load_dataset(&req.dataset_id)?;
    req.config
        .check(&d)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", e.to_string()))?;
    let job = Job {
        id: uuid::Uuid::new_v4().simple().to_string(),
        seq: st.seq.fetch_add(1, Ordering::SeqCst),
        dataset_id: req.dataset_id,
        state: JobState::Queued,
        progress: None,
        config: req.config,
        created: now(),
        finished: None,
        error: None,
        has_result: false,
    };
    st.store.put_job(&job).map_err(ApiError::internal)?;
    let id = job.id.clone();
    st.jobs.lock().expect("job table").insert(id.clone(), Entry { job, cancel: Arc::new(AtomicBool::new(false)) });
    st.queue.send(id.clone()).map_err(ApiError::internal)?;
    Ok((StatusCode::ACCEPTED, Json(json!({"job_id": id, "state": JobState::Queued}))))
}

async fn job_status(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Job>, ApiError> {
    st.snapshot(&id).map(Json).ok_or_else(|| ApiError::not_found("job", &id))
}

async fn delete_job(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    let entry = st.jobs.lock().expect("job table").remove(&id).ok_or_else(|| ApiError::not_found("job", &id))?;
    entry.cancel.store(true, Ordering::SeqCst);
    st.store.remove_job(&id).map_err(ApiError::internal)?;
    Ok(StatusCode::NO_CONTENT)
}

fn finished_result(st: &AppState, id: &str) -> Result<(Job, String), ApiError> {
    let job = st.snapshot(id).ok_or_else(|| ApiError::not_found("job", id))?;
    if job.state != JobState::Done {
        let msg = match &job.error {
            Some(e) => format!("job is {:?}: {e}", job.state),
            None => format!("job is {:?}", job.state),
        };
        return Err(ApiError::new(StatusCode::CONFLICT, "not_done", msg.to_lowercase()));
    }
    let text = st.store.result(id).ok_or_else(|| ApiError::internal("result file missing"))?;
    Ok((job, text))
}

async fn job_result(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let (_, text) = finished_result(&st, &id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], text).into_response())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct SceneQuery {
    kind: Option<String>,
    format: Option<String>,
    show_curve: Option<bool>,
    show_prediction: Option<bool>,
    weight_sizing: Option<bool>,
    quadas_overlay: Option<bool>,
    level: Option<f64>,
    order: Option<ForestOrder>,
    ordering: Option<TreeOrdering>,
    n: Option<f64>,
    prev: Option<f64>,
    group: Option<String>,
}

fn unprocessable(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "scene_error", e.to_string())
}

async fn job_scene(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<SceneQuery>,
) -> Result<Response, ApiError> {
    let (job, text) = finished_result(&st, &id)?;
    let result: AnalysisResult = serde_json::from_str(&text).map_err(ApiError::internal)?;
    let format: OutputFormat = q
        .format
        .as_deref()
        .unwrap_or("json")
        .parse()
        .map_err(|e: OutputError| ApiError::new(StatusCode::BAD_REQUEST, "bad_format", e.to_string()))?;
    let d = st.load_dataset(&job.dataset_id)?;
    let kept = exclude_studies(&d, &job.config.exclusions()).map_err(unprocessable)?;
    let out = match q.kind.as_deref().unwrap_or("sroc") {
        "sroc" => {
            let dflt = SceneOptions::default();
            let opts = SceneOptions {
                show_curve: q.show_curve.unwrap_or(dflt.show_curve),
                show_prediction: q.show_prediction.unwrap_or(dflt.show_prediction),
                weight_sizing: q.weight_sizing.unwrap_or(dflt.weight_sizing),
                quadas_overlay: q.quadas_overlay.unwrap_or(dflt.quadas_overlay),
                level: q.level.unwrap_or(dflt.level),
            };
            let scene = sroc_scene_groups(&result.fits(), &d, &opts).map_err(unprocessable)?;
            render(Renderable::Scene(&scene), format)
        }
        "forest" => {
            let f = forest_data(&kept, q.order.unwrap_or_default()).map_err(unprocessable)?;
            render(Renderable::Forest(&f), format)
        }
        "tree" => {
            let (se, sp) = result.pooled_accuracy(q.group.as_deref()).ok_or_else(|| {
                unprocessable("no pooled accuracy for this result; name a subgroup or categorical level as group")
            })?;
            let prev = q.prev.unwrap_or_else(|| observed_prevalence(&kept));
            let t = prevalence_tree(q.n.unwrap_or(1000.0), prev, se, sp, q.ordering.unwrap_or_default())
                .map_err(unprocessable)?;
            render(Renderable::Tree(&t), format)
        }
        other => {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_kind", format!("unknown scene kind {other:?}")))
        }
    }
    .map_err(unprocessable)?;
    let ctype = if format == OutputFormat::Svg { "image/svg+xml" } else { "application/json" };
    Ok(([(header::CONTENT_TYPE, ctype)], out).into_response())
}

/// Pooled proportion of reference-positive participants.
pub fn observed_prevalence(d: &Dataset) -> f64 {
    let (pos, all) = d.studies().iter().fold((0u64, 0u64), |(p, a), s| (p + s.diseased(), a + s.total()));
    if all == 0 {
        0.0
    } else {
        pos as f64 / all as f64
    }
}
