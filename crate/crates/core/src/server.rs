//! HTTP facade over one active-learning session.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/api/session` | summary, including training progress |
//! | GET | `/api/candidates?count=N` | top-N unlabelled ids by score |
//! | GET | `/api/image/{id}` | PNG with display adjustments |
//! | POST | `/api/labels` | `{"id", "label"}`; 200 applied, 202 queued while training |
//! | POST | `/api/train` | `{"iterations"?}`; 202 started, 409 if already training |
//! | GET | `/api/metrics` | latest report and per-cycle history |
//! | POST | `/api/session/save` | `{"path"?}` |
//! | POST | `/api/session/load` | `{"path"}` |
//!
//! Training runs on a blocking thread against a snapshot of the session;
//! the result replaces the session when the cycle ends, and labels queued in
//! the meantime are applied then.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::catalog::Label;
use crate::error::Error;
use crate::loader::encode_png;
use crate::metrics::ScoreTable;
use crate::render::{parse_channels, render_adjusted, RenderParams};
use crate::session::{ActiveSession, CycleReport};
use crate::stretch::StretchSpec;

/// Shared server state.
pub struct AppState {
    session: RwLock<ActiveSession>,
    /// Default directory for save requests.
    dir: Mutex<PathBuf>,
    training: AtomicBool,
    progress_done: AtomicUsize,
    progress_total: AtomicUsize,
    queued: Mutex<Vec<(String, Label)>>,
    last_error: Mutex<Option<String>>,
}

impl AppState {
    pub fn new(session: ActiveSession, dir: PathBuf) -> Arc<Self> {
        Arc::new(Self {
            session: RwLock::new(session),
            dir: Mutex::new(dir),
            training: AtomicBool::new(false),
            progress_done: AtomicUsize::new(0),
            progress_total: AtomicUsize::new(0),
            queued: Mutex::new(Vec::new()),
            last_error: Mutex::new(None),
        })
    }

    pub fn is_training(&self) -> bool {
        self.training.load(Ordering::SeqCst)
    }

    /// Read access to the session, e.g. for tests and shutdown hooks.
    pub fn with_session<T>(&self, f: impl FnOnce(&ActiveSession) -> T) -> T {
        f(&self.session.read().expect("session lock poisoned"))
    }
}

/// JSON error response.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownId(_) | Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Busy => StatusCode::CONFLICT,
            Error::Usage(_) | Error::Config(_) | Error::Parse { .. } | Error::Json(_) | Error::Split(_) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Parses a JSON body, reporting serde's field-level message as a 400.
fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    let slice: &[u8] = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    serde_json::from_slice(slice).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/session", get(get_session))
        .route("/api/candidates", get(get_candidates))
        .route("/api/image/{id}", get(get_image))
        .route("/api/labels", post(post_label))
        .route("/api/train", post(post_train))
        .route("/api/metrics", get(get_metrics))
        .route("/api/session/save", post(post_save))
        .route("/api/session/load", post(post_load))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

#[derive(Debug, Serialize)]
struct SessionSummary {
    cycle: u32,
    labelled: usize,
    unlabelled: usize,
    test: usize,
    labels_normal: usize,
    labels_anomaly: usize,
    training: bool,
    /// Completed fraction of the running cycle (0 when idle).
    progress: f64,
    queued_labels: usize,
    last_error: Option<String>,
    config: serde_json::Value,
}

async fn get_session(State(app): State<Arc<AppState>>) -> ApiResult<Json<SessionSummary>> {
    let s = app.session.read().expect("session lock poisoned");
    let (normal, anomaly) = s.labels.class_counts();
    let training = app.is_training();
    let total = app.progress_total.load(Ordering::SeqCst);
    let progress = if training && total > 0 {
        app.progress_done.load(Ordering::SeqCst) as f64 / total as f64
    } else {
        0.0
    };
    Ok(Json(SessionSummary {
        cycle: s.cycle,
        labelled: s.catalog.labelled().len(),
        unlabelled: s.catalog.unlabelled().len(),
        test: s.catalog.test().len(),
        labels_normal: normal,
        labels_anomaly: anomaly,
        training,
        progress,
        queued_labels: app.queued.lock().expect("queue lock poisoned").len(),
        last_error: app.last_error.lock().expect("error lock poisoned").clone(),
        config: serde_json::to_value(&s.config).map_err(Error::from)?,
    }))
}

#[derive(Debug, Deserialize)]
struct CandidatesQuery {
    count: Option<usize>,
}

#[derive(Debug, Serialize)]
struct Candidate {
    id: String,
    score: f64,
    rank: usize,
    thumbnail: String,
}

async fn get_candidates(
    State(app): State<Arc<AppState>>,
    Query(q): Query<CandidatesQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    let count = q.count.unwrap_or(20);
    let cached = app.session.read().expect("session lock poisoned").scores.clone();
    let table: ScoreTable = match cached {
        Some(t) => t,
        None => {
            let app = app.clone();
            tokio::task::spawn_blocking(move || app.session.read().expect("session lock poisoned").rank_pool())
                .await
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??
        }
    };
    let candidates: Vec<Candidate> = table
        .rows()
        .iter()
        .take(count)
        .enumerate()
        .map(|(rank, r)| Candidate {
            id: r.id.clone(),
            score: r.score as f32 as f64,
            rank,
            thumbnail: format!("/api/image/{}", r.id),
        })
        .collect();
    Ok(Json(json!({ "count": candidates.len(), "candidates": candidates })))
}

fn parse_f32(q: &HashMap<String, String>, key: &str, default: f32) -> ApiResult<f32> {
    match q.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, format!("{key}: '{v}' is not a number"))),
    }
}

fn render_params(q: &HashMap<String, String>) -> ApiResult<RenderParams> {
    let stretch = match q.get("stretch").map(String::as_str) {
        None | Some("identity") | Some("none") => None,
        Some(s) => Some(s.parse::<StretchSpec>().map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?),
    };
    let channels = match q.get("channels") {
        None => [true; 3],
        Some(c) => parse_channels(c)?,
    };
    let p = RenderParams {
        brightness: parse_f32(q, "brightness", 0.0)?,
        contrast: parse_f32(q, "contrast", 1.0)?,
        unsharp: parse_f32(q, "unsharp", 0.0)?,
        stretch,
        channels,
    };
    p.validate()?;
    Ok(p)
}

async fn get_image(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let params = render_params(&q)?;
    let source = {
        let s = app.session.read().expect("session lock poisoned");
        if !s.catalog.contains(&id) {
            return Err(Error::UnknownId(id).into());
        }
        s.source().clone()
    };
    let image = source.load(&id)?;
    let shown = if params.is_neutral() { image } else { render_adjusted(&image, &params)? };
    let png = encode_png(&shown)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], Body::from(png)).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRequest {
    id: String,
    label: Label,
}

async fn post_label(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: LabelRequest = parse_body(&body)?;
    // Holding the write lock while checking the flag orders this request
    // against the end of a training cycle, which also takes the write lock.
    let mut s = app.session.write().expect("session lock poisoned");
    if !s.catalog.contains(&req.id) {
        return Err(Error::UnknownId(req.id).into());
    }
    if app.is_training() {
        let mut q = app.queued.lock().expect("queue lock poisoned");
        q.push((req.id.clone(), req.label));
        let queued = q.len();
        return Ok((StatusCode::ACCEPTED, Json(json!({ "id": req.id, "status": "queued", "queued": queued }))).into_response());
    }
    let report = s.commit_labels(&[(req.id.clone(), req.label)])?;
    Ok((
        StatusCode::OK,
        Json(json!({
            "id": req.id,
            "status": "applied",
            "superseded": report.superseded > 0,
            "labelled": s.catalog.labelled().len(),
        })),
    )
        .into_response())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRequest {
    iterations: Option<usize>,
}

async fn post_train(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: TrainRequest = parse_body(&body)?;
    if req.iterations == Some(0) {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "iterations must be positive"));
    }
    if app
        .training
        .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
        .is_err()
    {
        return Err(Error::Busy.into());
    }
    let mut snapshot = app.session.read().expect("session lock poisoned").clone();
    if let Some(n) = req.iterations {
        snapshot.config.train.iterations = n;
    }
    let total = snapshot.config.train.iterations;
    let next_cycle = snapshot.cycle + 1;
    app.progress_done.store(0, Ordering::SeqCst);
    app.progress_total.store(total, Ordering::SeqCst);
    *app.last_error.lock().expect("error lock poisoned") = None;

    let worker = app.clone();
    tokio::task::spawn_blocking(move || {
        let progress = |done: usize, _total: usize| worker.progress_done.store(done, Ordering::SeqCst);
        let outcome = snapshot.run_cycle(Some(&progress));
        let mut s = worker.session.write().expect("session lock poisoned");
        match outcome {
            Ok(_) => {
                // Keep the configured iteration count; a per-request override
                // applies to that cycle only.
                snapshot.config.train.iterations = s.config.train.iterations;
                *s = snapshot;
            }
            Err(e) => {
                log::error!("training cycle failed: {e}");
                *worker.last_error.lock().expect("error lock poisoned") = Some(e.to_string());
            }
        }
        let queued = std::mem::take(&mut *worker.queued.lock().expect("queue lock poisoned"));
        if !queued.is_empty() {
            if let Err(e) = s.commit_labels(&queued) {
                log::error!("applying queued labels failed: {e}");
                *worker.last_error.lock().expect("error lock poisoned") = Some(e.to_string());
            }
        }
        worker.training.store(false, Ordering::SeqCst);
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({ "status": "started", "cycle": next_cycle, "iterations": total })),
    )
        .into_response())
}

#[derive(Debug, Serialize)]
struct MetricsResponse {
    latest: Option<CycleReport>,
    history: Vec<CycleReport>,
}

async fn get_metrics(State(app): State<Arc<AppState>>) -> Json<MetricsResponse> {
    let s = app.session.read().expect("session lock poisoned");
    Json(MetricsResponse {
        latest: s.history.last().cloned(),
        history: s.history.clone(),
    })
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PathRequest {
    path: Option<PathBuf>,
}

async fn post_save(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req: PathRequest = parse_body(&body)?;
    let dir = req.path.unwrap_or_else(|| app.dir.lock().expect("dir lock poisoned").clone());
    let target = dir.clone();
    let app2 = app.clone();
    tokio::task::spawn_blocking(move || app2.session.read().expect("session lock poisoned").save(&target))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(json!({ "status": "saved", "path": dir })))
}

async fn post_load(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req: PathRequest = parse_body(&body)?;
    let dir = req
        .path
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "invalid request body: missing field `path`"))?;
    if app.is_training() {
        return Err(Error::Busy.into());
    }
    let target = dir.clone();
    let loaded = tokio::task::spawn_blocking(move || ActiveSession::load(&target))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let cycle = loaded.cycle;
    *app.session.write().expect("session lock poisoned") = loaded;
    *app.dir.lock().expect("dir lock poisoned") = dir.clone();
    Ok(Json(json!({ "status": "loaded", "path": dir, "cycle": cycle })))
}
