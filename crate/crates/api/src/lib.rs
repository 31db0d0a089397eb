//! JSON API over a project root.
//!
//! All state is read from the study directories on every request, so the
//! server can run next to (or long after) the process that executes a study.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/api/studies` | one summary per study |
//! | GET | `/api/studies/{name}` | configuration and status counts |
//! | GET | `/api/studies/{name}/cases` | per-case status |
//! | GET | `/api/studies/{name}/secondary` | merged secondary table, query parameters filter rows |
//! | GET | `/api/events?study=&since=&timeout=` | long poll on the event log |
//! | POST | `/api/studies/{name}/cases/{id}/cancel` | 202, 404 or 409 |

use std::collections::HashMap;
use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use labrun_core::compare::Verdict;
use labrun_core::datastore::{self, Column, ColumnRole, DataError};
use labrun_core::layout::{self, StudyDir, StudyError, COMPARISON_FILE, SECONDARY_FILE};
use labrun_core::paramspace::{CaseStatus, Mode, Params};
use labrun_core::runner::{self, CancelOutcome, EventRecord, RunnerError, StatusCounts};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

pub const API_SCHEMA: u32 = 1;
pub const DEFAULT_POLL_TIMEOUT: Duration = Duration::from_secs(25);
/// Upper bound for a client-requested `timeout`.
pub const MAX_POLL_TIMEOUT: Duration = Duration::from_secs(120);
const POLL_STEP: Duration = Duration::from_millis(50);

#[derive(Debug, Clone)]
pub struct ApiConfig {
    pub root: PathBuf,
    pub addr: SocketAddr,
    /// When set, every `/api` request needs `Authorization: Bearer <token>`.
    pub token: Option<String>,
    pub poll_timeout: Duration,
    /// Dashboard build to serve at `/`; a small built-in page otherwise.
    pub static_dir: Option<PathBuf>,
}

impl ApiConfig {
    pub fn new(root: impl Into<PathBuf>, addr: SocketAddr) -> ApiConfig {
        ApiConfig {
            root: root.into(),
            addr,
            token: None,
            poll_timeout: DEFAULT_POLL_TIMEOUT,
            static_dir: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("project root {0} is not a directory")]
    NoRoot(PathBuf),
    #[error("static directory {0} is not a directory")]
    NoStaticDir(PathBuf),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: io::Error,
    },
}

struct AppState {
    root: PathBuf,
    token: Option<String>,
    poll_timeout: Duration,
}

/// The full application, without a listener.
pub fn router(config: &ApiConfig) -> Router {
    let state = Arc::new(AppState {
        root: config.root.clone(),
        token: config.token.clone(),
        poll_timeout: config.poll_timeout,
    });
    let api = Router::new()
        .route("/studies", get(list_studies))
        .route("/studies/{name}", get(study_detail))
        .route("/studies/{name}/cases", get(study_cases))
        .route("/studies/{name}/secondary", get(study_secondary))
        .route("/studies/{name}/cases/{id}/cancel", post(cancel_case))
        .route("/events", get(events))
        .fallback(|| async { ApiFailure::new(StatusCode::NOT_FOUND, "no such endpoint") })
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state);
    let app = Router::new().nest("/api", api);
    match &config.static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.route("/", get(|| async { Html(BUILTIN_PAGE) })),
    }
}

/// A bound, not yet running server.
pub struct Server {
    listener: TcpListener,
    app: Router,
}

impl Server {
    pub fn local_addr(&self) -> SocketAddr {
        self.listener
            .local_addr()
            .expect("bound listener has an address")
    }

    pub async fn run(self) -> io::Result<()> {
        axum::serve(self.listener, self.app).await
    }

    pub async fn run_until(self, shutdown: impl Future<Output = ()> + Send + 'static) -> io::Result<()> {
        axum::serve(self.listener, self.app)
            .with_graceful_shutdown(shutdown)
            .await
    }
}

/// Validates the configuration and binds the listener. Port 0 picks a free
/// port; see [`Server::local_addr`].
pub async fn bind(config: &ApiConfig) -> Result<Server, ApiError> {
    if !config.root.is_dir() {
        return Err(ApiError::NoRoot(config.root.clone()));
    }
    if let Some(dir) = &config.static_dir {
        if !dir.is_dir() {
            return Err(ApiError::NoStaticDir(dir.clone()));
        }
    }
    let listener = TcpListener::bind(config.addr)
        .await
        .map_err(|source| ApiError::Bind {
            addr: config.addr,
            source,
        })?;
    Ok(Server {
        listener,
        app: router(config),
    })
}

async fn require_token(State(state): State<Arc<AppState>>, request: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let presented = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            let mut response = ApiFailure::new(StatusCode::UNAUTHORIZED, "missing or wrong token").into_response();
            response
                .headers_mut()
                .insert(header::WWW_AUTHENTICATE, header::HeaderValue::from_static("Bearer"));
            return response;
        }
    }
    next.run(request).await
}

#[derive(Debug)]
struct ApiFailure {
    status: StatusCode,
    message: String,
}

impl ApiFailure {
    fn new(status: StatusCode, message: impl Into<String>) -> ApiFailure {
        ApiFailure {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiFailure {
    fn into_response(self) -> Response {
        let body = Json(serde_json::json!({ "error": self.message }));
        (self.status, body).into_response()
    }
}

impl From<StudyError> for ApiFailure {
    fn from(e: StudyError) -> Self {
        let status = match e {
            StudyError::UnknownStudy(_) => StatusCode::NOT_FOUND,
            StudyError::Locked { .. } => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiFailure::new(status, e.to_string())
    }
}

impl From<RunnerError> for ApiFailure {
    fn from(e: RunnerError) -> Self {
        match e {
            RunnerError::Study(e) => e.into(),
            RunnerError::UnknownCase { .. } => ApiFailure::new(StatusCode::NOT_FOUND, e.to_string()),
            RunnerError::AlreadyFinished { .. } => ApiFailure::new(StatusCode::CONFLICT, e.to_string()),
            e => ApiFailure::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        }
    }
}

impl From<DataError> for ApiFailure {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Study(e) => e.into(),
            DataError::UnknownColumn(_) => ApiFailure::new(StatusCode::BAD_REQUEST, e.to_string()),
            e => ApiFailure::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiFailure>;

/// Runs blocking file access off the async workers.
async fn blocking<T, F>(f: F) -> Result<T, ApiFailure>
where
    F: FnOnce() -> Result<T, ApiFailure> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiFailure::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Debug, Serialize)]
struct StudySummary {
    name: String,
    total: usize,
    counts: StatusCounts,
    active: bool,
    latest_seq: u64,
    has_secondary: bool,
    comparison: Option<Verdict>,
}

fn comparison_verdict(study: &StudyDir) -> Option<Verdict> {
    #[derive(Deserialize)]
    struct Stored {
        verdict: Verdict,
    }
    let text = std::fs::read_to_string(study.file(COMPARISON_FILE)).ok()?;
    serde_json::from_str::<Stored>(&text).ok().map(|s| s.verdict)
}

fn summarize(study: &StudyDir) -> Result<StudySummary, ApiFailure> {
    let status = runner::study_status(study)?;
    Ok(StudySummary {
        name: study.name().to_string(),
        total: status.total,
        counts: status.counts,
        active: status.active,
        latest_seq: status.latest_seq,
        has_secondary: study.file(SECONDARY_FILE).is_file(),
        comparison: comparison_verdict(study),
    })
}

async fn list_studies(State(state): State<Arc<AppState>>) -> ApiResult<Vec<StudySummary>> {
    let root = state.root.clone();
    blocking(move || {
        layout::list_studies(&root)?
            .iter()
            .map(|name| summarize(&StudyDir::open(&root, name)?))
            .collect::<Result<Vec<_>, _>>()
            .map(Json)
    })
    .await
}

#[derive(Debug, Serialize)]
struct StudyDetail {
    schema: u32,
    #[serde(flatten)]
    summary: StudySummary,
    mode: Mode,
    varied: Vec<String>,
    constants: Vec<String>,
    command: String,
    outputs: Vec<String>,
    max_parallel: Option<usize>,
    started_at: Option<String>,
    finished_at: Option<String>,
}

async fn study_detail(
    State(state): State<Arc<AppState>>,
    UrlPath(name): UrlPath<String>,
) -> ApiResult<StudyDetail> {
    let root = state.root.clone();
    blocking(move || {
        let study = StudyDir::open(&root, &name)?;
        let config = study.config()?;
        let status = runner::study_status(&study)?;
        Ok(Json(StudyDetail {
            schema: API_SCHEMA,
            summary: summarize(&study)?,
            mode: config.mode,
            varied: config.varied.keys().cloned().collect(),
            constants: config.constants.keys().cloned().collect(),
            command: config.command,
            outputs: config.outputs,
            max_parallel: status.max_parallel,
            started_at: status.started_at.map(|t| t.to_rfc3339()),
            finished_at: status.finished_at.map(|t| t.to_rfc3339()),
        }))
    })
    .await
}

#[derive(Debug, Serialize)]
struct CaseView {
    id: String,
    status: CaseStatus,
    exit_code: Option<i32>,
    detail: String,
    started_at: Option<String>,
    finished_at: Option<String>,
    params: Params,
}

#[derive(Debug, Serialize)]
struct CasesView {
    schema: u32,
    study: String,
    latest_seq: u64,
    cases: Vec<CaseView>,
}

async fn study_cases(
    State(state): State<Arc<AppState>>,
    UrlPath(name): UrlPath<String>,
) -> ApiResult<CasesView> {
    let root = state.root.clone();
    blocking(move || {
        let study = StudyDir::open(&root, &name)?;
        let status = runner::study_status(&study)?;
        let mut params: HashMap<String, Params> = study
            .cases()?
            .into_iter()
            .map(|c| (c.id.as_str().to_string(), c.params))
            .collect();
        let cases = status
            .cases
            .iter()
            .map(|c| CaseView {
                id: c.id.as_str().to_string(),
                status: c.status,
                exit_code: c.exit_code,
                detail: c.detail.clone(),
                started_at: c.started_at.map(|t| t.to_rfc3339()),
                finished_at: c.finished_at.map(|t| t.to_rfc3339()),
                params: params.remove(c.id.as_str()).unwrap_or_default(),
            })
            .collect();
        Ok(Json(CasesView {
            schema: API_SCHEMA,
            study: study.name().to_string(),
            latest_seq: status.latest_seq,
            cases,
        }))
    })
    .await
}

#[derive(Debug, Serialize)]
struct Partition {
    id: Vec<String>,
    metadata: Vec<String>,
    results: Vec<String>,
}

#[derive(Debug, Serialize)]
struct SecondaryView {
    schema: u32,
    study: String,
    columns: Vec<Column>,
    partition: Partition,
    rows: Vec<Vec<serde_json::Value>>,
}

/// Numeric cells become JSON numbers when that loses nothing; everything
/// else stays text.
fn cell_json(column: &Column, cell: &str) -> serde_json::Value {
    if column.ty.is_numeric() {
        if let Ok(v) = cell.parse::<f64>() {
            if let Some(n) = serde_json::Number::from_f64(v) {
                return serde_json::Value::Number(n);
            }
        }
    }
    serde_json::Value::String(cell.to_string())
}

async fn study_secondary(
    State(state): State<Arc<AppState>>,
    UrlPath(name): UrlPath<String>,
    Query(filter): Query<Vec<(String, String)>>,
) -> ApiResult<SecondaryView> {
    let root = state.root.clone();
    blocking(move || {
        let study = StudyDir::open(&root, &name)?;
        if !study.file(SECONDARY_FILE).is_file() {
            return Err(ApiFailure::new(
                StatusCode::NOT_FOUND,
                format!("study `{name}` has no merged secondary data"),
            ));
        }
        let table = datastore::read_study_table(&study)?.filter(&filter)?;
        let names = |role| table.names_with_role(role).into_iter().map(str::to_string).collect();
        let partition = Partition {
            id: names(ColumnRole::Id),
            metadata: names(ColumnRole::Metadata),
            results: names(ColumnRole::Result),
        };
        let rows = table
            .rows()
            .iter()
            .map(|row| {
                row.iter()
                    .zip(table.columns())
                    .map(|(cell, col)| cell_json(col, cell))
                    .collect()
            })
            .collect();
        Ok(Json(SecondaryView {
            schema: API_SCHEMA,
            study: study.name().to_string(),
            columns: table.columns().to_vec(),
            partition,
            rows,
        }))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    study: Option<String>,
    #[serde(default)]
    since: u64,
    /// Seconds; 0 answers immediately.
    timeout: Option<f64>,
}

#[derive(Debug, Serialize)]
struct EventsView {
    schema: u32,
    study: String,
    latest_seq: u64,
    events: Vec<EventRecord>,
}

fn events_after(study: &StudyDir, since: u64) -> Result<(u64, Vec<EventRecord>), ApiFailure> {
    let all = runner::read_events(study)?;
    let latest = all.last().map_or(0, |e| e.seq);
    Ok((latest, all.into_iter().filter(|e| e.seq > since).collect()))
}

fn resolve_study(root: &Path, requested: Option<String>) -> Result<StudyDir, ApiFailure> {
    if let Some(name) = requested {
        return Ok(StudyDir::open(root, &name)?);
    }
    let names = layout::list_studies(root)?;
    match names.as_slice() {
        [only] => Ok(StudyDir::open(root, only)?),
        [] => Err(ApiFailure::new(StatusCode::NOT_FOUND, "project has no studies")),
        _ => Err(ApiFailure::new(
            StatusCode::BAD_REQUEST,
            "`study` is required when the project has more than one study",
        )),
    }
}

/// Answers as soon as events newer than `since` exist, or with an empty
/// list once the timeout expires.
async fn events(State(state): State<Arc<AppState>>, Query(q): Query<EventsQuery>) -> ApiResult<EventsView> {
    let timeout = match q.timeout {
        None => state.poll_timeout,
        Some(t) if t.is_finite() && t >= 0.0 => Duration::from_secs_f64(t).min(MAX_POLL_TIMEOUT),
        Some(_) => return Err(ApiFailure::new(StatusCode::BAD_REQUEST, "invalid timeout")),
    };
    let root = state.root.clone();
    let study = blocking(move || resolve_study(&root, q.study)).await?;
    let deadline = Instant::now() + timeout;
    loop {
        let dir = study.clone();
        let (latest, events) = blocking(move || events_after(&dir, q.since)).await?;
        if !events.is_empty() || Instant::now() >= deadline {
            return Ok(Json(EventsView {
                schema: API_SCHEMA,
                study: study.name().to_string(),
                latest_seq: latest,
                events,
            }));
        }
        tokio::time::sleep(POLL_STEP.min(deadline - Instant::now())).await;
    }
}

#[derive(Debug, Serialize)]
struct CancelView {
    study: String,
    case_id: String,
    outcome: CancelOutcome,
}

async fn cancel_case(
    State(state): State<Arc<AppState>>,
    UrlPath((name, id)): UrlPath<(String, String)>,
) -> Result<(StatusCode, Json<CancelView>), ApiFailure> {
    let root = state.root.clone();
    blocking(move || {
        let study = StudyDir::open(&root, &name)?;
        let ack = runner::cancel(&study, &id)?;
        log::info!("cancel {}/{}: {:?}", name, id, ack.outcome);
        Ok((
            StatusCode::ACCEPTED,
            Json(CancelView {
                study: name,
                case_id: ack.case_id.as_str().to_string(),
                outcome: ack.outcome,
            }),
        ))
    })
    .await
}

const BUILTIN_PAGE: &str = "<!DOCTYPE html>
<html lang=\"en\"><head><meta charset=\"utf-8\"><title>labrun</title></head>
<body>
<h1>labrun</h1>
<p>No dashboard build is configured. The JSON API is under <code>/api</code>, starting with <a href=\"/api/studies\">/api/studies</a>.</p>
</body></html>
";
