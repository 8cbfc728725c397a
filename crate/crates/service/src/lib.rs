//! HTTP API over one sandbox workspace.
//!
//! Every handler resolves the bearer token, lets the workspace authorize
//! the request, and only then touches state. Mutating requests leave
//! exactly one entry in the workspace audit chain, including refusals.

mod error;
mod events;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use sbx_core::engine::{self, ExecutorDescriptor, FailurePolicy, RunMonitor, RunSpec, RunState};
use sbx_core::rbac::{Action, Principal};
use sbx_core::report::{self, Audience, ReportNote};
use sbx_core::vocab::{ControlStatus, Zone};
use sbx_core::workspace::{RunStart, Workspace};
use serde::Deserialize;
use serde_json::{json, Value};

pub use error::{status_for, ApiError};

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8642";
pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
/// Static endpoint reference, also served at `/api/v1/openapi.json`.
pub const OPENAPI: &str = include_str!("../openapi.json");

type ApiResult<T> = Result<T, ApiError>;

/// A run executing in this process.
pub struct LiveRun {
    pub monitor: RunMonitor,
    persisted: Mutex<bool>,
    persisted_changed: Condvar,
}

impl LiveRun {
    fn new(state: RunState) -> Self {
        LiveRun { monitor: RunMonitor::new(state), persisted: Mutex::new(false), persisted_changed: Condvar::new() }
    }

    fn mark_persisted(&self) {
        *self.persisted.lock().unwrap_or_else(|e| e.into_inner()) = true;
        self.persisted_changed.notify_all();
    }

    fn is_persisted(&self) -> bool {
        *self.persisted.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Blocks until the run record is on disk.
    pub fn wait_persisted(&self) {
        let g = self.persisted.lock().unwrap_or_else(|e| e.into_inner());
        drop(self.persisted_changed.wait_while(g, |p| !*p).unwrap_or_else(|e| e.into_inner()));
    }
}

pub struct AppState {
    pub ws: Workspace,
    live: Mutex<HashMap<String, Arc<LiveRun>>>,
    /// Serializes check-then-write sequences: idempotency lookups and
    /// control transitions.
    serial: Mutex<()>,
    ui_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(ws: Workspace) -> Arc<Self> {
        Self::with_ui(ws, None)
    }

    /// Also serves a built dashboard from `ui_dir` at `/`.
    pub fn with_ui(ws: Workspace, ui_dir: Option<PathBuf>) -> Arc<Self> {
        Arc::new(AppState { ws, live: Mutex::new(HashMap::new()), serial: Mutex::new(()), ui_dir })
    }

    pub fn live_run(&self, run_id: &str) -> Option<Arc<LiveRun>> {
        self.live.lock().unwrap_or_else(|e| e.into_inner()).get(run_id).cloned()
    }

    fn principal(&self, headers: &HeaderMap) -> Option<Principal> {
        let value = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
        let token = value.strip_prefix("Bearer ").unwrap_or(value).trim();
        self.ws.principals().resolve(token).cloned()
    }

    fn serial(&self) -> std::sync::MutexGuard<'_, ()> {
        self.serial.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Starts executing on a background thread.
    fn launch(self: &Arc<Self>, spec: RunSpec) {
        let live = Arc::new(LiveRun::new(RunState::new(&spec.run_id, &spec.plan)));
        self.live.lock().unwrap_or_else(|e| e.into_inner()).insert(spec.run_id.clone(), live.clone());
        let st = self.clone();
        std::thread::spawn(move || {
            if let Err(e) = st.ws.execute(&spec, &live.monitor) {
                eprintln!("run {} ended with error: {e}", spec.run_id);
            }
            live.monitor.close();
            live.mark_persisted();
        });
    }
}

/// Runs a workspace call off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::new("internal", e.to_string()))?
}

/// Authorizes, then records a refusal for a body that cannot be used.
fn refuse(st: &AppState, p: Option<&Principal>, action: Action, verb: &str, e: ApiError) -> ApiError {
    if let Err(denied) = st.ws.authorize(p, action, None) {
        return denied.into();
    }
    match st.ws.refuse(p, verb, &e.code, &e.message) {
        Ok(()) => e,
        Err(audit) => audit.into(),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    use axum::routing::post;
    let api = Router::new()
        .route("/session", get(session))
        .route("/openapi.json", get(openapi))
        .route("/configs", post(submit_config))
        .route("/configs/{digest}", get(get_config))
        .route("/configs/{digest}/controls", get(config_controls))
        .route("/plans", post(assemble_plan))
        .route("/plans/{plan_id}", get(get_plan))
        .route("/runs", post(start_run).get(list_runs))
        .route("/runs/{run_id}", get(get_run))
        .route("/runs/{run_id}/events", get(events::stream))
        .route("/runs/{run_id}/steps/{step_id}", get(get_step))
        .route("/artefacts", post(put_artefact))
        .route("/artefacts/{digest}", get(get_artefact))
        .route("/controls/{control_id}", get(get_control).patch(patch_control))
        .route("/reports/{run_id}", get(get_report).post(generate_report))
        .route("/audit/verify", get(verify_audit))
        .route("/audit/export", get(export_audit))
        .route("/catalogue", get(catalogue))
        .fallback(|| async { ApiError::new("not_found", "no such endpoint") });
    let app = Router::new().nest("/api/v1", api);
    let app = if state.ui_dir.is_some() { app.fallback(static_ui) } else { app };
    app.with_state(state)
}

/// Binds and serves until the process ends.
pub async fn serve(state: Arc<AppState>, listen: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(listen).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn static_ui(State(st): State<Arc<AppState>>, uri: axum::http::Uri) -> Response {
    let Some(dir) = st.ui_dir.clone() else { return StatusCode::NOT_FOUND.into_response() };
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    if rel.split('/').any(|c| c == ".." || c.is_empty()) {
        return StatusCode::NOT_FOUND.into_response();
    }
    // Unknown paths fall back to the single-page entry point.
    let bytes = match std::fs::read(dir.join(rel)) {
        Ok(b) => b,
        Err(_) => match std::fs::read(dir.join("index.html")) {
            Ok(b) => return ([(header::CONTENT_TYPE, "text/html")], b).into_response(),
            Err(_) => return StatusCode::NOT_FOUND.into_response(),
        },
    };
    let mime = match rel.rsplit('.').next() {
        Some("html") => "text/html",
        Some("js") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    };
    ([(header::CONTENT_TYPE, mime)], bytes).into_response()
}

async fn openapi() -> Response {
    ([(header::CONTENT_TYPE, "application/json")], OPENAPI).into_response()
}

async fn session(State(st): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<Json<Value>> {
    let p = st.principal(&headers);
    let s = st.ws.session(p.as_ref())?;
    Ok(Json(json!(s)))
}

async fn submit_config(State(st): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    blocking(move || {
        let p = st.principal(&headers);
        let Ok(source) = String::from_utf8(body.to_vec()) else {
            return Err(refuse(&st, p.as_ref(), Action::SubmitConfig, "config", ApiError::bad_request("body is not UTF-8")));
        };
        let out = st.ws.submit_config(p.as_ref(), &source)?;
        if let Some(msg) = &out.parse_error {
            return Err(ApiError::new("parse_error", msg.clone()));
        }
        let body = json!({ "config_digest": out.config_digest, "report": out.report });
        if out.accepted() {
            Ok((StatusCode::CREATED, Json(body)).into_response())
        } else {
            Err(ApiError::new("validation_failed", "configuration does not validate").with_details(body))
        }
    })
    .await
}

async fn get_config(State(st): State<Arc<AppState>>, headers: HeaderMap, Path(digest): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let p = st.principal(&headers);
        st.ws.authorize(p.as_ref(), Action::ValidateConfig, None)?;
        Ok(Json(json!(st.ws.config(&digest)?)))
    })
    .await
}

async fn config_controls(State(st): State<Arc<AppState>>, headers: HeaderMap, Path(digest): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let p = st.principal(&headers);
        Ok(Json(json!(st.ws.controls(p.as_ref(), &digest)?)))
    })
    .await
}

#[derive(Deserialize)]
struct PlanRequest {
    config_digest: String,
    #[serde(default)]
    allow_gaps: bool,
}

async fn assemble_plan(State(st): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    blocking(move || {
        let p = st.principal(&headers);
        let req: PlanRequest = serde_json::from_slice(&body)
            .map_err(|e| refuse(&st, p.as_ref(), Action::AssemblePlan, "plan", ApiError::bad_request(e.to_string())))?;
        let plan = st.ws.assemble_plan_for(p.as_ref(), &req.config_digest, req.allow_gaps)?;
        Ok((StatusCode::CREATED, Json(json!(plan))).into_response())
    })
    .await
}

async fn get_plan(State(st): State<Arc<AppState>>, headers: HeaderMap, Path(plan_id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let p = st.principal(&headers);
        st.ws.authorize(p.as_ref(), Action::ViewRun, None)?;
        Ok(Json(json!(st.ws.plan(&plan_id)?)))
    })
    .await
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Executors {
    /// Compact form, as on the command line: `local:2,3xremote:1:20`.
    Spec(String),
    List(Vec<ExecutorDescriptor>),
}

#[derive(Deserialize)]
struct RunRequest {
    config_digest: String,
    executors: Option<Executors>,
    policy: Option<String>,
}

fn run_request(body: &[u8]) -> ApiResult<(String, Vec<ExecutorDescriptor>, FailurePolicy)> {
    let req: RunRequest = serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let executors = match req.executors {
        None => engine::parse_executors("local").expect("default spec parses"),
        Some(Executors::Spec(s)) => engine::parse_executors(&s).map_err(|e| ApiError::bad_request(e.to_string()))?,
        Some(Executors::List(l)) => l,
    };
    let policy = match req.policy {
        None => FailurePolicy::default(),
        Some(s) => s.parse().map_err(|e: engine::EngineError| ApiError::bad_request(e.to_string()))?,
    };
    Ok((req.config_digest, executors, policy))
}

async fn start_run(State(st): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    blocking(move || {
        let p = st.principal(&headers);
        st.ws.authorize(p.as_ref(), Action::StartRun, None)?;
        let key = match headers.get(IDEMPOTENCY_HEADER).map(|v| v.to_str()) {
            None => None,
            Some(Ok(k)) => Some(k.to_string()),
            Some(Err(_)) => {
                return Err(refuse(&st, p.as_ref(), Action::StartRun, "run", ApiError::bad_request("Idempotency-Key is not ASCII")))
            }
        };
        let (digest, executors, policy) =
            run_request(&body).map_err(|e| refuse(&st, p.as_ref(), Action::StartRun, "run", e))?;
        let plan = st.ws.plan_for_config(&digest).map_err(|e| {
            let e = ApiError::from(e);
            refuse(&st, p.as_ref(), Action::StartRun, "run", ApiError::new(&e.code, format!("no plan assembled for {digest}: {}", e.message)))
        })?;
        let _serial = st.serial();
        match st.ws.start_run(p.as_ref(), &plan.plan_id, executors, policy, key.as_deref())? {
            RunStart::New(spec) => {
                let body = json!({ "run_id": spec.run_id, "plan_id": spec.plan.plan_id, "replayed": false });
                st.launch(spec);
                Ok((StatusCode::CREATED, Json(body)).into_response())
            }
            RunStart::Replayed(run_id) => {
                Ok((StatusCode::OK, Json(json!({ "run_id": run_id, "plan_id": plan.plan_id, "replayed": true })))
                    .into_response())
            }
        }
    })
    .await
}

async fn list_runs(State(st): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<Json<Value>> {
    blocking(move || {
        let p = st.principal(&headers);
        let runs: Vec<Value> = st
            .ws
            .runs(p.as_ref())?
            .into_iter()
            .map(|r| {
                let state = current_state(&st, &r.run_id, r.state);
                json!({ "run_id": r.run_id, "plan_id": r.plan_id, "config_digest": r.config_digest, "created": r.created, "phase": state.phase })
            })
            .collect();
        Ok(Json(json!(runs)))
    })
    .await
}

/// Live state while the run executes here, the stored state otherwise.
fn current_state(st: &AppState, run_id: &str, stored: RunState) -> RunState {
    match st.live_run(run_id) {
        Some(live) if !live.is_persisted() => live.monitor.state(),
        _ => stored,
    }
}

async fn get_run(State(st): State<Arc<AppState>>, headers: HeaderMap, Path(run_id): Path<String>) -> ApiResult<Json<RunState>> {
    blocking(move || {
        let p = st.principal(&headers);
        let rec = st.ws.run(p.as_ref(), &run_id)?;
        Ok(Json(current_state(&st, &run_id, rec.state)))
    })
    .await
}

async fn get_step(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Path((run_id, step_id)): Path<(String, String)>,
) -> ApiResult<Json<Value>> {
    blocking(move || {
        let p = st.principal(&headers);
        Ok(Json(json!(st.ws.step(p.as_ref(), &run_id, &step_id)?)))
    })
    .await
}

#[derive(Deserialize)]
struct ArtefactQuery {
    zone: Option<String>,
    hint: Option<String>,
}

async fn put_artefact(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Query(q): Query<ArtefactQuery>,
    body: Bytes,
) -> ApiResult<Response> {
    blocking(move || {
        let p = st.principal(&headers);
        let zone: Zone = match q.zone.as_deref().unwrap_or("shared").parse() {
            Ok(z) => z,
            Err(e) => {
                let e = ApiError::bad_request(format!("{e}"));
                return Err(refuse(&st, p.as_ref(), Action::SubmitConfig, "artefact", e));
            }
        };
        let hint = q.hint.unwrap_or_else(|| "application/octet-stream".into());
        let r = st.ws.put_artefact(p.as_ref(), &body, zone, &hint)?;
        Ok((StatusCode::CREATED, Json(json!(r))).into_response())
    })
    .await
}

async fn get_artefact(State(st): State<Arc<AppState>>, headers: HeaderMap, Path(digest): Path<String>) -> ApiResult<Response> {
    blocking(move || {
        let p = st.principal(&headers);
        let (r, bytes) = st.ws.artefact(p.as_ref(), &digest)?;
        let zone = r.zone.as_str();
        Ok(([(header::CONTENT_TYPE, "application/octet-stream"), (header::HeaderName::from_static("x-sbx-zone"), zone)], bytes)
            .into_response())
    })
    .await
}

async fn get_control(State(st): State<Arc<AppState>>, headers: HeaderMap, Path(control_id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let p = st.principal(&headers);
        Ok(Json(json!(st.ws.control(p.as_ref(), &control_id)?)))
    })
    .await
}

#[derive(Deserialize)]
struct ControlPatch {
    status: ControlStatus,
    #[serde(default)]
    note: String,
}

async fn patch_control(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(control_id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    blocking(move || {
        let p = st.principal(&headers);
        st.ws.authorize(p.as_ref(), Action::UpdateControlStatus, None)?;
        let req: ControlPatch = serde_json::from_slice(&body).map_err(|e| {
            refuse(&st, p.as_ref(), Action::UpdateControlStatus, "control", ApiError::bad_request(e.to_string()))
        })?;
        let _serial = st.serial();
        Ok(Json(json!(st.ws.set_control_status(p.as_ref(), &control_id, req.status, &req.note)?)))
    })
    .await
}

#[derive(Deserialize)]
struct ReportQuery {
    audience: Option<String>,
}

async fn get_report(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(run_id): Path<String>,
    Query(q): Query<ReportQuery>,
) -> ApiResult<Response> {
    blocking(move || {
        let p = st.principal(&headers);
        let audience: Option<Audience> =
            q.audience.map(|a| a.parse().map_err(|e| ApiError::bad_request(format!("{e}")))).transpose()?;
        let rep = st.ws.report(p.as_ref(), &run_id)?;
        Ok(match audience {
            None => Json(json!(rep)).into_response(),
            Some(a) => ([(header::CONTENT_TYPE, "text/markdown; charset=utf-8")], report::render_human(&rep, a)).into_response(),
        })
    })
    .await
}

#[derive(Deserialize)]
struct NoteInput {
    subject: String,
    text: String,
}

#[derive(Deserialize, Default)]
struct ReportRequest {
    #[serde(default)]
    notes: Vec<NoteInput>,
}

async fn generate_report(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(run_id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    blocking(move || {
        let p = st.principal(&headers);
        let req: ReportRequest = if body.iter().all(u8::is_ascii_whitespace) {
            ReportRequest::default()
        } else {
            serde_json::from_slice(&body).map_err(|e| {
                refuse(&st, p.as_ref(), Action::GenerateReport, "report", ApiError::bad_request(e.to_string()))
            })?
        };
        let author = p.as_ref().map(Principal::actor).unwrap_or_default();
        let notes: Vec<ReportNote> =
            req.notes.into_iter().map(|n| ReportNote { author: author.clone(), subject: n.subject, text: n.text }).collect();
        let rep = st.ws.generate_report(p.as_ref(), &run_id, &notes)?;
        Ok((StatusCode::CREATED, Json(json!(rep))).into_response())
    })
    .await
}

async fn verify_audit(State(st): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<Json<Value>> {
    blocking(move || {
        let p = st.principal(&headers);
        st.ws.session(p.as_ref())?;
        let summary = st.ws.verify_all()?;
        let mut body = json!(summary);
        if let Some((chain, v)) = summary.first_break() {
            let v = json!(v);
            body["chain"] = json!(chain);
            body["broken_at"] = v["broken_at"].clone();
            body["reason"] = v["reason"].clone();
        }
        Ok(Json(body))
    })
    .await
}

#[derive(Deserialize)]
struct ExportQuery {
    from: Option<u64>,
    to: Option<u64>,
}

async fn export_audit(State(st): State<Arc<AppState>>, headers: HeaderMap, Query(q): Query<ExportQuery>) -> ApiResult<Response> {
    blocking(move || {
        let p = st.principal(&headers);
        let range = match (q.from, q.to) {
            (None, None) => None,
            (from, to) => Some((from.unwrap_or(0), to.unwrap_or(u64::MAX))),
        };
        let text = st.ws.export_audit(p.as_ref(), range)?;
        Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from(text)).into_response())
    })
    .await
}

async fn catalogue(State(st): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<Json<Value>> {
    blocking(move || {
        let p = st.principal(&headers);
        st.ws.session(p.as_ref())?;
        Ok(Json(json!(st.ws.catalogue()?.export())))
    })
    .await
}
