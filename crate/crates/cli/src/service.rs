//! HTTP/JSON service behind the replay explorer.

use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use cfstates::agent::AgentNet;
use cfstates::counterfactual::{
    generate_counterfactual, select_cf_action, ActionLabel, Candidate, CfConfig, CounterfactualResult, HighlightConfig,
    KeyFrameConfig,
};
use cfstates::env::{Action, Frame};
use cfstates::genmodel::GenModel;
use cfstates::persistence::{encode_png, Replay};
use cfstates::pipeline::{load_replays, model_dir, FULL_MODEL};
use lru::LruCache;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::Semaphore;

/// Everything a request needs, loaded once and never modified.
pub struct Bundle {
    pub agent: AgentNet,
    pub model: GenModel,
    pub replays: Vec<Replay>,
}

impl Bundle {
    /// Reads `agent.ckpt`, the full model and all replays from an artifact
    /// directory.
    pub fn open(dir: &Path) -> cfstates::Result<Self> {
        Ok(Bundle {
            agent: AgentNet::load(&dir.join("agent.ckpt"))?,
            model: GenModel::load(&model_dir(dir, FULL_MODEL))?,
            replays: load_replays(dir)?,
        })
    }

    fn replay(&self, id: &str) -> Result<&Replay, ApiError> {
        self.replays.iter().find(|r| r.id == id).ok_or_else(|| ApiError::not_found(format!("unknown replay {id:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub cf: CfConfig,
    pub highlight: HighlightConfig,
    pub keyframes: KeyFrameConfig,
    pub workers: usize,
    pub cache_entries: usize,
    pub annotation_log: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            cf: CfConfig::default(),
            highlight: HighlightConfig::default(),
            keyframes: KeyFrameConfig::default(),
            workers: 2,
            cache_entries: 256,
            annotation_log: None,
        }
    }
}

enum Load {
    Loading,
    Ready(Arc<Bundle>),
    Failed(String),
}

type CacheKey = (String, usize, String);

pub struct AppState {
    load: RwLock<Load>,
    cache: Mutex<LruCache<CacheKey, Arc<CfResponse>>>,
    workers: Semaphore,
    annotations: tokio::sync::Mutex<()>,
    pub config: ServiceConfig,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        let entries = NonZeroUsize::new(config.cache_entries.max(1)).expect("positive");
        Arc::new(AppState {
            load: RwLock::new(Load::Loading),
            cache: Mutex::new(LruCache::new(entries)),
            workers: Semaphore::new(config.workers.max(1)),
            annotations: tokio::sync::Mutex::new(()),
            config,
        })
    }

    pub fn set_ready(&self, bundle: Bundle) {
        *self.load.write().expect("load lock") = Load::Ready(Arc::new(bundle));
    }

    pub fn set_failed(&self, message: String) {
        *self.load.write().expect("load lock") = Load::Failed(message);
    }

    pub fn cached_entries(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    fn bundle(&self) -> Result<Arc<Bundle>, ApiError> {
        match &*self.load.read().expect("load lock") {
            Load::Ready(b) => Ok(b.clone()),
            Load::Loading => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "loading", "models are still loading")),
            Load::Failed(m) => Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "load_failed",
                format!("models failed to load: {m}"),
            )),
        }
    }
}

/// Loads the artifact directory off the async runtime and publishes it.
pub async fn load_in_background(state: Arc<AppState>, dir: PathBuf) {
    let result = tokio::task::spawn_blocking(move || Bundle::open(&dir)).await;
    match result {
        Ok(Ok(bundle)) => {
            log::info!("models ready, {} replays", bundle.replays.len());
            state.set_ready(bundle);
        }
        Ok(Err(e)) => {
            log::error!("loading models: {e}");
            state.set_failed(e.to_string());
        }
        Err(e) => state.set_failed(e.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError { status, body: ErrorBody { code: code.into(), message: message.into() } }
    }

    fn not_found(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    pub fn status(&self) -> StatusCode {
        self.status
    }

    pub fn body(&self) -> &ErrorBody {
        &self.body
    }
}

impl From<cfstates::Error> for ApiError {
    fn from(e: cfstates::Error) -> Self {
        match e {
            cfstates::Error::NoCounterfactual => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "no_counterfactual", e.to_string())
            }
            other => ApiError::internal(other.to_string()),
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({})", self.body.message, self.body.code)
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub id: String,
    pub length: usize,
    pub score: f32,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayDetail {
    #[serde(flatten)]
    pub summary: ReplaySummary,
    pub actions: Vec<u8>,
    pub entropies: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyFrames {
    pub replay_id: String,
    /// Selected time steps in rank order.
    pub indices: Vec<usize>,
}

/// Target action of a request: a concrete action or automatic selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionChoice {
    Auto,
    Action(Action),
}

impl ActionChoice {
    /// Accepts an action id, an action name, or `"auto"`.
    pub fn parse(v: &Value) -> Result<Self, ApiError> {
        let invalid = |m: String| ApiError::new(StatusCode::BAD_REQUEST, "invalid_action", m);
        match v {
            Value::Number(n) => n
                .as_u64()
                .and_then(|id| Action::from_id(id as usize).ok())
                .map(ActionChoice::Action)
                .ok_or_else(|| invalid(format!("no action with id {n}"))),
            Value::String(s) if s == "auto" => Ok(ActionChoice::Auto),
            Value::String(s) => {
                Action::from_name(s).map(ActionChoice::Action).map_err(|_| invalid(format!("unknown action {s:?}")))
            }
            other => Err(invalid(format!("action must be an id, a name or \"auto\", got {other}"))),
        }
    }

    fn key(self) -> String {
        match self {
            ActionChoice::Auto => "auto".into(),
            ActionChoice::Action(a) => a.id().to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CfRequest {
    pub replay_id: String,
    pub t: usize,
    pub action: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfResponse {
    pub replay_id: String,
    pub t: usize,
    /// Base64-encoded PNG images.
    pub query_png: String,
    pub reconstruction_png: String,
    pub counterfactual_png: String,
    pub highlight_png: String,
    pub action: ActionLabel,
    pub target: ActionLabel,
    pub pi_agent: Vec<f32>,
    pub pi_before: Vec<f32>,
    pub pi_after: Vec<f32>,
    pub steps: usize,
    pub success: bool,
    pub latent_delta: f64,
    /// Per-action results of automatic selection.
    pub candidates: Option<Vec<Candidate>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Annotation {
    pub replay_id: String,
    pub t: usize,
    pub action: usize,
    pub note: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRecord {
    #[serde(flatten)]
    pub annotation: Annotation,
    /// Seconds since the Unix epoch.
    pub received: u64,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/actions", get(actions))
        .route("/api/replays", get(replays))
        .route("/api/replays/{id}", get(replay_detail))
        .route("/api/replays/{id}/frames/{t}", get(frame))
        .route("/api/replays/{id}/keyframes", get(keyframes))
        .route("/api/counterfactual", post(counterfactual))
        .route("/api/annotations", get(list_annotations).post(annotate))
        .with_state(state)
}

async fn actions() -> Json<Vec<ActionLabel>> {
    Json(Action::ALL.into_iter().map(ActionLabel::from).collect())
}

fn summary(r: &Replay) -> ReplaySummary {
    ReplaySummary { id: r.id.clone(), length: r.len(), score: r.score, seed: r.seed }
}

async fn replays(State(state): State<Arc<AppState>>) -> Result<Json<Vec<ReplaySummary>>, ApiError> {
    let b = state.bundle()?;
    Ok(Json(b.replays.iter().map(summary).collect()))
}

async fn replay_detail(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<ReplayDetail>, ApiError> {
    let b = state.bundle()?;
    let r = b.replay(&id)?;
    Ok(Json(ReplayDetail {
        summary: summary(r),
        actions: r.steps.iter().map(|s| s.action).collect(),
        entropies: r.steps.iter().map(|s| s.entropy).collect(),
    }))
}

fn png(frame: &Frame) -> Result<Vec<u8>, ApiError> {
    encode_png(frame).map_err(ApiError::from)
}

async fn frame(
    State(state): State<Arc<AppState>>,
    UrlPath((id, t)): UrlPath<(String, String)>,
) -> Result<Response, ApiError> {
    let b = state.bundle()?;
    let r = b.replay(&id)?;
    let t: usize = t.parse().map_err(|_| ApiError::not_found(format!("no frame {t:?}")))?;
    if t >= r.len() {
        return Err(ApiError::not_found(format!("frame {t} beyond replay length {}", r.len())));
    }
    let bytes = png(&r.frame(t)?)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Debug, Deserialize)]
struct KeyFrameQuery {
    n: Option<usize>,
}

async fn keyframes(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<KeyFrameQuery>,
) -> Result<Json<KeyFrames>, ApiError> {
    let b = state.bundle()?;
    let r = b.replay(&id)?;
    let indices =
        cfstates::counterfactual::select_key_frames(&r.entropies(), q.n.unwrap_or(10), &state.config.keyframes)?;
    Ok(Json(KeyFrames { replay_id: id, indices }))
}

fn b64(frame: &Frame) -> Result<String, ApiError> {
    Ok(base64::engine::general_purpose::STANDARD.encode(png(frame)?))
}

/// A finished counterfactual query.
pub struct Answer {
    pub result: CounterfactualResult,
    /// Per-action table when the target was chosen automatically.
    pub candidates: Option<Vec<Candidate>>,
}

/// Runs one counterfactual query to completion. Shared by the service and
/// the command line so both give identical answers.
pub fn query(
    bundle: &Bundle,
    replay_id: &str,
    t: usize,
    choice: ActionChoice,
    cf: &CfConfig,
) -> Result<Answer, ApiError> {
    let r = bundle.replay(replay_id)?;
    if t >= r.len() {
        return Err(ApiError::not_found(format!("frame {t} beyond replay length {}", r.len())));
    }
    let obs = r.observation(t)?;
    let (target, candidates) = match choice {
        ActionChoice::Action(a) => (a, None),
        ActionChoice::Auto => {
            let (a, table) = select_cf_action(&bundle.agent, &bundle.model, &obs, cf)?;
            (a, Some(table))
        }
    };
    let result = generate_counterfactual(&bundle.agent, &bundle.model, &obs, target, cf)?;
    Ok(Answer { result, candidates })
}

pub fn respond(answer: Answer, replay_id: &str, t: usize, highlight: &HighlightConfig) -> Result<CfResponse, ApiError> {
    let Answer { result, candidates } = answer;
    let panels = result.panels(highlight)?;
    Ok(CfResponse {
        replay_id: replay_id.to_string(),
        t,
        query_png: b64(&panels.query)?,
        reconstruction_png: b64(&panels.reconstruction)?,
        counterfactual_png: b64(&panels.counterfactual)?,
        highlight_png: b64(&panels.highlight)?,
        action: result.action.into(),
        target: result.target.into(),
        pi_agent: result.pi_agent,
        pi_before: result.pi_before,
        pi_after: result.pi_after,
        steps: result.steps,
        success: result.success,
        latent_delta: result.latent_delta,
        candidates,
    })
}

async fn counterfactual(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<CfResponse>, ApiError> {
    let req: CfRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))?;
    let bundle = state.bundle()?;
    let r = bundle.replay(&req.replay_id)?;
    if req.t >= r.len() {
        return Err(ApiError::not_found(format!("frame {} beyond replay length {}", req.t, r.len())));
    }
    let choice = ActionChoice::parse(&req.action)?;
    let key = (req.replay_id.clone(), req.t, choice.key());
    if let Some(hit) = state.cache.lock().expect("cache lock").get(&key) {
        return Ok(Json((**hit).clone()));
    }
    let _permit = state.workers.acquire().await.map_err(|e| ApiError::internal(e.to_string()))?;
    let (cf, hl) = (state.config.cf, state.config.highlight);
    let response = tokio::task::spawn_blocking(move || {
        query(&bundle, &req.replay_id, req.t, choice, &cf).and_then(|a| respond(a, &req.replay_id, req.t, &hl))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    let response = Arc::new(response);
    state.cache.lock().expect("cache lock").put(key, response.clone());
    Ok(Json((*response).clone()))
}

fn now() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn annotation_log(state: &AppState) -> Result<&Path, ApiError> {
    state
        .config
        .annotation_log
        .as_deref()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no_log", "annotation log is not configured"))
}

async fn annotate(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<(StatusCode, Json<AnnotationRecord>), ApiError> {
    let annotation: Annotation =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed annotation: {e}")))?;
    if annotation.note.trim().is_empty() {
        return Err(ApiError::bad_request("note is empty"));
    }
    let path = annotation_log(&state)?.to_path_buf();
    let record = AnnotationRecord { annotation, received: now() };
    let mut line = serde_json::to_string(&record).map_err(|e| ApiError::internal(e.to_string()))?;
    line.push('\n');
    let _guard = state.annotations.lock().await;
    tokio::task::spawn_blocking(move || {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(line.as_bytes())
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
    .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok((StatusCode::CREATED, Json(record)))
}

async fn list_annotations(State(state): State<Arc<AppState>>) -> Result<Json<Vec<AnnotationRecord>>, ApiError> {
    let path = annotation_log(&state)?;
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(ApiError::internal(e.to_string())),
    };
    let records = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ApiError::internal(format!("corrupt annotation log: {e}")))?;
    Ok(Json(records))
}
