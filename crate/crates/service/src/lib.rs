//! JSON API that puts a human annotator in the oracle seat of the active
//! learning loop.
//!
//! One loop, one outstanding query. `GET /api/next` selects the next pool
//! instance (and keeps returning it until it is answered), `POST /api/label`
//! answers it, which advances the loop exactly as the engine's oracle path
//! would. All mutation goes through a single mutex, so concurrent
//! submissions resolve in some total order and the losers get `409`.

use std::collections::HashSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use poolal::dataset::{Dataset, InstanceId};
use poolal::engine::{
    ActiveLearner, CurvePoint, EngineError, LoopCheckpoint, LoopConfig, LoopState, Outcome,
};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Loop checkpoint rewritten after every accepted submission.
    pub checkpoint_path: Option<PathBuf>,
    /// An unanswered query older than this is retired and re-selected.
    pub query_timeout: Option<Duration>,
    /// Directory mounted at `/` (the annotation console bundle).
    pub static_dir: Option<PathBuf>,
}

/// What the annotator is shown for a queried instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DisplayPayload {
    /// Image path or URL carried in the instance's `source_tag`.
    Asset { reference: String },
    Features { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingQuery {
    pub query_id: String,
    pub instance_id: InstanceId,
    pub display_payload: DisplayPayload,
    pub strategy_score: f64,
    /// Milliseconds since the Unix epoch.
    pub issued_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSubmission {
    pub query_id: String,
    /// `{"label": 3}` or `"reject"`.
    pub outcome: Outcome,
    #[serde(default)]
    pub annotator_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusDoc {
    pub iteration: usize,
    pub max_iterations: usize,
    pub labeled_size: usize,
    pub pool_size: usize,
    pub discarded: usize,
    pub accuracy: Option<f64>,
    pub strategy: String,
    pub complete: bool,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAck {
    pub accepted: bool,
    pub status: StatusDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({}): {}", self.status, self.code, self.message)
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.to_owned(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::InvalidClass { .. } => {
                Self::new(StatusCode::BAD_REQUEST, "invalid_class", e.to_string())
            }
            EngineError::NotInPool(_) => Self::new(StatusCode::NOT_FOUND, "unknown_instance", e.to_string()),
            EngineError::Exhausted(_) => Self::new(StatusCode::GONE, "complete", e.to_string()),
            other => Self::internal(other.to_string()),
        }
    }
}

struct Pending {
    query: PendingQuery,
    issued: Instant,
}

struct Session {
    learner: ActiveLearner,
    pending: Option<Pending>,
    /// Query ids that were answered or expired; resubmitting them conflicts.
    retired: HashSet<String>,
    transcript: Vec<(InstanceId, Outcome)>,
    /// Test accuracy keyed by the learner's training generation.
    accuracy: Option<(u64, f64)>,
    checkpoint_path: Option<PathBuf>,
    query_timeout: Option<Duration>,
}

/// Shared handle to the live loop.
#[derive(Clone)]
pub struct AppState {
    session: Arc<Mutex<Session>>,
    static_dir: Option<PathBuf>,
}

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl AppState {
    /// Starts a fresh loop, or resumes from `svc.checkpoint_path` when
    /// `resume` is set and the file exists.
    pub fn open(
        dataset: Arc<Dataset>,
        cfg: LoopConfig,
        svc: ServiceConfig,
        resume: bool,
    ) -> Result<Self, EngineError> {
        if cfg.batch_size != 1 {
            return Err(EngineError::InvalidConfig(
                "the annotation service issues one query at a time (batch_size = 1)".into(),
            ));
        }
        let learner = match &svc.checkpoint_path {
            Some(path) if resume && path.exists() => {
                ActiveLearner::resume(dataset, cfg, LoopCheckpoint::load(path)?)?
            }
            _ => ActiveLearner::new(dataset, cfg)?,
        };
        Ok(AppState {
            session: Arc::new(Mutex::new(Session {
                learner,
                pending: None,
                retired: HashSet::new(),
                transcript: Vec::new(),
                accuracy: None,
                checkpoint_path: svc.checkpoint_path,
                query_timeout: svc.query_timeout,
            })),
            static_dir: svc.static_dir,
        })
    }

    fn lock(&self) -> MutexGuard<'_, Session> {
        // A panic mid-request cannot leave the loop half-updated (apply
        // validates before mutating), so a poisoned lock is still usable.
        self.session.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn status(&self) -> Result<StatusDoc, ApiError> {
        self.lock().status()
    }

    pub fn next_query(&self) -> Result<PendingQuery, ApiError> {
        self.lock().next_query()
    }

    pub fn submit(&self, submission: &LabelSubmission) -> Result<LabelAck, ApiError> {
        self.lock().submit(submission)
    }

    pub fn curve(&self) -> Vec<CurvePoint> {
        self.lock().learner.state().curve.points.clone()
    }

    pub fn classes(&self) -> Vec<String> {
        self.lock().learner.dataset().class_names().to_vec()
    }

    /// Copy of the loop state, for observers.
    pub fn snapshot(&self) -> LoopState {
        self.lock().learner.state().clone()
    }

    /// Copy of the underlying learner, for observers.
    pub fn learner(&self) -> ActiveLearner {
        self.lock().learner.clone()
    }

    /// Accepted outcomes in submission order since the service started.
    pub fn transcript(&self) -> Vec<(InstanceId, Outcome)> {
        self.lock().transcript.clone()
    }
}

impl Session {
    fn status(&mut self) -> Result<StatusDoc, ApiError> {
        let generation = self.learner.train_generation();
        let accuracy = match self.accuracy {
            Some((g, acc)) if g == generation => acc,
            _ => {
                let acc = self.learner.test_accuracy()?;
                self.accuracy = Some((generation, acc));
                acc
            }
        };
        let st = self.learner.state();
        Ok(StatusDoc {
            iteration: st.iteration,
            max_iterations: self.learner.config().max_iterations,
            labeled_size: st.labeled_size(),
            pool_size: st.pool.len(),
            discarded: st.discarded.len(),
            accuracy: Some(accuracy),
            strategy: self.learner.config().strategy.to_string(),
            complete: self.learner.is_complete(),
            curve: st.curve.points.clone(),
        })
    }

    fn expire_stale(&mut self) {
        let (Some(timeout), Some(p)) = (self.query_timeout, &self.pending) else {
            return;
        };
        if p.issued.elapsed() >= timeout {
            let p = self.pending.take().expect("checked above");
            self.retired.insert(p.query.query_id);
        }
    }

    fn next_query(&mut self) -> Result<PendingQuery, ApiError> {
        self.expire_stale();
        if let Some(p) = &self.pending {
            return Ok(p.query.clone());
        }
        if self.learner.is_complete() {
            let (code, message) = if self.learner.state().pool.is_empty() {
                ("pool_exhausted", "the unlabeled pool is empty")
            } else {
                ("budget_reached", "the iteration budget is spent")
            };
            return Err(ApiError::new(StatusCode::GONE, code, message));
        }
        let cand = self
            .learner
            .propose()?
            .into_iter()
            .next()
            .ok_or_else(|| ApiError::internal("strategy returned no candidate"))?;
        let example = self.learner.example(cand.pool_index);
        let display_payload = match &example.source_tag {
            Some(tag) => DisplayPayload::Asset {
                reference: tag.clone(),
            },
            None => DisplayPayload::Features {
                values: example.features.clone(),
            },
        };
        let query = PendingQuery {
            query_id: uuid::Uuid::new_v4().to_string(),
            instance_id: cand.id,
            display_payload,
            strategy_score: cand.score,
            issued_at: now_millis(),
        };
        self.pending = Some(Pending {
            query: query.clone(),
            issued: Instant::now(),
        });
        Ok(query)
    }

    fn submit(&mut self, sub: &LabelSubmission) -> Result<LabelAck, ApiError> {
        self.expire_stale();
        let conflict = |msg: String| ApiError::new(StatusCode::CONFLICT, "conflict", msg);
        let pending = match &self.pending {
            Some(p) if p.query.query_id == sub.query_id => p,
            _ if self.retired.contains(&sub.query_id) => {
                return Err(conflict(format!(
                    "query {} was already answered or has expired",
                    sub.query_id
                )))
            }
            _ => return Err(conflict(format!("query {} is not outstanding", sub.query_id))),
        };
        let decision = (pending.query.instance_id.clone(), sub.outcome);
        self.learner.apply(std::slice::from_ref(&decision))?;
        let answered = self.pending.take().expect("matched above");
        self.retired.insert(answered.query.query_id);
        self.transcript.push(decision);
        if let Some(path) = &self.checkpoint_path {
            self.learner
                .checkpoint()
                .save(path)
                .map_err(|e| ApiError::internal(format!("label applied but checkpoint failed: {e}")))?;
        }
        Ok(LabelAck {
            accepted: true,
            status: self.status()?,
        })
    }
}

// ---------------------------------------------------------------------------
// HTTP layer
// ---------------------------------------------------------------------------

async fn blocking<T, F>(state: AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn get_status(State(st): State<AppState>) -> Result<Json<StatusDoc>, ApiError> {
    blocking(st, AppState::status).await.map(Json)
}

async fn get_next(State(st): State<AppState>) -> Result<Json<PendingQuery>, ApiError> {
    blocking(st, AppState::next_query).await.map(Json)
}

async fn post_label(
    State(st): State<AppState>,
    body: Result<Json<LabelSubmission>, JsonRejection>,
) -> Result<Json<LabelAck>, ApiError> {
    let Json(sub) =
        body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text()))?;
    blocking(st, move |s| s.submit(&sub)).await.map(Json)
}

async fn get_curve(State(st): State<AppState>) -> Json<Vec<CurvePoint>> {
    Json(st.curve())
}

async fn get_classes(State(st): State<AppState>) -> Json<Vec<String>> {
    Json(st.classes())
}

async fn api_not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: AppState) -> Router {
    let static_dir = state.static_dir.clone();
    let api = Router::new()
        .route("/status", get(get_status))
        .route("/next", get(get_next))
        .route("/label", post(post_label))
        .route("/curve", get(get_curve))
        .route("/classes", get(get_classes))
        .fallback(api_not_found);
    let app = Router::new().nest("/api", api).with_state(state);
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

/// Binds `addr`; split from [`serve`] so callers can report bind failures.
pub async fn bind(addr: SocketAddr) -> std::io::Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(addr).await
}

pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Convenience for tools: the checkpoint path to use under `dir`.
pub fn default_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("annotation.alloop")
}
