//! HTTP chat service: sessions hold a task context and a transcript; each
//! message samples a candidate pool, scores it with the consistency
//! selector and answers with the best candidate.

pub mod journal;
pub mod session;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use msdf_core::{DecodingParams, GeneratorModel, ModelError, SelectorModel};
use msdf_text::preprocess::{detect_topics, preprocess};
use msdf_text::{DialogSample, KnowledgeItem, PipelineConfig, Rewriter, Task, TextError};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::cors::CorsLayer;

pub use journal::{Journal, JournalError};
pub use session::{Event, Pool, Role, ScoredCandidate, Session, SessionContext, Turn};

/// Models shared read-only by every request.
pub struct Models {
    pub generators: BTreeMap<Task, GeneratorModel>,
    pub selector: SelectorModel,
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub pipeline: PipelineConfig,
    pub rewriter: Rewriter,
    /// Concurrent generation jobs.
    pub workers: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            rewriter: Rewriter::default(),
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

struct Slot {
    session: Session,
    busy: bool,
}

pub struct AppState {
    models: Arc<Models>,
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, Slot>>,
    journal: Option<Journal>,
    workers: Semaphore,
}

impl AppState {
    /// With a journal, every recorded session is replayed first.
    pub fn new(models: Models, config: ServiceConfig, journal: Option<Journal>) -> Result<Arc<Self>, JournalError> {
        let mut sessions = HashMap::new();
        if let Some(j) = &journal {
            for s in j.load_all()? {
                sessions.insert(s.session_id.clone(), Slot { session: s, busy: false });
            }
            log::info!("restored {} sessions from {}", sessions.len(), j.dir().display());
        }
        let workers = Semaphore::new(config.workers.max(1));
        Ok(Arc::new(Self {
            models: Arc::new(models),
            config,
            sessions: Mutex::new(sessions),
            journal,
            workers,
        }))
    }

    pub fn session(&self, id: &str) -> Option<Session> {
        self.sessions.lock().unwrap().get(id).map(|s| s.session.clone())
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    fn record(&self, id: &str, event: &Event) -> Result<(), ApiError> {
        if let Some(j) = &self.journal {
            j.append(id, event).map_err(|e| ApiError::internal(e.to_string()))?;
        }
        Ok(())
    }

    /// Marks a session busy; the guard clears the mark when dropped.
    fn begin(self: &Arc<Self>, id: &str) -> Result<(BusyGuard, Session), ApiError> {
        let mut map = self.sessions.lock().unwrap();
        let slot = map.get_mut(id).ok_or_else(|| ApiError::not_found(id))?;
        if slot.busy {
            return Err(ApiError::new(StatusCode::CONFLICT, "a request for this session is in flight"));
        }
        slot.busy = true;
        Ok((
            BusyGuard {
                state: Arc::clone(self),
                id: id.to_string(),
            },
            slot.session.clone(),
        ))
    }

    /// Applies and journals an event on a session this request holds busy.
    fn commit(&self, id: &str, event: Event) -> Result<Session, ApiError> {
        let mut map = self.sessions.lock().unwrap();
        let slot = map
            .get_mut(id)
            .ok_or_else(|| ApiError::not_found(id))?;
        slot.session
            .check(&event)
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
        self.record(id, &event)?;
        slot.session.apply(&event).expect("checked");
        Ok(slot.session.clone())
    }
}

struct BusyGuard {
    state: Arc<AppState>,
    id: String,
}

impl Drop for BusyGuard {
    fn drop(&mut self) {
        if let Some(slot) = self.state.sessions.lock().unwrap().get_mut(&self.id) {
            slot.busy = false;
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown session {id}"))
    }

    fn internal(message: String) -> Self {
        log::error!("{message}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::MissingSource(_)
            | ModelError::Config(_)
            | ModelError::Text(TextError::MissingSource(_) | TextError::MalformedTriple(_)) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
            }
            other => Self::internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub task: Task,
    #[serde(default)]
    pub knowledge: Vec<KnowledgeItem>,
    #[serde(default)]
    pub persona: Vec<String>,
    #[serde(default)]
    pub user_profile: BTreeMap<String, String>,
    #[serde(default)]
    pub situation: String,
    #[serde(default)]
    pub goal: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
}

/// Decoding overrides; the seed defaults to the turn number so a replayed
/// script samples the same pools.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DecodingRequest {
    pub pool_size: Option<usize>,
    pub top_k: Option<usize>,
    pub temperature: Option<f64>,
    pub max_new_tokens: Option<usize>,
    pub seed: Option<u64>,
}

impl DecodingRequest {
    pub fn resolve(&self, turn: usize) -> DecodingParams {
        let d = DecodingParams::default();
        DecodingParams {
            pool_size: self.pool_size.unwrap_or(d.pool_size),
            top_k: self.top_k.unwrap_or(d.top_k),
            temperature: self.temperature.unwrap_or(d.temperature),
            max_new_tokens: self.max_new_tokens.unwrap_or(d.max_new_tokens),
            seed: self.seed.unwrap_or(turn as u64),
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct PostMessage {
    pub text: String,
    #[serde(default)]
    pub decoding: Option<DecodingRequest>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MessageReply {
    pub reply: String,
    pub candidates: Vec<ScoredCandidate>,
    pub chosen_index: usize,
}

#[derive(Debug, Deserialize)]
pub struct Choose {
    pub candidate_index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChooseReply {
    pub reply: String,
}

/// Samples, scores and orders one turn's pool (best first, so the
/// selector's choice is index 0).
pub fn generate_turn(
    models: &Models,
    sample: &DialogSample,
    dec: &DecodingParams,
    pipe: &PipelineConfig,
    rewriter: &Rewriter,
) -> Result<Vec<ScoredCandidate>, ModelError> {
    let generator = models
        .generators
        .get(&sample.task)
        .ok_or_else(|| ModelError::Config(format!("no generator loaded for task {}", sample.task)))?;
    let (_, pool) = generator.respond(sample, pipe, rewriter, dec)?;
    let ranked = models.selector.select_final(&pool, &sample.history)?;
    Ok(ranked
        .order()
        .into_iter()
        .map(|i| ScoredCandidate {
            text: ranked.candidates[i].text.clone(),
            gen_logprob: ranked.candidates[i].gen_logprob,
            consistency: ranked.scores[i],
        })
        .collect())
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    if !state.models.generators.contains_key(&req.task) {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("no generator loaded for task {}", req.task),
        ));
    }
    let context = SessionContext {
        knowledge: req.knowledge,
        persona: req.persona,
        user_profile: req.user_profile,
        situation: req.situation,
        goal: req.goal,
    };
    // run the pipeline on a placeholder turn to surface missing sources
    let mut probe = DialogSample::new(req.task, vec!["你好".into()]);
    probe.knowledge = context.knowledge.clone();
    probe.persona = context.persona.clone();
    probe.user_profile = context.user_profile.clone();
    probe.situation = context.situation.clone();
    probe.goal = context.goal.clone();
    preprocess(&probe, &state.config.pipeline).map_err(ModelError::from)?;

    let id = uuid::Uuid::new_v4().simple().to_string();
    let event = Event::Created {
        session_id: id.clone(),
        task: req.task,
        placeholder_map: detect_topics(&context.knowledge),
        context,
        at: now_ms(),
    };
    let session = Session::from_event(&event).expect("creation event");
    state.record(&id, &event)?;
    state
        .sessions
        .lock()
        .unwrap()
        .insert(id.clone(), Slot { session, busy: false });
    Ok((StatusCode::CREATED, Json(Created { session_id: id })))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Session>, ApiError> {
    state.session(&id).map(Json).ok_or_else(|| ApiError::not_found(&id))
}

async fn delete_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    let mut map = state.sessions.lock().unwrap();
    match map.get(&id) {
        None => return Err(ApiError::not_found(&id)),
        Some(slot) if slot.busy => {
            return Err(ApiError::new(StatusCode::CONFLICT, "a request for this session is in flight"))
        }
        Some(_) => {}
    }
    if let Some(j) = &state.journal {
        j.remove(&id).map_err(|e| ApiError::internal(e.to_string()))?;
    }
    map.remove(&id);
    Ok(StatusCode::NO_CONTENT)
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<PostMessage>,
) -> Result<Json<MessageReply>, ApiError> {
    let (_guard, session) = state.begin(&id)?;
    if req.text.trim().is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "text required"));
    }
    let dec = req.decoding.unwrap_or_default().resolve(session.user_turns());
    dec.validate()?;
    let sample = session.sample_for(&req.text);
    let _permit = state.workers.acquire().await.expect("semaphore never closes");
    let job = {
        let state = Arc::clone(&state);
        let dec = dec.clone();
        tokio::task::spawn_blocking(move || {
            generate_turn(&state.models, &sample, &dec, &state.config.pipeline, &state.config.rewriter)
        })
    };
    let candidates = job.await.map_err(|e| ApiError::internal(format!("generation task failed: {e}")))??;
    let pool = Pool {
        candidates: candidates.clone(),
        chosen_index: 0,
        shown_index: 0,
        decoding: dec,
    };
    state.commit(
        &id,
        Event::Message {
            user: req.text,
            pool,
            at: now_ms(),
        },
    )?;
    Ok(Json(MessageReply {
        reply: candidates[0].text.clone(),
        candidates,
        chosen_index: 0,
    }))
}

async fn choose(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<Choose>,
) -> Result<Json<ChooseReply>, ApiError> {
    let (_guard, session) = state.begin(&id)?;
    if session.last_pool.is_none() {
        return Err(ApiError::new(StatusCode::CONFLICT, "no candidate pool to choose from"));
    }
    let s = state.commit(
        &id,
        Event::Chose {
            candidate_index: req.candidate_index,
            at: now_ms(),
        },
    )?;
    Ok(Json(ChooseReply {
        reply: s.transcript.last().expect("bot turn").text.clone(),
    }))
}

async fn info(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let tasks: Vec<Task> = state.models.generators.keys().copied().collect();
    Json(serde_json::json!({ "tasks": tasks, "sessions": state.session_count() }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/info", get(info))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session).delete(delete_session))
        .route("/v1/sessions/{id}/messages", post(post_message))
        .route("/v1/sessions/{id}/choose", post(choose))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
