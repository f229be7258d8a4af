//! JSON HTTP service: chat sessions, flow trajectories and log scoring.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderName, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dialoflow_core::data::Vocab;
use dialoflow_core::flow_score::{score_log, ConversationLog, FlowReport};
use dialoflow_core::generation::{ChatSession, DecodeConfig, SessionTurn};
use dialoflow_core::model::ModelParams;
use dialoflow_core::projection::TrajectoryPoint;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex as AsyncMutex;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::set_header::SetResponseHeaderLayer;

use crate::commands::LoadedModel;
use crate::error::is_data_error;

pub const CHECKPOINT_HEADER: &str = "x-checkpoint-hash";

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub idle_timeout: Duration,
    pub max_sessions: usize,
    /// Allowed browser origin; `None` allows any.
    pub cors_origin: Option<String>,
    /// Directory for append-only per-session transcripts.
    pub persist_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            idle_timeout: Duration::from_secs(30 * 60),
            max_sessions: 256,
            cors_origin: None,
            persist_dir: None,
        }
    }
}

struct Slot {
    session: Arc<AsyncMutex<ChatSession>>,
    created: Instant,
    touched: Instant,
}

struct Model {
    params: ModelParams<f32>,
    vocab: Vocab,
}

/// Shared service state: a frozen model and the session store.
#[derive(Clone)]
pub struct AppState {
    model: Arc<Model>,
    hash: Arc<str>,
    sessions: Arc<Mutex<HashMap<String, Slot>>>,
    config: Arc<ServerConfig>,
}

impl AppState {
    pub fn new(model: LoadedModel, config: ServerConfig) -> Self {
        AppState {
            model: Arc::new(Model {
                params: model.params,
                vocab: model.vocab,
            }),
            hash: model.hash.into(),
            sessions: Arc::new(Mutex::new(HashMap::new())),
            config: Arc::new(config),
        }
    }

    fn store(&self) -> std::sync::MutexGuard<'_, HashMap<String, Slot>> {
        self.sessions.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn sweep(&self, sessions: &mut HashMap<String, Slot>) {
        let now = Instant::now();
        let timeout = self.config.idle_timeout;
        sessions.retain(|id, s| {
            let keep = now.duration_since(s.touched) < timeout;
            if !keep {
                log::info!("session {id} expired after {:?}", now.duration_since(s.created));
            }
            keep
        });
    }

    fn session(&self, id: &str) -> Result<Arc<AsyncMutex<ChatSession>>, ApiError> {
        let mut sessions = self.store();
        self.sweep(&mut sessions);
        let slot = sessions
            .get_mut(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session {id}")))?;
        slot.touched = Instant::now();
        Ok(slot.session.clone())
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    code: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<String>,
}

/// Error response: `{"error": {"code", "message", "field"?}}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                code,
                message: message.into(),
                field: None,
            },
        }
    }

    fn bad_field(field: impl Into<String>, message: impl Into<String>) -> Self {
        let mut e = ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", message);
        e.body.field = Some(field.into());
        e
    }

    fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    fn from_core(e: dialoflow_core::Error, field: &str) -> Self {
        if is_data_error(&e) {
            ApiError::bad_field(field, e.to_string())
        } else {
            ApiError::internal(e.to_string())
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.body }))).into_response()
    }
}

/// Parses a JSON body, reporting the path of the offending field. An empty
/// body is read as `{}`.
fn parse_body<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    let bytes: &[u8] = if bytes.iter().all(u8::is_ascii_whitespace) {
        b"{}"
    } else {
        bytes
    };
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "body".to_string() } else { path };
        ApiError::bad_field(field, e.into_inner().to_string())
    })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CreateSession {
    decode: Option<DecodeConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub decode: DecodeConfig,
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: CreateSession = parse_body(&body)?;
    let decode = req.decode.unwrap_or_default();
    let session = ChatSession::new(decode).map_err(|e| ApiError::bad_field("decode", e.to_string()))?;
    let mut sessions = state.store();
    state.sweep(&mut sessions);
    if sessions.len() >= state.config.max_sessions {
        return Err(ApiError::new(
            StatusCode::TOO_MANY_REQUESTS,
            "capacity_exceeded",
            format!("session limit of {} reached", state.config.max_sessions),
        ));
    }
    let id = uuid::Uuid::new_v4().simple().to_string();
    let now = Instant::now();
    sessions.insert(
        id.clone(),
        Slot {
            session: Arc::new(AsyncMutex::new(session)),
            created: now,
            touched: now,
        },
    );
    Ok((StatusCode::CREATED, Json(SessionCreated { session_id: id, decode })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MessageRequest {
    text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfluenceNorms {
    pub predicted: f64,
    pub realized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageResponse {
    pub reply: String,
    pub turn_index: usize,
    pub s_k: f64,
    pub flow_running: f64,
    pub influence_norms: InfluenceNorms,
    pub truncated: bool,
}

fn persist(dir: &std::path::Path, id: &str, user: &str, reply: &MessageResponse) {
    let path = dir.join(format!("{id}.jsonl"));
    let line = serde_json::json!({ "user": user, "response": reply });
    let result = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .and_then(|mut f| writeln!(f, "{line}"));
    if let Err(e) = result {
        log::warn!("cannot append to {}: {e}", path.display());
    }
}

async fn post_message(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<MessageResponse>, ApiError> {
    let req: MessageRequest = parse_body(&body)?;
    if state.model.vocab.encode_text(&req.text).is_empty() {
        return Err(ApiError::bad_field("text", "message contains no tokens"));
    }
    let session = state.session(&id)?;
    // Held across decoding so messages to one session run one at a time.
    let mut guard = session.lock_owned().await;
    let model = state.model.clone();
    let config = state.config.clone();
    blocking(move || {
        let turn = guard
            .step(&model.params, &model.vocab, &req.text)
            .map_err(|e| ApiError::from_core(e, "text"))?;
        let response = MessageResponse {
            reply: turn.reply,
            turn_index: turn.turn_index,
            s_k: turn.s_k,
            flow_running: turn.flow_running,
            influence_norms: InfluenceNorms {
                predicted: turn.predicted_norm,
                realized: turn.realized_norm,
            },
            truncated: turn.truncated,
        };
        if let Some(dir) = &config.persist_dir {
            persist(dir, &id, &req.text, &response);
        }
        Ok(Json(response))
    })
    .await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryResponse {
    pub points: Vec<TrajectoryPoint>,
}

async fn get_trajectory(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<TrajectoryResponse>, ApiError> {
    let session = state.session(&id)?;
    let guard = session.lock_owned().await;
    let model = state.model.clone();
    blocking(move || {
        let points = guard
            .trajectory(&model.params)
            .map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(Json(TrajectoryResponse { points }))
    })
    .await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub decode: DecodeConfig,
    pub turns: Vec<SessionTurn>,
    pub similarities: Vec<f64>,
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let session = state.session(&id)?;
    let guard = session.lock().await;
    Ok(Json(SessionView {
        session_id: id,
        decode: *guard.decode_config(),
        turns: guard.turns().to_vec(),
        similarities: guard.similarities().to_vec(),
    }))
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    match state.store().remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "unknown_session",
            format!("no session {id}"),
        )),
    }
}

async fn score(State(state): State<AppState>, body: Bytes) -> Result<Json<FlowReport>, ApiError> {
    let log: ConversationLog = parse_body(&body)?;
    let model = state.model.clone();
    blocking(move || {
        score_log(&log, &model.params, &model.vocab)
            .map(Json)
            .map_err(|e| ApiError::from_core(e, "turns"))
    })
    .await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint_hash: String,
    pub sessions: usize,
}

async fn healthz(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        checkpoint_hash: state.hash.to_string(),
        sessions: state.store().len(),
    })
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

pub fn router(state: AppState) -> Router {
    let origin = match &state.config.cors_origin {
        Some(o) => match HeaderValue::from_str(o) {
            Ok(v) => AllowOrigin::exact(v),
            Err(_) => {
                log::warn!("ignoring invalid CORS origin {o:?}");
                AllowOrigin::any()
            }
        },
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST, Method::DELETE])
        .allow_headers([axum::http::header::CONTENT_TYPE])
        .expose_headers([HeaderName::from_static(CHECKPOINT_HEADER)]);
    let hash = HeaderValue::from_str(&state.hash).expect("hex digest is a valid header value");
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/message", post(post_message))
        .route("/sessions/{id}/trajectory", get(get_trajectory))
        .route("/score", post(score))
        .fallback(not_found)
        .with_state(state)
        .layer(cors)
        .layer(SetResponseHeaderLayer::overriding(
            HeaderName::from_static(CHECKPOINT_HEADER),
            hash,
        ))
}

/// Serves until the listener fails or ctrl-c is received.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
