//! HTTP routes over the session store.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;
use crate::registry::{ModelRegistry, ModelSummary};
use crate::session::{CreateSessionRequest, InterventionRequest, Session, SessionPayload, SessionState};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Sessions idle for longer than this are dropped.
    pub session_ttl: Duration,
    /// Include ground truth of dataset samples in payloads.
    pub expose_truth: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            session_ttl: Duration::from_secs(3600),
            expose_truth: false,
        }
    }
}

type SessionHandle = Arc<Mutex<Session>>;

/// Shared server state. Each session has its own lock, so writes to one
/// session never block another.
#[derive(Clone)]
pub struct AppState {
    registry: Arc<ModelRegistry>,
    sessions: Arc<RwLock<HashMap<String, SessionHandle>>>,
    config: Arc<ServiceConfig>,
}

impl AppState {
    pub fn new(registry: ModelRegistry, config: ServiceConfig) -> Self {
        Self {
            registry: Arc::new(registry),
            sessions: Arc::new(RwLock::new(HashMap::new())),
            config: Arc::new(config),
        }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().map_or(0, |s| s.len())
    }

    /// Drops sessions idle for longer than the configured TTL.
    pub fn evict_expired(&self) {
        let ttl = self.config.session_ttl;
        if let Ok(mut map) = self.sessions.write() {
            map.retain(|_, s| s.lock().map(|s| s.idle_for() <= ttl).unwrap_or(false));
        }
    }

    fn session(&self, id: &str) -> Result<SessionHandle, ApiError> {
        self.evict_expired();
        self.sessions
            .read()
            .map_err(|_| ApiError::Internal("session store poisoned".into()))?
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown session `{id}`")))
    }
}

fn lock(handle: &SessionHandle) -> Result<std::sync::MutexGuard<'_, Session>, ApiError> {
    handle
        .lock()
        .map_err(|_| ApiError::Internal("session lock poisoned".into()))
}

#[derive(Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub sessions: usize,
}

async fn healthz(State(app): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        sessions: app.session_count(),
    })
}

async fn list_models(State(app): State<AppState>) -> Json<Vec<ModelSummary>> {
    Json(app.registry.summaries())
}

async fn create_session(
    State(app): State<AppState>,
    Json(req): Json<CreateSessionRequest>,
) -> Result<(StatusCode, Json<SessionPayload>), ApiError> {
    app.evict_expired();
    let entry = app
        .registry
        .get(&req.model)
        .ok_or_else(|| ApiError::NotFound(format!("unknown model `{}`", req.model)))?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let session = Session::create(id.clone(), entry, &req)?;
    let payload = session.payload(entry, app.config.expose_truth);
    app.sessions
        .write()
        .map_err(|_| ApiError::Internal("session store poisoned".into()))?
        .insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(payload)))
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionState>, ApiError> {
    let handle = app.session(&id)?;
    let mut s = lock(&handle)?;
    s.touch();
    let entry = app
        .registry
        .get(&s.model_id)
        .ok_or_else(|| ApiError::Internal("session refers to a missing model".into()))?;
    Ok(Json(SessionState {
        session: s.payload(entry, app.config.expose_truth),
        trajectory: s.trajectory(app.config.expose_truth),
    }))
}

async fn intervene(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<InterventionRequest>,
) -> Result<Json<SessionPayload>, ApiError> {
    let handle = app.session(&id)?;
    let mut s = lock(&handle)?;
    let entry = app
        .registry
        .get(&s.model_id)
        .ok_or_else(|| ApiError::Internal("session refers to a missing model".into()))?;
    s.intervene(entry, &req)?;
    Ok(Json(s.payload(entry, app.config.expose_truth)))
}

async fn delete_session(State(app): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    app.evict_expired();
    let removed = app
        .sessions
        .write()
        .map_err(|_| ApiError::Internal("session store poisoned".into()))?
        .remove(&id);
    match removed {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::NotFound(format!("unknown session `{id}`"))),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/models", get(list_models))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/interventions", post(intervene))
        .with_state(state)
}

/// Serves until the process is stopped, sweeping expired sessions every minute.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let sweeper = state.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            sweeper.evict_expired();
        }
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
