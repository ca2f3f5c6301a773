//! JSON-over-HTTP sessions for stepping through interventions by hand.
//!
//! Endpoints: `POST /sessions`, `GET /sessions/{id}`,
//! `POST /sessions/{id}/interventions`, `DELETE /sessions/{id}`,
//! `GET /models`, `GET /healthz`. Payloads are described in `API.md`.

mod app;
mod error;
mod registry;
mod session;

pub use app::{router, serve, AppState, Health, ServiceConfig};
pub use error::ApiError;
pub use registry::{ModelEntry, ModelRegistry, ModelSummary};
pub use session::{
    parse_policy, CreateSessionRequest, InterventionRequest, InterventionView, Session, SessionPayload, SessionState,
    Suggestion, TruthView,
};
