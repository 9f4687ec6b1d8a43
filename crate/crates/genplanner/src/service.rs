//! HTTP routes over a [`Planner`].

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use genplanner_core::hitl::TurnKind;
use genplanner_core::Error;

use crate::payload::{CreateSessionRequest, CreateSessionResponse, ErrorBody, HistoryPayload, IterationPayload, TextRequest};
use crate::planner::Planner;

#[derive(Clone)]
pub struct AppState {
    planner: Arc<Planner>,
    locks: Arc<Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>>,
}

impl AppState {
    pub fn new(planner: Planner) -> Self {
        Self { planner: Arc::new(planner), locks: Arc::default() }
    }

    pub fn planner(&self) -> &Planner {
        &self.planner
    }

    fn session_lock(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(id.to_string()).or_default().clone()
    }
}

pub struct ApiError(StatusCode, ErrorBody);

impl From<Error> for ApiError {
    fn from(err: Error) -> Self {
        let (status, body) = ErrorBody::from_error(&err);
        Self(StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR), body)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(rejection: JsonRejection) -> Self {
        Self(rejection.status(), ErrorBody::new("bad_request", rejection.body_text()))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

async fn blocking<R: Send + 'static>(f: impl FnOnce() -> genplanner_core::Result<R> + Send + 'static) -> Result<R, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => Ok(r?),
        Err(e) => Err(ApiError(StatusCode::INTERNAL_SERVER_ERROR, ErrorBody::new("internal", e.to_string()))),
    }
}

async fn create_session(
    State(state): State<AppState>,
    body: Result<Json<CreateSessionRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<CreateSessionResponse>), ApiError> {
    let Json(req) = body?;
    let planner = state.planner.clone();
    let meta = blocking(move || planner.create_session(&req)).await?;
    tracing::info!(session = %meta.id, "session created");
    Ok((StatusCode::CREATED, Json(CreateSessionResponse { session_id: meta.id, context_id: meta.context_id, history_len: 0 })))
}

async fn turn(state: AppState, id: String, body: Result<Json<TextRequest>, JsonRejection>, kind: TurnKind) -> Result<Json<IterationPayload>, ApiError> {
    let Json(req) = body?;
    let lock = state.session_lock(&id);
    let _guard = lock.lock().await;
    let planner = state.planner.clone();
    let sid = id.clone();
    let iteration = blocking(move || planner.submit(&sid, &req.text, kind)).await?;
    tracing::info!(session = %id, index = iteration.index, reward = iteration.reward, "turn appended");
    Ok(Json(IterationPayload::new(&id, &iteration)))
}

async fn instruction(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<TextRequest>, JsonRejection>,
) -> Result<Json<IterationPayload>, ApiError> {
    turn(state, id, body, TurnKind::Instruction).await
}

async fn feedback(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<TextRequest>, JsonRejection>,
) -> Result<Json<IterationPayload>, ApiError> {
    turn(state, id, body, TurnKind::Feedback).await
}

async fn history(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<HistoryPayload>, ApiError> {
    let lock = state.session_lock(&id);
    let _guard = lock.lock().await;
    let planner = state.planner.clone();
    let sid = id.clone();
    let session = blocking(move || planner.session(&sid)).await?;
    let iterations = session.history.iter().map(|it| IterationPayload::new(&id, it)).collect();
    Ok(Json(HistoryPayload { session_id: id, status: session.meta.status, iterations }))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/instruction", post(instruction))
        .route("/sessions/{id}/feedback", post(feedback))
        .route("/sessions/{id}/history", get(history))
        .with_state(state)
}

/// Binds `host:port` from the planner's config and serves until the task is
/// cancelled.
pub async fn serve(planner: Planner) -> std::io::Result<()> {
    let addr = format!("{}:{}", planner.config.host, planner.config.port);
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(AppState::new(planner))).await
}
