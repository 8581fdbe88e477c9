//! HTTP+JSON endpoints.

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use townhall_core::persona::GatewayError;
use townhall_core::session::{SessionError, StagePayload};
use townhall_core::store::{export_conversations, export_demographics, export_responses, ExportFormat, StoreError};
use townhall_core::{build_report, DemographicStore, ReportOptions, SessionEngine, Stage, StageSubmission};

pub const ADMIN_TOKEN_ENV: &str = "CIVIC_ADMIN_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    OutOfOrder,
    Validation,
    Provider,
    NotFound,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    pub retryable: bool,
    #[serde(skip)]
    pub status: u16,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        let status = match code {
            ErrorCode::OutOfOrder => 409,
            ErrorCode::Validation => 422,
            ErrorCode::Provider => 502,
            ErrorCode::NotFound => 404,
            ErrorCode::Internal => 500,
        };
        Self { code, message: message.into(), retryable: false, status }
    }

    fn unauthorized() -> Self {
        Self { status: 401, ..Self::new(ErrorCode::NotFound, "unknown session or invalid token") }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let message = e.to_string();
        match e {
            SessionError::OutOfOrder { .. } | SessionError::AlreadyCompleted => ApiError::new(ErrorCode::OutOfOrder, message),
            SessionError::IncompleteStage(_)
            | SessionError::Validation(_)
            | SessionError::Ballot(_)
            | SessionError::DuplicateExternalId(_)
            | SessionError::EmptyExternalId
            | SessionError::ChatCapReached(_) => ApiError::new(ErrorCode::Validation, message),
            SessionError::NotFound(_) => ApiError::new(ErrorCode::NotFound, message),
            SessionError::Unauthorized => ApiError::unauthorized(),
            SessionError::Gateway(GatewayError::Provider(p)) => {
                ApiError { retryable: p.retryable(), ..ApiError::new(ErrorCode::Provider, message) }
            }
            SessionError::Gateway(GatewayError::EmptyInput) => ApiError::new(ErrorCode::Validation, message),
            SessionError::Gateway(_) | SessionError::Render(_) => ApiError::new(ErrorCode::Internal, message),
            SessionError::Store(_) => ApiError { retryable: true, ..ApiError::new(ErrorCode::Internal, message) },
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        ApiError::new(ErrorCode::Internal, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

pub struct AppState {
    pub engine: Arc<SessionEngine>,
    pub demographics: Option<Arc<DemographicStore>>,
    pub admin_token: Option<String>,
    pub report_options: ReportOptions,
}

type Shared = Arc<AppState>;

#[derive(Debug, Deserialize)]
pub struct CreateRequest {
    pub external_id: String,
}

/// Returned on session creation and accepted submissions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub accepted: bool,
    pub session_id: String,
    pub stage: Stage,
    pub completed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct ChatRequest {
    pub text: String,
}

#[derive(Debug, Deserialize)]
pub struct ExportQuery {
    pub format: Option<String>,
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers.get(header::AUTHORIZATION)?.to_str().ok()?.strip_prefix("Bearer ").map(str::trim)
}

fn authorize(state: &AppState, id: &str, headers: &HeaderMap) -> Result<(), ApiError> {
    let token = bearer(headers).ok_or_else(ApiError::unauthorized)?;
    state.engine.authorize(id, token).map_err(ApiError::from)
}

fn authorize_admin(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    match &state.admin_token {
        Some(expected) if bearer(headers) != Some(expected.as_str()) => Err(ApiError::unauthorized()),
        _ => Ok(()),
    }
}

/// Engine calls may block on the store or the provider.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))?
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn create_session(State(state): State<Shared>, Json(req): Json<CreateRequest>) -> Result<Json<Ack>, ApiError> {
    blocking(move || {
        let created = state.engine.create_session(&req.external_id)?;
        Ok(Json(Ack {
            accepted: true,
            session_id: created.session.session_id,
            stage: created.session.stage,
            completed: false,
            token: Some(created.token),
        }))
    })
    .await
}

async fn payload(
    State(state): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<Json<StagePayload>, ApiError> {
    authorize(&state, &id, &headers)?;
    blocking(move || Ok(Json(state.engine.current_payload(&id)?))).await
}

async fn submit(
    State(state): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: axum::body::Bytes,
) -> Result<Json<Ack>, ApiError> {
    authorize(&state, &id, &headers)?;
    let submission: StageSubmission =
        serde_json::from_slice(&body).map_err(|e| ApiError::new(ErrorCode::Validation, e.to_string()))?;
    blocking(move || {
        let stage = state.engine.advance(&id, &submission)?;
        let completed = state.engine.session(&id)?.completed;
        Ok(Json(Ack { accepted: true, session_id: id, stage, completed, token: None }))
    })
    .await
}

async fn chat(
    State(state): State<Shared>,
    Path((id, persona)): Path<(String, String)>,
    headers: HeaderMap,
    body: axum::body::Bytes,
) -> Result<Json<StagePayload>, ApiError> {
    authorize(&state, &id, &headers)?;
    let req: ChatRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::new(ErrorCode::Validation, e.to_string()))?;
    blocking(move || {
        state.engine.chat(&id, &persona, &req.text)?;
        Ok(Json(state.engine.current_payload(&id)?))
    })
    .await
}

async fn export(
    State(state): State<Shared>,
    Path(store): Path<String>,
    Query(q): Query<ExportQuery>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    authorize_admin(&state, &headers)?;
    let format: ExportFormat = q.format.as_deref().unwrap_or("jsonl").parse()?;
    blocking(move || {
        let mut buf = Vec::new();
        match store.as_str() {
            "responses" => {
                let records = state.engine.store().responses()?;
                export_responses(&records, &state.engine.study().categories, format, &mut buf)?;
            }
            "conversations" => export_conversations(&state.engine.store().responses()?, &mut buf)?,
            "demographics" => {
                let demo = state
                    .demographics
                    .as_ref()
                    .ok_or_else(|| ApiError::new(ErrorCode::NotFound, "no demographic store configured"))?;
                export_demographics(&demo.records()?, format, &mut buf)?;
            }
            other => return Err(ApiError::new(ErrorCode::NotFound, format!("unknown store `{other}`"))),
        }
        let content_type = match format {
            ExportFormat::Csv if store != "conversations" => "text/csv; charset=utf-8",
            _ => "application/x-ndjson; charset=utf-8",
        };
        Ok(([(header::CONTENT_TYPE, content_type)], buf).into_response())
    })
    .await
}

async fn report(State(state): State<Shared>, headers: HeaderMap) -> Result<Response, ApiError> {
    authorize_admin(&state, &headers)?;
    blocking(move || {
        let store = state.engine.store();
        let report = build_report(state.engine.study(), &store.responses()?, &store.audit_records()?, &state.report_options)
            .map_err(|e| ApiError::new(ErrorCode::Validation, e.to_string()))?;
        Ok(([(header::CONTENT_TYPE, "application/json")], report.to_json()).into_response())
    })
    .await
}

async fn fallback() -> ApiError {
    ApiError::new(ErrorCode::NotFound, "no such endpoint")
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/payload", get(payload))
        .route("/sessions/{id}/submit", post(submit))
        .route("/sessions/{id}/chat/{persona}", post(chat))
        .route("/admin/export/{store}", get(export))
        .route("/admin/report", post(report))
        .fallback(fallback)
        .with_state(Arc::new(state))
}

/// Serves until ctrl-c. In-flight requests finish before returning.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        })
        .await
}
