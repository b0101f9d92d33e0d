//! HTTP transport for feedback sessions.
//!
//! | method | path                           | body            | reply            |
//! |--------|--------------------------------|-----------------|------------------|
//! | POST   | `/v1/sessions`                 | `CreateRequest` | `CandidateView`  |
//! | GET    | `/v1/sessions/{id}`            |                 | `CandidateView`  |
//! | POST   | `/v1/sessions/{id}/feedback`   | `Submission`    | `CandidateView`  |
//! | GET    | `/v1/sessions/{id}/history`    |                 | `HistoryView`    |
//!
//! Errors reply with `ErrorBody`: 404 unknown session, 409 stale nonce or
//! completed session, 422 invalid input or config, 500 otherwise.

use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hilplan::bo::Mode;
use hilplan::config::RunConfig;
use hilplan::exec::Exec;
use hilplan::service::{SessionStore, Submission, SCHEMA_VERSION};
use hilplan::Error;
use serde::{Deserialize, Serialize};

/// Overrides applied to the server's base config for a new session.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CreateRequest {
    pub mode: Option<Mode>,
    pub bias: Option<bool>,
    pub seed: Option<u64>,
    pub n_query: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub schema_version: u32,
    pub error: String,
    pub message: String,
}

pub struct ApiError(Error);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            Error::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            Error::StaleNonce => (StatusCode::CONFLICT, "stale_nonce"),
            Error::SessionComplete => (StatusCode::CONFLICT, "complete"),
            Error::Invalid { .. } | Error::Config { .. } | Error::Parse { .. } => {
                (StatusCode::UNPROCESSABLE_ENTITY, "invalid")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let body = ErrorBody {
            schema_version: SCHEMA_VERSION,
            error: kind.into(),
            message: self.0.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(Error::Invalid {
            field: "body".into(),
            reason: e.body_text(),
        })
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<SessionStore>,
    pub base: Arc<RunConfig>,
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Run optimizer work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, Error> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(Error::Session(format!("worker failed: {e}"))))?
        .map(Json)
        .map_err(ApiError)
}

async fn create(
    State(app): State<AppState>,
    body: Bytes,
) -> ApiResult<hilplan::service::CandidateView> {
    let req: CreateRequest = if body.is_empty() {
        CreateRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| Error::Invalid {
            field: "body".into(),
            reason: e.to_string(),
        })?
    };
    let mut cfg = (*app.base).clone();
    if let Some(m) = req.mode {
        cfg.bo.mode = m;
    }
    if let Some(b) = req.bias {
        cfg.bo.bias_enabled = b;
    }
    if let Some(s) = req.seed {
        cfg.bo.seed = s;
    }
    if let Some(n) = req.n_query {
        cfg.bo.n_query = n;
        cfg.bo.n_m = cfg.bo.n_m.min(n.max(1));
    }
    blocking(move || app.store.create(cfg)).await
}

async fn candidate(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<hilplan::service::CandidateView> {
    Ok(Json(app.store.candidate(&id)?))
}

async fn submit(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<Submission>, JsonRejection>,
) -> ApiResult<hilplan::service::CandidateView> {
    let Json(sub) = body?;
    blocking(move || app.store.submit(&id, &sub)).await
}

async fn history(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<hilplan::service::HistoryView> {
    Ok(Json(app.store.history(&id)?))
}

pub fn router(store: Arc<SessionStore>, base: RunConfig) -> Router {
    let state = AppState {
        store,
        base: Arc::new(base),
    };
    Router::new()
        .route("/v1/sessions", post(create))
        .route("/v1/sessions/{id}", get(candidate))
        .route("/v1/sessions/{id}/feedback", post(submit))
        .route("/v1/sessions/{id}/history", get(history))
        .with_state(state)
}

/// Serve until interrupted, resuming any sessions saved under `dir`.
pub fn serve(cfg: RunConfig, addr: &str, dir: &Path, exec: Exec) -> Result<(), Error> {
    let store = Arc::new(SessionStore::open(dir, exec)?);
    let io = |e: std::io::Error| Error::Io {
        path: addr.to_string(),
        source: e,
    };
    let rt = tokio::runtime::Runtime::new().map_err(io)?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(io)?;
        eprintln!(
            "serving {} resumed sessions on http://{}",
            store.ids().len(),
            listener.local_addr().map_err(io)?
        );
        axum::serve(listener, router(store, cfg))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(io)
    })
}
