//! HTTP front end of the lab. Every handler parses its body into the shared
//! request types, runs the matching [`Lab`] method on a blocking thread and
//! answers with an [`Envelope`] or a structured [`ApiError`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;

use pslab_core::api::{ApiError, Envelope, ExperimentRequest, ForwardRequest, GridRequest, Lab, PatchscopeRequest, TokenizeRequest};
use pslab_core::Error;

/// Shared, read-only lab plus the table of cancellation flags.
pub struct AppState {
    lab: Lab,
    cancels: Mutex<HashMap<String, Arc<AtomicBool>>>,
}

impl AppState {
    pub fn new(lab: Lab) -> Arc<Self> {
        Arc::new(Self {
            lab,
            cancels: Mutex::new(HashMap::new()),
        })
    }

    pub fn lab(&self) -> &Lab {
        &self.lab
    }

    fn flag(&self, token: &str) -> Arc<AtomicBool> {
        let mut map = self.cancels.lock().unwrap_or_else(|p| p.into_inner());
        Arc::clone(map.entry(token.to_string()).or_default())
    }

    fn release(&self, token: &str) {
        let mut map = self.cancels.lock().unwrap_or_else(|p| p.into_inner());
        map.remove(token);
    }
}

pub struct ApiFailure(ApiError);

impl From<Error> for ApiFailure {
    fn from(e: Error) -> Self {
        ApiFailure(ApiError::from(e))
    }
}

impl IntoResponse for ApiFailure {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<Envelope<T>>, ApiFailure>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiFailure> {
    serde_json::from_slice(body).map_err(|e| {
        ApiFailure(ApiError {
            code: "json".into(),
            message: format!("invalid request body: {e}"),
            offending_field: None,
        })
    })
}

async fn blocking<T, F>(f: F) -> Result<T, ApiFailure>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiFailure> + Send + 'static,
{
    tokio::task::spawn_blocking(f).await.unwrap_or_else(|e| {
        Err(ApiFailure(ApiError {
            code: "internal".into(),
            message: format!("worker failed: {e}"),
            offending_field: None,
        }))
    })
}

fn envelope<R: Serialize, T: Serialize>(req: &R, data: T) -> ApiResult<T> {
    Ok(Json(Envelope::new(req, data)?))
}

async fn models(State(state): State<Arc<AppState>>) -> ApiResult<Vec<pslab_core::api::ModelInfo>> {
    envelope(&serde_json::Value::Null, state.lab.models())
}

async fn tokenize(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<pslab_core::api::TokenizeResponse> {
    let req: TokenizeRequest = parse(&body)?;
    let data = state.lab.tokenize(&req)?;
    envelope(&req, data)
}

async fn forward(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<pslab_core::api::ForwardResponse> {
    let req: ForwardRequest = parse(&body)?;
    blocking(move || {
        let data = state.lab.forward(&req)?;
        envelope(&req, data)
    })
    .await
}

async fn patchscope(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<pslab_core::api::PatchscopeResponse> {
    let req: PatchscopeRequest = parse(&body)?;
    blocking(move || {
        let data = state.lab.patchscope(&req, None)?;
        envelope(&req, data)
    })
    .await
}

async fn grid(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<pslab_core::patchscope::Grid> {
    let req: GridRequest = parse(&body)?;
    blocking(move || {
        let flag = req.cancel_token.as_deref().map(|t| state.flag(t));
        let result = state.lab.grid(&req, flag.as_deref());
        if let Some(t) = &req.cancel_token {
            state.release(t);
        }
        envelope(&req.spec, result?)
    })
    .await
}

async fn experiment(
    State(state): State<Arc<AppState>>,
    Path(name): Path<String>,
    body: Bytes,
) -> ApiResult<pslab_core::zoo::Report> {
    let req: ExperimentRequest = if body.iter().all(u8::is_ascii_whitespace) {
        ExperimentRequest::default()
    } else {
        parse(&body)?
    };
    blocking(move || {
        let spec = state.lab.experiment_spec(&name, &req)?;
        let report = state.lab.experiment(&name, &req)?;
        envelope(&spec, report)
    })
    .await
}

async fn cancel(State(state): State<Arc<AppState>>, Path(token): Path<String>) -> StatusCode {
    state.flag(&token).store(true, Ordering::SeqCst);
    StatusCode::ACCEPTED
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/models", get(models))
        .route("/v1/tokenize", post(tokenize))
        .route("/v1/forward", post(forward))
        .route("/v1/patchscope", post(patchscope))
        .route("/v1/grid", post(grid))
        .route("/v1/experiments/{name}", post(experiment))
        .route("/v1/cancel/{token}", post(cancel))
        .with_state(state)
}

/// Serves until the listener fails or the process receives ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
