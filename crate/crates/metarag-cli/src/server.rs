//! HTTP service: POST /v1/detect and GET /health on top of a shared detector.

use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use metarag::model::{DetectionInput, RunConfig};
use metarag::pipeline::{DetectError, Detector};

/// Simultaneous detection runs the service accepts before answering 503.
pub const DEFAULT_CAPACITY: usize = 32;

pub struct AppState {
    pub detector: Detector,
    pub capacity: Semaphore,
}

/// Per-request overrides. Only scalar tuning knobs are accepted; unknown
/// fields (in particular anything resembling backend wiring) are rejected
/// with a 400 so a request can never redirect model traffic.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_variants: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_general: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_identity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub escalation_threshold: Option<f64>,
}

impl ConfigOverrides {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut config = base.clone();
        if let Some(n) = self.n_variants {
            config.n_variants = n;
        }
        if let Some(t) = self.temperature {
            config.temperature = t;
        }
        if let Some(t) = self.threshold_general {
            config.threshold_general = t;
        }
        if let Some(t) = self.threshold_identity {
            config.threshold_identity = t;
        }
        if let Some(t) = self.escalation_threshold {
            config.escalation_threshold = t;
        }
        config
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectBody {
    pub query: String,
    pub context: Vec<String>,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_overrides: Option<ConfigOverrides>,
}

pub fn router(detector: Detector) -> Router {
    let state = Arc::new(AppState { detector, capacity: Semaphore::new(DEFAULT_CAPACITY) });
    Router::new()
        .route("/health", get(health))
        .route("/v1/detect", post(detect))
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "schema_version": "1",
        "verifier_members": state.detector.config().verifier.members().len(),
    }))
}

fn error_body(status: StatusCode, message: String) -> Response {
    (status, Json(serde_json::json!({ "error": message }))).into_response()
}

async fn detect(
    State(state): State<Arc<AppState>>,
    body: Result<Json<DetectBody>, axum::extract::rejection::JsonRejection>,
) -> Response {
    // Schema violations (including disallowed override fields) are client
    // errors, not unprocessable-entity.
    let Json(body) = match body {
        Ok(body) => body,
        Err(rejection) => return error_body(StatusCode::BAD_REQUEST, rejection.body_text()),
    };
    let _permit = match state.capacity.try_acquire() {
        Ok(permit) => permit,
        Err(_) => {
            return error_body(StatusCode::SERVICE_UNAVAILABLE, "over capacity".to_string())
        }
    };

    let config = match &body.config_overrides {
        Some(overrides) => overrides.apply(state.detector.config()),
        None => state.detector.config().clone(),
    };
    let detector = match state.detector.with_config(config) {
        Ok(detector) => detector,
        Err(e) => return error_body(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let input = DetectionInput { query: body.query, context: body.context, answer: body.answer };

    let result = tokio::task::spawn_blocking(move || detector.detect(&input)).await;
    match result {
        Ok(Ok(report)) => (StatusCode::OK, Json(report)).into_response(),
        Ok(Err(e)) => {
            let status = match &e {
                DetectError::Validation(_) | DetectError::Config(_) => StatusCode::BAD_REQUEST,
                _ => StatusCode::BAD_GATEWAY,
            };
            error_body(status, e.to_string())
        }
        Err(join) => error_body(StatusCode::BAD_GATEWAY, join.to_string()),
    }
}

/// Binds and serves until the process is killed. The listener is bound
/// before this is awaited so callers can learn the ephemeral port.
pub async fn serve(listener: tokio::net::TcpListener, detector: Detector) -> anyhow::Result<()> {
    axum::serve(listener, router(detector)).await?;
    Ok(())
}
