//! HTTP/JSON front end for the simulation engine.
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | GET | `/healthz` | | `ok` |
//! | POST | `/v1/weights` | raw `GEPW` bytes | [`WeightsInfo`] |
//! | GET | `/v1/weights/{id}` | | [`WeightsInfo`] |
//! | GET | `/v1/weights/{id}/constellation` | | constellation JSON |
//! | POST | `/v1/simulate` | [`SimulateRequest`] | `SweepResult` |
//! | POST | `/v1/detect` | [`DetectRequest`] | `DetectionResult` |
//! | POST | `/v1/complexity` | [`ComplexityRequest`] | `ComplexityReport` |
//!
//! Failures carry an [`ErrorBody`] whose `exit_code` matches what the command
//! line would report for the same error.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::net::TcpListener;

use gepnet_core::channel::ConstellationJson;
use gepnet_core::complexity::ComplexityReport;
use gepnet_core::detectors::DetectionResult;
use gepnet_core::service::{
    self, ComplexityRequest, DetectRequest, ErrorBody, LoadedWeights, SimulateRequest, WeightsInfo,
};
use gepnet_core::sweep::SweepResult;
use gepnet_core::Error;

const MAX_UPLOAD: usize = 256 << 20;

/// Uploaded weight bundles, keyed by the id handed back on upload.
#[derive(Clone, Default)]
pub struct AppState {
    weights: Arc<RwLock<HashMap<String, Arc<LoadedWeights>>>>,
    next_id: Arc<AtomicU64>,
}

impl AppState {
    fn lookup(&self, id: &str) -> Result<Arc<LoadedWeights>, ApiError> {
        self.weights
            .read()
            .expect("weights lock poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    fn lookup_opt(&self, id: Option<&str>) -> Result<Option<Arc<LoadedWeights>>, ApiError> {
        id.map(|id| self.lookup(id)).transpose()
    }
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn not_found(id: &str) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            body: ErrorBody {
                error: format!("no weights with id {id:?}"),
                exit_code: 2,
            },
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let exit_code = e.exit_code();
        let status = match exit_code {
            2 => StatusCode::BAD_REQUEST,
            3 => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            body: ErrorBody {
                error: e.to_string(),
                exit_code,
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Run CPU-bound work off the async executor.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, Error> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        body: ErrorBody {
            error: format!("worker task failed: {e}"),
            exit_code: 4,
        },
    })?
    .map_err(ApiError::from)
}

async fn healthz() -> &'static str {
    "ok"
}

async fn upload_weights(State(state): State<AppState>, body: Bytes) -> ApiResult<WeightsInfo> {
    let loaded = blocking(move || LoadedWeights::from_bytes(&body)).await?;
    let id = format!("w{}", state.next_id.fetch_add(1, Ordering::Relaxed) + 1);
    let info = loaded.info(&id);
    state
        .weights
        .write()
        .expect("weights lock poisoned")
        .insert(id.clone(), Arc::new(loaded));
    tracing::info!(%id, order = info.order, "weights uploaded");
    Ok(Json(info))
}

async fn weights_info(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<WeightsInfo> {
    Ok(Json(state.lookup(&id)?.info(&id)))
}

async fn weights_constellation(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<ConstellationJson> {
    let loaded = state.lookup(&id)?;
    Ok(Json(ConstellationJson::from(&loaded.weights.constellation)))
}

async fn simulate(
    State(state): State<AppState>,
    Json(req): Json<SimulateRequest>,
) -> ApiResult<SweepResult> {
    let loaded = state.lookup_opt(req.weights.as_deref())?;
    let result = blocking(move || {
        service::simulate(&req, loaded.as_deref().map(|l| &l.weights))
    })
    .await?;
    Ok(Json(result))
}

async fn detect(
    State(state): State<AppState>,
    Json(req): Json<DetectRequest>,
) -> ApiResult<DetectionResult> {
    let loaded = state.lookup_opt(req.weights.as_deref())?;
    let result = blocking(move || {
        service::detect_one(&req, loaded.as_deref().map(|l| &l.weights))
    })
    .await?;
    Ok(Json(result))
}

async fn complexity(Json(req): Json<ComplexityRequest>) -> ApiResult<ComplexityReport> {
    Ok(Json(service::complexity(&req)?))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/weights", post(upload_weights))
        .route("/v1/weights/{id}", get(weights_info))
        .route("/v1/weights/{id}/constellation", get(weights_constellation))
        .route("/v1/simulate", post(simulate))
        .route("/v1/detect", post(detect))
        .route("/v1/complexity", post(complexity))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(state)
}

/// Bind `addr` and return the listener together with the bound address,
/// which differs from `addr` when port 0 was requested.
pub async fn bind(addr: SocketAddr) -> std::io::Result<(TcpListener, SocketAddr)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((listener, local))
}

pub async fn serve(listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(AppState::default())).await
}

/// Log to stderr, filtered by `RUST_LOG` (default `info`).
pub fn init_tracing() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}
