//! HTTP facade for the playground.
//!
//! `/api/*` serves interactive queries; `/v1/*` exposes the configured
//! backend over the remote wire protocol so that a [`RemoteBackend`] can
//! point at a running service.
//!
//! [`RemoteBackend`]: multiangle::backend::RemoteBackend

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use multiangle::backend::{
    Backend, DecodeOptions, ForceRequest, ForceResponse, GenerateRequest, GenerateResponse,
};
use multiangle::codec::OrderPolicy;
use multiangle::harness::{rank_candidates, Query, QueryOutcome};
use multiangle::slots::{Angle, Instance, SlotRegistry};
use multiangle::Error;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

/// Shared, immutable service configuration.
#[derive(Clone)]
pub struct AppState {
    pub registry: Arc<SlotRegistry>,
    pub backend: Arc<dyn Backend>,
    pub angles: Arc<Vec<Angle>>,
    pub policy: OrderPolicy,
}

impl AppState {
    pub fn new(registry: SlotRegistry, backend: Arc<dyn Backend>) -> Self {
        Self {
            registry: Arc::new(registry),
            backend,
            angles: Arc::new(Vec::new()),
            policy: OrderPolicy::AsGiven,
        }
    }

    pub fn with_angles(mut self, angles: Vec<Angle>) -> Self {
        self.angles = Arc::new(angles);
        self
    }

    pub fn with_policy(mut self, policy: OrderPolicy) -> Self {
        self.policy = policy;
        self
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct AskRequest {
    pub slots: BTreeMap<String, String>,
    pub targets: Vec<String>,
    #[serde(default)]
    pub decode: Option<DecodeOptions>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct RankRequest {
    pub slots: BTreeMap<String, String>,
    pub candidates: Vec<String>,
    #[serde(default)]
    pub include_m: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct RankedCandidate {
    pub candidate: String,
    pub probability: f64,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct SlotInfo {
    pub name: String,
    pub abbrev: char,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct Meta {
    pub slots: Vec<SlotInfo>,
    pub angles: Vec<String>,
    pub backend: String,
    /// `as_given` or `scrambled`
    pub order: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct ErrorBody {
    pub error: String,
    pub detail: String,
}

/// Error response: 502 for backend failures, 500 for an unusable model,
/// 400 for anything wrong with the request.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn bad_request(error: &str, detail: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody {
                error: error.to_string(),
                detail: detail.into(),
            },
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::UnknownSlot(_) | Error::UnknownAbbrev(_) => "unknown_slot",
        Error::MarkerCollision(_) => "marker_collision",
        Error::EmptyValue => "empty_value",
        Error::OverlappingSlots(_) => "overlapping_slots",
        Error::EmptyTargets => "empty_targets",
        Error::MissingSourceSlot { .. } => "missing_source_slot",
        Error::InvalidDecodeOptions(_) => "invalid_decode_options",
        Error::NoCandidates => "no_candidates",
        Error::DuplicateCandidates(_) => "duplicate_candidates",
        Error::EmptyForcedOutput => "empty_forced_output",
        Error::BackendUnavailable(_) => "backend_unavailable",
        Error::EmptyModel => "empty_model",
        _ => "invalid_request",
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = if e.is_backend() {
            StatusCode::BAD_GATEWAY
        } else if matches!(e, Error::EmptyModel) {
            StatusCode::INTERNAL_SERVER_ERROR
        } else {
            StatusCode::BAD_REQUEST
        };
        Self {
            status,
            body: ErrorBody {
                error: error_kind(&e).to_string(),
                detail: e.to_string(),
            },
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::bad_request("malformed_body", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            log::warn!("{}: {}", self.body.error, self.body.detail);
        }
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Runs blocking backend work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> multiangle::Result<T> + Send + 'static) -> Result<T, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: ErrorBody {
                error: "internal".into(),
                detail: e.to_string(),
            },
        }),
    }
}

async fn ask(State(state): State<AppState>, body: Result<Json<AskRequest>, JsonRejection>) -> ApiResult<QueryOutcome> {
    let Json(req) = body?;
    let query = Query::new(&state.registry, &req.slots, &req.targets)?;
    let opts = req.decode.unwrap_or_default();
    let outcome = blocking(move || query.run(&state.registry, state.backend.as_ref(), state.policy, &opts)).await?;
    Ok(Json(outcome))
}

async fn rank(
    State(state): State<AppState>,
    body: Result<Json<RankRequest>, JsonRejection>,
) -> ApiResult<Vec<RankedCandidate>> {
    let Json(req) = body?;
    let mut values = Vec::with_capacity(req.slots.len());
    for (k, v) in &req.slots {
        values.push((state.registry.resolve(k)?.name.clone(), v.clone()));
    }
    let instance = Instance::new(&state.registry, "rank", values)?;
    let ranking = blocking(move || {
        rank_candidates(
            &state.registry,
            &instance,
            &req.candidates,
            state.backend.as_ref(),
            req.include_m,
            state.policy,
        )
    })
    .await?;
    Ok(Json(
        ranking
            .into_iter()
            .map(|c| RankedCandidate {
                candidate: c.candidate,
                probability: c.probability,
                logprob: c.logprob_sum,
            })
            .collect(),
    ))
}

async fn meta(State(state): State<AppState>) -> ApiResult<Meta> {
    let angles = state
        .angles
        .iter()
        .map(|a| a.notation(&state.registry))
        .collect::<multiangle::Result<Vec<_>>>()?;
    Ok(Json(Meta {
        slots: state
            .registry
            .entries()
            .iter()
            .map(|d| SlotInfo {
                name: d.name.clone(),
                abbrev: d.abbrev,
            })
            .collect(),
        angles,
        backend: state.backend.name().to_string(),
        order: match state.policy {
            OrderPolicy::AsGiven => "as_given",
            OrderPolicy::Scrambled { .. } => "scrambled",
        }
        .to_string(),
    }))
}

async fn wire_generate(
    State(state): State<AppState>,
    body: Result<Json<GenerateRequest>, JsonRejection>,
) -> ApiResult<GenerateResponse> {
    let Json(req) = body?;
    let output = blocking(move || {
        req.options.validate()?;
        state.backend.generate(&req.input, &req.options)
    })
    .await?
    .output;
    Ok(Json(GenerateResponse { output }))
}

async fn wire_force(
    State(state): State<AppState>,
    body: Result<Json<ForceRequest>, JsonRejection>,
) -> ApiResult<ForceResponse> {
    let Json(req) = body?;
    let token_logprobs = blocking(move || state.backend.force_score(&req.input, &req.output)).await?;
    Ok(Json(ForceResponse { token_logprobs }))
}

/// All routes, with permissive CORS for a locally served UI.
pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/ask", post(ask))
        .route("/api/rank", post(rank))
        .route("/api/meta", get(meta))
        .route("/v1/generate", post(wire_generate))
        .route("/v1/force", post(wire_force))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
