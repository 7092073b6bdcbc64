//! The tracker's JSON protocol over HTTP.
//!
//! Commands are applied one at a time through a mutex. When a state file is
//! configured the snapshot is written before the response goes out.

use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use graffiti_core::tracker::wire::{AnnounceRequest, ErrorBody, FailureRequest, PairsRequest, ReportRequest};
use graffiti_core::tracker::{ApiError, TrackerApi, TrackerService};
use graffiti_core::Timestamp;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub struct TrackerState {
    service: Mutex<TrackerService>,
    state_file: Option<PathBuf>,
}

impl TrackerState {
    pub fn new(service: TrackerService, state_file: Option<PathBuf>) -> Arc<Self> {
        Arc::new(TrackerState { service: Mutex::new(service), state_file })
    }

    pub fn lock(&self) -> MutexGuard<'_, TrackerService> {
        self.service.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Writes the snapshot atomically when a state file is configured.
    pub fn persist(&self, service: &TrackerService) -> std::io::Result<()> {
        let Some(path) = &self.state_file else { return Ok(()) };
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, service.snapshot_json())?;
        std::fs::rename(tmp, path)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdvanceRequest {
    pub seconds: Timestamp,
}

struct Failure(StatusCode, ErrorBody);

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

fn status_of(code: &str) -> StatusCode {
    match code {
        "NOT_TRACKED" | "UNKNOWN_PEER" | "UNKNOWN_REPLICA" => StatusCode::NOT_FOUND,
        "STALE_PAIR" | "DUPLICATE_LOCATION" => StatusCode::CONFLICT,
        "THROTTLED" => StatusCode::TOO_MANY_REQUESTS,
        "BANNED" => StatusCode::FORBIDDEN,
        "PROXY_UNAVAILABLE" => StatusCode::SERVICE_UNAVAILABLE,
        _ => StatusCode::BAD_REQUEST,
    }
}

fn failure(e: ApiError) -> Failure {
    match e {
        ApiError::Tracker(body) => Failure(status_of(&body.error_code), body),
        ApiError::Transport(m) => Failure(
            StatusCode::SERVICE_UNAVAILABLE,
            ErrorBody { error_code: "PROXY_UNAVAILABLE".into(), message: m },
        ),
    }
}

fn io_failure(e: std::io::Error) -> Failure {
    Failure(
        StatusCode::INTERNAL_SERVER_ERROR,
        ErrorBody { error_code: "STATE_WRITE".into(), message: e.to_string() },
    )
}

/// Runs one command off the async workers, since verification fetches block.
async fn command<T, F>(state: Arc<TrackerState>, mutating: bool, f: F) -> Result<Json<T>, Failure>
where
    T: Serialize + Send + 'static,
    F: FnOnce(&mut TrackerService) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || {
        let mut service = state.lock();
        let out = f(&mut service);
        // Refused commands can still move state (strikes, bans).
        if mutating {
            state.persist(&service).map_err(io_failure)?;
        }
        out.map(Json).map_err(failure)
    })
    .await
    .expect("tracker command panicked")
}

async fn announce(State(s): State<Arc<TrackerState>>, Json(req): Json<AnnounceRequest>) -> Result<Response, Failure> {
    Ok(command(s, true, move |t| t.announce(&req)).await?.into_response())
}

async fn request(State(s): State<Arc<TrackerState>>, Json(req): Json<PairsRequest>) -> Result<Response, Failure> {
    Ok(command(s, true, move |t| t.request_pairs(&req)).await?.into_response())
}

async fn report(State(s): State<Arc<TrackerState>>, Json(req): Json<ReportRequest>) -> Result<Response, Failure> {
    Ok(command(s, true, move |t| t.report(&req)).await?.into_response())
}

async fn fail(State(s): State<Arc<TrackerState>>, Json(req): Json<FailureRequest>) -> Result<Response, Failure> {
    Ok(command(s, true, move |t| t.failure(&req)).await?.into_response())
}

async fn status(State(s): State<Arc<TrackerState>>) -> Result<Response, Failure> {
    Ok(command(s, false, |t| t.status()).await?.into_response())
}

async fn manifest(State(s): State<Arc<TrackerState>>) -> Result<Response, Failure> {
    Ok(command(s, false, |t| t.manifest()).await?.into_response())
}

async fn replicas(State(s): State<Arc<TrackerState>>) -> Result<Response, Failure> {
    Ok(command(s, false, |t| Ok(t.replicas())).await?.into_response())
}

async fn advance(State(s): State<Arc<TrackerState>>, Json(req): Json<AdvanceRequest>) -> Result<Response, Failure> {
    Ok(command(s, true, move |t| Ok(json!({ "now": t.advance(req.seconds) }))).await?.into_response())
}

pub fn tracker_router(state: Arc<TrackerState>) -> Router {
    Router::new()
        .route("/announce", post(announce))
        .route("/request", post(request))
        .route("/report", post(report))
        .route("/failure", post(fail))
        .route("/status", get(status))
        .route("/manifest", get(manifest))
        .route("/replicas", get(replicas))
        .route("/admin/advance", post(advance))
        .with_state(state)
}
