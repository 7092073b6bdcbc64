//! Every mock site behind one listener, multiplexed by `/site/<id>/...`.

use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use graffiti_core::sitehost::{EditRequest, PopulationSpec, RefusalReason, SiteError, SiteHost, SiteSummary};
use graffiti_core::Timestamp;
use serde::{Deserialize, Serialize};
use serde_json::json;

/// JSON error body for every non-page failure.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<RefusalReason>,
    pub message: String,
}

impl SiteErrorBody {
    pub fn from_error(e: &SiteError) -> Self {
        let (error, reason) = match e {
            SiteError::NoSuchSite(_) => ("no_such_site", None),
            SiteError::SiteDown => ("site_down", None),
            SiteError::PageMissing => ("page_missing", None),
            SiteError::TitleTaken => ("title_taken", None),
            SiteError::InvalidTitle(_) => ("invalid_title", None),
            SiteError::Refused(r) => ("refused", Some(*r)),
        };
        SiteErrorBody { error: error.to_owned(), reason, message: e.to_string() }
    }

    /// Rebuilds the error; unknown codes yield `None`.
    pub fn to_error(&self, site_id: u32, title: &str) -> Option<SiteError> {
        Some(match self.error.as_str() {
            "no_such_site" => SiteError::NoSuchSite(site_id),
            "site_down" => SiteError::SiteDown,
            "page_missing" => SiteError::PageMissing,
            "title_taken" => SiteError::TitleTaken,
            "invalid_title" => SiteError::InvalidTitle(title.to_owned()),
            "refused" => SiteError::Refused(self.reason?),
            _ => return None,
        })
    }
}

fn status_of(e: &SiteError) -> StatusCode {
    match e {
        SiteError::NoSuchSite(_) | SiteError::PageMissing => StatusCode::NOT_FOUND,
        // A dead site stands in for a refused connection.
        SiteError::SiteDown => StatusCode::SERVICE_UNAVAILABLE,
        SiteError::TitleTaken => StatusCode::CONFLICT,
        SiteError::InvalidTitle(_) => StatusCode::BAD_REQUEST,
        SiteError::Refused(_) => StatusCode::FORBIDDEN,
    }
}

struct Failure(SiteError);

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (status_of(&self.0), Json(SiteErrorBody::from_error(&self.0))).into_response()
    }
}

impl From<SiteError> for Failure {
    fn from(e: SiteError) -> Self {
        Failure(e)
    }
}

type Shared = Arc<Mutex<SiteHost>>;

fn lock(host: &Shared) -> MutexGuard<'_, SiteHost> {
    host.lock().unwrap_or_else(|e| e.into_inner())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PopulationRequest {
    pub spec: PopulationSpec,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TickRequest {
    pub seconds: Timestamp,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdminState {
    pub now: Timestamp,
    pub sites: Vec<SiteSummary>,
}

#[derive(Deserialize)]
struct RegisterBody {
    username: String,
}

async fn page(State(host): State<Shared>, Path((id, title)): Path<(u32, String)>) -> Result<Response, Failure> {
    let html = lock(&host).get_page(id, &title)?;
    Ok(([(header::CONTENT_TYPE, "text/html; charset=utf-8")], html).into_response())
}

async fn edit(State(host): State<Shared>, Path(id): Path<u32>, Json(req): Json<EditRequest>) -> Result<Response, Failure> {
    let revision_id = lock(&host).edit_page(id, &req)?;
    Ok(Json(json!({ "revision_id": revision_id })).into_response())
}

async fn history(State(host): State<Shared>, Path((id, title)): Path<(u32, String)>) -> Result<Response, Failure> {
    Ok(Json(lock(&host).get_history(id, &title)?).into_response())
}

async fn recent(State(host): State<Shared>, Path(id): Path<u32>) -> Result<Response, Failure> {
    let host = lock(&host);
    Ok(Json(host.recent_changes(id, host.now())?).into_response())
}

async fn register(State(host): State<Shared>, Path(id): Path<u32>, Json(body): Json<RegisterBody>) -> Result<Response, Failure> {
    let token = lock(&host).register(id, &body.username)?;
    Ok(Json(json!({ "token": token })).into_response())
}

async fn challenge(State(host): State<Shared>, Path(id): Path<u32>) -> Result<Response, Failure> {
    Ok(Json(lock(&host).challenge(id)?).into_response())
}

async fn population(State(host): State<Shared>, Json(req): Json<PopulationRequest>) -> Json<AdminState> {
    let mut host = lock(&host);
    *host = SiteHost::from_spec(&req.spec, req.seed);
    Json(AdminState { now: host.now(), sites: host.summary() })
}

async fn tick(State(host): State<Shared>, Json(req): Json<TickRequest>) -> Json<serde_json::Value> {
    let mut host = lock(&host);
    host.advance(req.seconds);
    Json(json!({ "now": host.now() }))
}

async fn state(State(host): State<Shared>) -> Json<AdminState> {
    let host = lock(&host);
    Json(AdminState { now: host.now(), sites: host.summary() })
}

async fn delete_page(State(host): State<Shared>, Path((id, title)): Path<(u32, String)>) -> Result<StatusCode, Failure> {
    lock(&host).delete_page(id, &title)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn kill_site(State(host): State<Shared>, Path(id): Path<u32>) -> Result<StatusCode, Failure> {
    lock(&host).kill_site(id)?;
    Ok(StatusCode::NO_CONTENT)
}

pub fn sitehost_router(host: Shared) -> Router {
    Router::new()
        .route("/site/{id}/wiki/{title}", get(page))
        .route("/site/{id}/edit", post(edit))
        .route("/site/{id}/history/{title}", get(history))
        .route("/site/{id}/recent", get(recent))
        .route("/site/{id}/register", post(register))
        .route("/site/{id}/challenge", post(challenge))
        .route("/admin/population", post(population))
        .route("/admin/tick", post(tick))
        .route("/admin/state", get(state))
        .route("/admin/site/{id}/page/{title}/delete", post(delete_page))
        .route("/admin/site/{id}/kill", post(kill_site))
        .with_state(host)
}
