//! Blocking HTTP clients for the mock sites and the tracker.

use std::time::Duration;

use graffiti_core::fileset::FilesetManifest;
use graffiti_core::locator::FetchOutcome;
use graffiti_core::sitehost::{parse_location, Challenge, EditRequest};
use graffiti_core::tracker::wire::{
    AnnounceRequest, AnnounceResponse, ErrorBody, FailureRequest, FailureResponse, PairsRequest, ReplicaListing,
    ReportRequest, ReportResponse, StatusResponse,
};
use graffiti_core::tracker::{ApiError, StorageSite, TrackerApi};
use graffiti_core::client::{WikiError, WikiTransport};
use graffiti_core::Timestamp;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use ureq::http::Response;
use ureq::{Agent, Body};

use crate::sitehost::{AdminState, SiteErrorBody, TickRequest};
use crate::tracker::AdvanceRequest;

const TIMEOUT: Duration = Duration::from_secs(30);

fn agent() -> Agent {
    Agent::config_builder().http_status_as_error(false).timeout_global(Some(TIMEOUT)).build().into()
}

fn plain_http(base: &str) -> Result<String, String> {
    let base = base.trim_end_matches('/');
    if !base.starts_with("http://") {
        return Err(format!("{base}: only plain http mock endpoints are supported"));
    }
    Ok(base.to_owned())
}

fn json_body<T: DeserializeOwned>(resp: &mut Response<Body>) -> Result<T, String> {
    resp.body_mut().read_json::<T>().map_err(|e| e.to_string())
}

/// The bundled mock sites, reached over HTTP.
///
/// Every request must target the one configured sitehost; any other
/// location is refused without a network call.
#[derive(Clone)]
pub struct HttpWiki {
    base: String,
    agent: Agent,
}

impl HttpWiki {
    pub fn new(base: &str) -> Result<Self, String> {
        Ok(HttpWiki { base: plain_http(base)?, agent: agent() })
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn check_base(&self, base: &str) -> Result<(), WikiError> {
        if base.trim_end_matches('/') != self.base {
            return Err(WikiError::Transport(format!("{base} is not the configured sitehost")));
        }
        Ok(())
    }

    fn post<B: Serialize>(&self, site_id: u32, path: &str, body: &B) -> Result<Response<Body>, WikiError> {
        let url = format!("{}/site/{site_id}/{path}", self.base);
        self.agent.post(&url).send_json(body).map_err(|e| WikiError::Transport(e.to_string()))
    }

    fn site_result<T: DeserializeOwned>(mut resp: Response<Body>, site_id: u32, title: &str) -> Result<T, WikiError> {
        if resp.status().is_success() {
            return json_body(&mut resp).map_err(WikiError::Transport);
        }
        let status = resp.status();
        let body: SiteErrorBody = json_body(&mut resp).map_err(|e| WikiError::Transport(format!("{status}: {e}")))?;
        Err(body
            .to_error(site_id, title)
            .map(WikiError::Site)
            .unwrap_or_else(|| WikiError::Transport(format!("{status}: {}", body.message))))
    }

    /// Site directory as seen by a tracker: every site, with its protection.
    pub fn directory(&self) -> Result<Vec<StorageSite>, String> {
        Ok(self
            .state()?
            .sites
            .into_iter()
            .map(|s| StorageSite { site_id: s.site_id, base_url: self.base.clone(), protection: s.protection })
            .collect())
    }

    pub fn state(&self) -> Result<AdminState, String> {
        let mut resp = self.agent.get(&format!("{}/admin/state", self.base)).call().map_err(|e| e.to_string())?;
        json_body(&mut resp)
    }

    pub fn tick(&self, seconds: Timestamp) -> Result<(), String> {
        let url = format!("{}/admin/tick", self.base);
        self.agent.post(&url).send_json(TickRequest { seconds }).map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn delete_page(&self, site_id: u32, title: &str) -> Result<(), String> {
        self.admin_post(&format!("/admin/site/{site_id}/page/{title}/delete"))
    }

    pub fn kill_site(&self, site_id: u32) -> Result<(), String> {
        self.admin_post(&format!("/admin/site/{site_id}/kill"))
    }

    fn admin_post(&self, path: &str) -> Result<(), String> {
        let resp = self.agent.post(&format!("{}{path}", self.base)).send_empty().map_err(|e| e.to_string())?;
        if !resp.status().is_success() {
            return Err(format!("{path}: {}", resp.status()));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct TokenBody {
    token: String,
}

#[derive(Deserialize)]
struct RevisionBody {
    revision_id: u64,
}

#[derive(Serialize)]
struct RegisterBody<'a> {
    username: &'a str,
}

impl WikiTransport for HttpWiki {
    fn fetch(&self, location: &str) -> Result<FetchOutcome, String> {
        if !location.starts_with(&format!("{}/", self.base)) {
            return Err(format!("{location} is not on the configured sitehost"));
        }
        let Some((base, _, _)) = parse_location(location) else {
            return Ok(FetchOutcome::Missing);
        };
        self.check_base(base).map_err(|e| e.to_string())?;
        let mut resp = match self.agent.get(location).call() {
            Ok(resp) => resp,
            Err(_) => return Ok(FetchOutcome::Unreachable),
        };
        Ok(match resp.status().as_u16() {
            200 => match resp.body_mut().read_to_string() {
                Ok(text) => FetchOutcome::Page(text),
                Err(_) => FetchOutcome::Unreachable,
            },
            404 => FetchOutcome::Missing,
            _ => FetchOutcome::Unreachable,
        })
    }

    fn register(&self, base: &str, site_id: u32, username: &str) -> Result<String, WikiError> {
        self.check_base(base)?;
        let resp = self.post(site_id, "register", &RegisterBody { username })?;
        Ok(Self::site_result::<TokenBody>(resp, site_id, "")?.token)
    }

    fn challenge(&self, base: &str, site_id: u32) -> Result<Challenge, WikiError> {
        self.check_base(base)?;
        let resp = self.post(site_id, "challenge", &serde_json::json!({}))?;
        Self::site_result(resp, site_id, "")
    }

    fn edit(&self, base: &str, site_id: u32, req: &EditRequest) -> Result<u64, WikiError> {
        self.check_base(base)?;
        let resp = self.post(site_id, "edit", req)?;
        Ok(Self::site_result::<RevisionBody>(resp, site_id, &req.title)?.revision_id)
    }
}

/// A tracker reached over HTTP.
pub struct HttpTracker {
    base: String,
    agent: Agent,
}

impl HttpTracker {
    pub fn new(base: &str) -> Result<Self, String> {
        Ok(HttpTracker { base: plain_http(base)?, agent: agent() })
    }

    fn result<T: DeserializeOwned>(mut resp: Response<Body>) -> Result<T, ApiError> {
        if resp.status().is_success() {
            return json_body(&mut resp).map_err(ApiError::Transport);
        }
        let status = resp.status();
        match json_body::<ErrorBody>(&mut resp) {
            Ok(body) => Err(ApiError::Tracker(body)),
            Err(e) => Err(ApiError::Transport(format!("{status}: {e}"))),
        }
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ApiError> {
        let resp = self.agent.get(&format!("{}{path}", self.base)).call().map_err(|e| ApiError::Transport(e.to_string()))?;
        Self::result(resp)
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ApiError> {
        let resp = self
            .agent
            .post(&format!("{}{path}", self.base))
            .send_json(body)
            .map_err(|e| ApiError::Transport(e.to_string()))?;
        Self::result(resp)
    }

    pub fn replicas(&self) -> Result<Vec<ReplicaListing>, ApiError> {
        self.get("/replicas")
    }

    pub fn advance(&self, seconds: Timestamp) -> Result<Timestamp, ApiError> {
        #[derive(Deserialize)]
        struct Now {
            now: Timestamp,
        }
        Ok(self.post::<_, Now>("/admin/advance", &AdvanceRequest { seconds })?.now)
    }
}

impl TrackerApi for HttpTracker {
    fn manifest(&mut self) -> Result<FilesetManifest, ApiError> {
        self.get("/manifest")
    }

    fn announce(&mut self, req: &AnnounceRequest) -> Result<AnnounceResponse, ApiError> {
        self.post("/announce", req)
    }

    fn request_pairs(&mut self, req: &PairsRequest) -> Result<AnnounceResponse, ApiError> {
        self.post("/request", req)
    }

    fn report(&mut self, req: &ReportRequest) -> Result<ReportResponse, ApiError> {
        self.post("/report", req)
    }

    fn failure(&mut self, req: &FailureRequest) -> Result<FailureResponse, ApiError> {
        self.post("/failure", req)
    }

    fn status(&mut self) -> Result<StatusResponse, ApiError> {
        self.get("/status")
    }
}
