//! The tracker behind its wire protocol, with a clock and a verification
//! proxy attached.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::wire::{
    AnnounceRequest, AnnounceResponse, ErrorBody, FailureRequest, FailureResponse, PairsRequest, ReplicaListing,
    ReportRequest, ReportResponse, StatusResponse,
};
use super::{decode_bitfield, ReplicaClaim, ReplicaProxy, Scheduled, Tracker, TrackerError, TrackerSnapshot};
use crate::fileset::FilesetManifest;
use crate::Timestamp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Clock {
    /// Advances by `step` seconds on every command. Deterministic.
    Logical { now: Timestamp, step: Timestamp },
    /// Moves only when told to.
    Manual { now: Timestamp },
    /// Unix seconds.
    Wall,
}

impl Clock {
    pub fn logical(start: Timestamp) -> Self {
        Clock::Logical { now: start, step: 1 }
    }

    pub fn now(&self) -> Timestamp {
        match *self {
            Clock::Logical { now, .. } | Clock::Manual { now } => now,
            Clock::Wall => SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs() as Timestamp).unwrap_or(0),
        }
    }

    /// Reads the clock for a new command.
    pub fn tick(&mut self) -> Timestamp {
        if let Clock::Logical { now, step } = self {
            *now += *step;
        }
        self.now()
    }

    pub fn advance(&mut self, seconds: Timestamp) {
        match self {
            Clock::Logical { now, .. } | Clock::Manual { now } => *now += seconds,
            Clock::Wall => {}
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ApiError {
    #[error("{}: {}", .0.error_code, .0.message)]
    Tracker(ErrorBody),
    #[error("transport: {0}")]
    Transport(String),
}

impl ApiError {
    pub fn code(&self) -> Option<&str> {
        match self {
            ApiError::Tracker(body) => Some(&body.error_code),
            ApiError::Transport(_) => None,
        }
    }
}

impl From<TrackerError> for ApiError {
    fn from(e: TrackerError) -> Self {
        ApiError::Tracker(ErrorBody::from(&e))
    }
}

/// The tracker protocol as seen by a client, in-process or over HTTP.
pub trait TrackerApi {
    fn manifest(&mut self) -> Result<FilesetManifest, ApiError>;
    fn announce(&mut self, req: &AnnounceRequest) -> Result<AnnounceResponse, ApiError>;
    fn request_pairs(&mut self, req: &PairsRequest) -> Result<AnnounceResponse, ApiError>;
    fn report(&mut self, req: &ReportRequest) -> Result<ReportResponse, ApiError>;
    fn failure(&mut self, req: &FailureRequest) -> Result<FailureResponse, ApiError>;
    fn status(&mut self) -> Result<StatusResponse, ApiError>;
}

pub struct TrackerService {
    tracker: Tracker,
    clock: Clock,
    proxy: Box<dyn ReplicaProxy + Send>,
}

impl TrackerService {
    pub fn new(tracker: Tracker, clock: Clock, proxy: Box<dyn ReplicaProxy + Send>) -> Self {
        TrackerService { tracker, clock, proxy }
    }

    pub fn from_snapshot(text: &str, clock: Option<Clock>, proxy: Box<dyn ReplicaProxy + Send>) -> Result<Self, String> {
        let (tracker, now) = Tracker::restore(TrackerSnapshot::from_json(text)?)?;
        Ok(TrackerService { tracker, clock: clock.unwrap_or(Clock::logical(now)), proxy })
    }

    pub fn tracker(&self) -> &Tracker {
        &self.tracker
    }

    pub fn tracker_mut(&mut self) -> &mut Tracker {
        &mut self.tracker
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn advance(&mut self, seconds: Timestamp) -> Timestamp {
        self.clock.advance(seconds);
        self.clock.now()
    }

    pub fn snapshot_json(&self) -> String {
        self.tracker.snapshot(self.clock.now()).to_json()
    }

    pub fn replicas(&self) -> Vec<ReplicaListing> {
        self.tracker.listing()
    }

    /// Re-checks every live replica through the proxy.
    pub fn verify_all(&mut self) -> Result<usize, TrackerError> {
        let now = self.clock.tick();
        let ids: Vec<u64> =
            self.tracker.replicas().iter().filter(|r| r.status.is_live()).map(|r| r.replica_id).collect();
        for &id in &ids {
            self.tracker.verify_replica(id, self.proxy.as_mut(), now)?;
        }
        Ok(ids.len())
    }

    fn scheduled(&self, s: Scheduled) -> AnnounceResponse {
        AnnounceResponse {
            phase: s.phase,
            pairs: s.pairs.iter().map(|p| self.tracker.to_wire(p)).collect(),
            starved: s.signals.starved,
            complete: s.signals.complete,
        }
    }
}

impl TrackerApi for TrackerService {
    fn manifest(&mut self) -> Result<FilesetManifest, ApiError> {
        Ok(self.tracker.manifest().clone())
    }

    fn announce(&mut self, req: &AnnounceRequest) -> Result<AnnounceResponse, ApiError> {
        let now = self.clock.tick();
        let have = decode_bitfield(&req.have_pieces, self.tracker.manifest().piece_count())?;
        let s = self.tracker.announce(&req.peer_id, &req.info_hash, &have, now)?;
        Ok(self.scheduled(s))
    }

    fn request_pairs(&mut self, req: &PairsRequest) -> Result<AnnounceResponse, ApiError> {
        let now = self.clock.tick();
        let s = self.tracker.request_pairs(&req.peer_id, &req.info_hash, now)?;
        Ok(self.scheduled(s))
    }

    fn report(&mut self, req: &ReportRequest) -> Result<ReportResponse, ApiError> {
        let now = self.clock.tick();
        let claim = ReplicaClaim {
            location: req.location.clone(),
            key: req.key,
            checksum: req.checksum.clone(),
            start_marker: req.start_marker.clone(),
            end_marker: req.end_marker.clone(),
        };
        let out = self.tracker.report_replica(&req.peer_id, req.pair_id, claim, self.proxy.as_mut(), now)?;
        Ok(ReportResponse {
            accepted: out.accepted,
            next_pair: out.next_pair.map(|p| self.tracker.to_wire(&p)),
            phase: out.phase,
            reason: out.reason,
        })
    }

    fn failure(&mut self, req: &FailureRequest) -> Result<FailureResponse, ApiError> {
        let now = self.clock.tick();
        let (replacement, phase) =
            self.tracker.report_failure(&req.peer_id, req.pair_id, req.stage, self.proxy.as_mut(), now)?;
        Ok(FailureResponse { replacement: replacement.map(|p| self.tracker.to_wire(&p)), phase })
    }

    fn status(&mut self) -> Result<StatusResponse, ApiError> {
        Ok(self.tracker.status())
    }
}
