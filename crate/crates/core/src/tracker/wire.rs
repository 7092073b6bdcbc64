//! JSON bodies of the tracker's HTTP protocol.

use serde::{Deserialize, Serialize};

use crate::codec::ReplicaKey;
use crate::fileset::SubPieceId;
use crate::sitehost::Protection;
use crate::status::ReplicaStatus;
use crate::Timestamp;

use super::{Phase, TrackerError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnounceRequest {
    pub info_hash: String,
    pub peer_id: String,
    /// Base64 of a piece bitfield, most significant bit first.
    pub have_pieces: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Download {
    pub subpiece: SubPieceId,
    pub location: String,
    pub key: ReplicaKey,
    pub checksum: String,
    pub start_marker: String,
    pub end_marker: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetHints {
    pub base_url: String,
    pub protection: Protection,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Upload {
    pub subpiece: SubPieceId,
    pub target_site: u32,
    pub target_hints: TargetHints,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WirePair {
    pub pair_id: u64,
    pub issued_at: Timestamp,
    /// Part of the peer's initial piece set.
    #[serde(default)]
    pub initial: bool,
    pub download: Download,
    pub upload: Upload,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnounceResponse {
    pub phase: Phase,
    pub pairs: Vec<WirePair>,
    /// Ordinals the peer lacks that have no live replica.
    #[serde(default)]
    pub starved: Vec<u64>,
    /// True once the tracker has nothing left to schedule for this peer.
    #[serde(default)]
    pub complete: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairsRequest {
    pub info_hash: String,
    pub peer_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRequest {
    pub peer_id: String,
    pub pair_id: u64,
    pub location: String,
    pub key: ReplicaKey,
    pub checksum: String,
    pub start_marker: String,
    pub end_marker: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportResponse {
    pub accepted: bool,
    pub next_pair: Option<WirePair>,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureStage {
    Download,
    Upload,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRequest {
    pub peer_id: String,
    pub pair_id: u64,
    pub stage: FailureStage,
    /// What the peer saw at the download location.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed: Option<ReplicaStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureResponse {
    /// The same obligation with a new source or target; `None` drops it.
    pub replacement: Option<WirePair>,
    pub phase: Phase,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerStatus {
    pub peer_id: String,
    pub phase: Phase,
    pub aps: usize,
    pub issued: u64,
    pub validated: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IpsWindow {
    pub window_start: Timestamp,
    pub window_length: Timestamp,
    pub subpieces: Vec<SubPieceId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusResponse {
    pub fileset: String,
    pub info_hash: String,
    pub replica_counts: Vec<u32>,
    pub peers: Vec<PeerStatus>,
    pub ips_window: IpsWindow,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error_code: String,
    pub message: String,
}

impl From<&TrackerError> for ErrorBody {
    fn from(e: &TrackerError) -> Self {
        ErrorBody { error_code: e.code().to_owned(), message: e.to_string() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaListing {
    pub replica_id: u64,
    pub subpiece: SubPieceId,
    pub location: String,
    pub key: ReplicaKey,
    pub checksum: String,
    pub start_marker: String,
    pub end_marker: String,
    pub status: ReplicaStatus,
}
