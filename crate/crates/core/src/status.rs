//! Replica liveness taxonomy shared by the tracker, the client and the probe tool.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicaStatus {
    Unverified,
    Available,
    /// Site is up but the page is gone.
    Removed,
    /// Page is present but its payload no longer matches the checksum.
    Changed,
    /// Site is unreachable.
    NotFound,
}

impl ReplicaStatus {
    pub const ALL: [ReplicaStatus; 5] = [
        ReplicaStatus::Unverified,
        ReplicaStatus::Available,
        ReplicaStatus::Removed,
        ReplicaStatus::Changed,
        ReplicaStatus::NotFound,
    ];

    /// Whether the replica may still be handed out as a download source.
    pub fn is_live(self) -> bool {
        matches!(self, ReplicaStatus::Unverified | ReplicaStatus::Available)
    }

    pub fn can_transition_to(self, next: ReplicaStatus) -> bool {
        use ReplicaStatus::*;
        if self == next {
            return true;
        }
        match self {
            Unverified => next != Unverified,
            Available => matches!(next, Removed | Changed | NotFound),
            Removed => next == NotFound,
            Changed | NotFound => false,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ReplicaStatus::Unverified => "unverified",
            ReplicaStatus::Available => "available",
            ReplicaStatus::Removed => "removed",
            ReplicaStatus::Changed => "changed",
            ReplicaStatus::NotFound => "not_found",
        }
    }
}

impl fmt::Display for ReplicaStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReplicaStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ReplicaStatus::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown replica status `{s}`"))
    }
}

/// What a single probe of a replica location observed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeOutcome {
    /// Page fetched and payload verified.
    Content,
    /// Site answered but the page does not exist.
    MissingPage,
    /// Page fetched but no payload matching the checksum could be recovered.
    ChecksumMismatch,
    /// Site did not answer at all.
    Unreachable,
}

pub fn classify_probe(outcome: ProbeOutcome) -> ReplicaStatus {
    match outcome {
        ProbeOutcome::Content => ReplicaStatus::Available,
        ProbeOutcome::MissingPage => ReplicaStatus::Removed,
        ProbeOutcome::ChecksumMismatch => ReplicaStatus::Changed,
        ProbeOutcome::Unreachable => ReplicaStatus::NotFound,
    }
}
