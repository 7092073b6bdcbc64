//! Where a replica lives and how to read it back.

use serde::{Deserialize, Serialize};

use crate::codec::{recover_from_page, CodecError, ReplicaKey};
use crate::status::ProbeOutcome;

/// Everything a peer needs to fetch and verify one replica.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaLocator {
    pub location: String,
    pub key: ReplicaKey,
    pub checksum: String,
    pub start_marker: String,
    pub end_marker: String,
}

/// Result of one page fetch, before payload checks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FetchOutcome {
    Page(String),
    /// The site answered 404.
    Missing,
    /// The site could not be reached.
    Unreachable,
}

impl ReplicaLocator {
    pub fn recover(&self, page: &str) -> Result<Vec<u8>, CodecError> {
        recover_from_page(page, &self.key, &self.checksum, &self.start_marker, &self.end_marker)
    }

    /// Classifies a fetch; returns the payload bytes when intact.
    pub fn probe(&self, fetch: &FetchOutcome) -> (ProbeOutcome, Option<Vec<u8>>) {
        match fetch {
            FetchOutcome::Page(text) => match self.recover(text) {
                Ok(bytes) => (ProbeOutcome::Content, Some(bytes)),
                Err(_) => (ProbeOutcome::ChecksumMismatch, None),
            },
            FetchOutcome::Missing => (ProbeOutcome::MissingPage, None),
            FetchOutcome::Unreachable => (ProbeOutcome::Unreachable, None),
        }
    }
}
