//! Durable tracker state.
//!
//! Peer sessions are not saved: after a restart every peer announces again
//! and starts a fresh initialization phase. Rate-limit buckets, strikes and
//! bans survive.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Counters, InitialPieceSet, ReplicaRecord, StorageSite, TokenBucket, Tracker, TrackerConfig};
use crate::canonical::to_canonical_string;
use crate::fileset::FilesetManifest;
use crate::status::ReplicaStatus;
use crate::Timestamp;

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since the word position is a 128-bit counter.
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng, String> {
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|e| format!("rng seed: {e}"))?
            .try_into()
            .map_err(|_| "rng seed must be 32 bytes".to_owned())?;
        let word_pos: u128 = self.word_pos.parse().map_err(|e| format!("rng word_pos: {e}"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerSnapshot {
    pub version: u32,
    pub now: Timestamp,
    pub manifest: FilesetManifest,
    pub config: TrackerConfig,
    pub sites: Vec<StorageSite>,
    pub replicas: Vec<ReplicaRecord>,
    pub ips: InitialPieceSet,
    pub ips_history: Vec<InitialPieceSet>,
    pub buckets: BTreeMap<String, TokenBucket>,
    pub strikes: BTreeMap<String, u32>,
    pub banned: BTreeSet<String>,
    pub next_pair: u64,
    pub counters: Counters,
    pub rng: RngState,
}

impl TrackerSnapshot {
    pub fn to_json(&self) -> String {
        to_canonical_string(self).expect("snapshot serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let snap: TrackerSnapshot = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if snap.version != SNAPSHOT_VERSION {
            return Err(format!("unsupported snapshot version {}", snap.version));
        }
        Ok(snap)
    }
}

impl Tracker {
    pub fn snapshot(&self, now: Timestamp) -> TrackerSnapshot {
        TrackerSnapshot {
            version: SNAPSHOT_VERSION,
            now,
            manifest: self.manifest.clone(),
            config: self.config.clone(),
            sites: self.sites.clone(),
            replicas: self.replicas.clone(),
            ips: self.ips.clone(),
            ips_history: self.ips_history.clone(),
            buckets: self.buckets.clone(),
            strikes: self.strikes.clone(),
            banned: self.banned.clone(),
            next_pair: self.next_pair,
            counters: self.counters,
            rng: RngState::capture(&self.rng),
        }
    }

    /// Rebuilds a tracker and returns it with the snapshot's clock reading.
    pub fn restore(snap: TrackerSnapshot) -> Result<(Tracker, Timestamp), String> {
        snap.manifest.validate().map_err(|e| e.to_string())?;
        let mut tracker = Tracker::new(snap.manifest, snap.config, snap.sites, 0);
        for (i, record) in snap.replicas.into_iter().enumerate() {
            if record.replica_id != i as u64 {
                return Err(format!("replica {} out of order", record.replica_id));
            }
            let ordinal = tracker
                .ordinal(record.subpiece.id())
                .ok_or_else(|| format!("replica {i} names an unknown sub-piece"))?;
            let known = &mut tracker.checksums[ordinal as usize];
            match known {
                Some(c) if *c != record.subpiece.checksum => {
                    return Err(format!("replica {i} disagrees on the sub-piece checksum"))
                }
                _ => *known = Some(record.subpiece.checksum.clone()),
            }
            if record.status == ReplicaStatus::NotFound {
                tracker.dead_sites.insert(record.site_id);
            }
            tracker.insert_record(record);
        }
        let n = tracker.replicas.len() as u64;
        for entry in snap.ips.entries.iter().chain(snap.ips_history.iter().flat_map(|w| &w.entries)) {
            if entry.source >= n {
                return Err(format!("IPS source {} does not exist", entry.source));
            }
        }
        tracker.ips = snap.ips;
        tracker.ips_history = snap.ips_history;
        tracker.buckets = snap.buckets;
        tracker.strikes = snap.strikes;
        tracker.banned = snap.banned;
        tracker.next_pair = snap.next_pair;
        tracker.counters = snap.counters;
        tracker.rng = snap.rng.restore()?;
        Ok((tracker, snap.now))
    }
}
