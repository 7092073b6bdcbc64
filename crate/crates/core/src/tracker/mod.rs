//! The coordinating tracker.
//!
//! The tracker owns the replica table for one fileset and hands every peer a
//! bounded active piece set (APS) of request pairs. A pair tells the peer
//! where to download one sub-piece and where to write a new replica of a
//! sub-piece it already holds; the slot frees up only when the peer reports
//! the new replica. Peers start in an initialization phase in which they must
//! write two replicas of every sub-piece in the shared, periodically rotated
//! initial piece set (IPS).
//!
//! All commands take the current time explicitly; the tracker never reads a
//! clock of its own.

mod service;
mod snapshot;
mod throttle;
pub mod wire;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use service::{ApiError, Clock, TrackerApi, TrackerService};
pub use snapshot::{TrackerSnapshot, SNAPSHOT_VERSION};
pub use throttle::TokenBucket;

use crate::codec::{ReplicaKey, MARKER_LEN};
use crate::fileset::{FilesetManifest, Slot, SubPieceId, SubPieceRef};
use crate::locator::{FetchOutcome, ReplicaLocator};
use crate::sitehost::{parse_location, Protection, SiteHost};
use crate::status::{classify_probe, ReplicaStatus};
use crate::{Timestamp, DAY, HOUR};
use wire::{Download, IpsWindow, PeerStatus, ReplicaListing, StatusResponse, TargetHints, Upload, WirePair};

/// Replicas each peer must write per IPS sub-piece before leaving initialization.
pub const IPS_REPLICAS: u32 = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TrackerError {
    #[error("fileset {0} is not tracked here")]
    NotTracked(String),
    #[error("pair {0} is not in the peer's active set")]
    StalePair(u64),
    #[error("location {0} is already recorded")]
    DuplicateLocation(String),
    #[error("request rate exceeded")]
    Throttled,
    #[error("peer {0} is banned")]
    Banned(String),
    #[error("peer {0} has not announced")]
    UnknownPeer(String),
    #[error("no replica {0}")]
    UnknownReplica(u64),
    #[error("verification proxy unavailable: {0}")]
    ProxyUnavailable(String),
    #[error("bad request: {0}")]
    BadRequest(String),
}

impl TrackerError {
    pub fn code(&self) -> &'static str {
        match self {
            TrackerError::NotTracked(_) => "NOT_TRACKED",
            TrackerError::StalePair(_) => "STALE_PAIR",
            TrackerError::DuplicateLocation(_) => "DUPLICATE_LOCATION",
            TrackerError::Throttled => "THROTTLED",
            TrackerError::Banned(_) => "BANNED",
            TrackerError::UnknownPeer(_) => "UNKNOWN_PEER",
            TrackerError::UnknownReplica(_) => "UNKNOWN_REPLICA",
            TrackerError::ProxyUnavailable(_) => "PROXY_UNAVAILABLE",
            TrackerError::BadRequest(_) => "BAD_REQUEST",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initializing,
    Normal,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Initializing => "initializing",
            Phase::Normal => "normal",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteReuse {
    /// A site receives at most one replica of the whole fileset.
    OncePerFileset,
    /// A site may host several sub-pieces, but never two copies of one.
    AcrossSubpieces,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub aps_capacity: usize,
    pub ips_window: Timestamp,
    pub verify_prob: f64,
    pub strike_threshold: u32,
    pub pair_expiry: Timestamp,
    pub pairs_per_hour: u32,
    pub site_reuse: SiteReuse,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            aps_capacity: 4,
            ips_window: DAY,
            verify_prob: 0.2,
            strike_threshold: 3,
            pair_expiry: HOUR,
            pairs_per_hour: 30,
            site_reuse: SiteReuse::OncePerFileset,
        }
    }
}

/// A storage site in the tracker's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageSite {
    pub site_id: u32,
    pub base_url: String,
    pub protection: Protection,
}

/// The tracker's view of every site on a host, all served from `base_url`.
pub fn site_directory(host: &SiteHost, base_url: &str) -> Vec<StorageSite> {
    host.sites()
        .iter()
        .map(|s| StorageSite { site_id: s.site_id, base_url: base_url.trim_end_matches('/').to_owned(), protection: s.protection })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaRecord {
    pub replica_id: u64,
    pub subpiece: SubPieceRef,
    pub site_id: u32,
    pub location: String,
    pub key: ReplicaKey,
    pub checksum: String,
    pub start_marker: String,
    pub end_marker: String,
    pub status: ReplicaStatus,
    pub created_at: Timestamp,
    pub last_checked: Option<Timestamp>,
    pub reported_by: String,
}

impl ReplicaRecord {
    pub fn locator(&self) -> ReplicaLocator {
        ReplicaLocator {
            location: self.location.clone(),
            key: self.key,
            checksum: self.checksum.clone(),
            start_marker: self.start_marker.clone(),
            end_marker: self.end_marker.clone(),
        }
    }
}

/// What a peer claims to have written.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplicaClaim {
    pub location: String,
    pub key: ReplicaKey,
    pub checksum: String,
    pub start_marker: String,
    pub end_marker: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairKind {
    Ips { entry: usize, round: u32 },
    Normal,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestPair {
    pub pair_id: u64,
    pub kind: PairKind,
    pub download_replica: u64,
    pub download: SubPieceRef,
    pub upload_subpiece: SubPieceRef,
    pub upload_target: u32,
    pub issued_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IpsEntry {
    pub subpiece: SubPieceRef,
    pub source: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitialPieceSet {
    pub window_start: Timestamp,
    pub window_length: Timestamp,
    pub entries: Vec<IpsEntry>,
}

impl InitialPieceSet {
    pub fn subpieces(&self) -> Vec<SubPieceId> {
        self.entries.iter().map(|e| e.subpiece.id()).collect()
    }

    fn covers(&self, now: Timestamp) -> bool {
        now >= self.window_start && now < self.window_start + self.window_length
    }
}

#[derive(Clone, Debug)]
pub struct PeerSession {
    pub peer_id: String,
    pub phase: Phase,
    /// Tracker's view of what the peer holds, for download scheduling.
    have: BTreeSet<u64>,
    /// Sub-pieces the peer has demonstrably fetched, for upload obligations.
    downloaded: BTreeSet<u64>,
    pending_downloads: BTreeSet<u64>,
    aps: BTreeMap<u64, RequestPair>,
    ips: Vec<IpsEntry>,
    ips_queue: VecDeque<(usize, u32)>,
    ips_progress: Vec<u32>,
    /// Download locations handed out this session.
    issued: u64,
    /// Issued locations the tracker itself confirmed dead; they carry no data.
    refunded: u64,
    validated: u64,
}

impl PeerSession {
    pub fn aps_len(&self) -> usize {
        self.aps.len()
    }

    pub fn pairs(&self) -> impl Iterator<Item = &RequestPair> {
        self.aps.values()
    }

    pub fn issued(&self) -> u64 {
        self.issued
    }

    pub fn refunded(&self) -> u64 {
        self.refunded
    }

    pub fn validated(&self) -> u64 {
        self.validated
    }

    pub fn ips_progress(&self) -> &[u32] {
        &self.ips_progress
    }
}

/// Lifetime event counts, for audit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub pairs_issued: u64,
    pub reports: u64,
    pub verifications_sampled: u64,
    pub reports_rejected: u64,
    pub validated: u64,
    pub expired: u64,
    pub refunded: u64,
    /// Pairs discarded when a peer announced again or was banned.
    pub dropped: u64,
}

/// Why scheduling stopped short of filling the APS.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScheduleSignals {
    pub starved: Vec<u64>,
    pub throttled: bool,
    pub target_exhausted: bool,
    pub complete: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scheduled {
    pub phase: Phase,
    pub pairs: Vec<RequestPair>,
    pub signals: ScheduleSignals,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportOutcome {
    pub accepted: bool,
    pub next_pair: Option<RequestPair>,
    pub phase: Phase,
    pub reason: Option<String>,
    pub replica_id: Option<u64>,
}

enum Blocked {
    Full,
    Starved(Vec<u64>),
    Throttled,
    TargetExhausted,
    Complete,
    Waiting,
}

/// Fetches pages on the tracker's behalf, standing in for a caching or
/// anonymizing proxy.
pub trait ReplicaProxy {
    fn fetch(&mut self, location: &str) -> Result<FetchOutcome, String>;
}

impl<F: FnMut(&str) -> Result<FetchOutcome, String>> ReplicaProxy for F {
    fn fetch(&mut self, location: &str) -> Result<FetchOutcome, String> {
        self(location)
    }
}

/// Decodes a base64 piece bitfield into the set of held piece indices.
pub fn decode_bitfield(text: &str, pieces: u64) -> Result<BTreeSet<u64>, TrackerError> {
    let bytes = STANDARD.decode(text).map_err(|e| TrackerError::BadRequest(format!("have_pieces: {e}")))?;
    Ok((0..pieces)
        .filter(|&i| bytes.get((i / 8) as usize).is_some_and(|b| b & (0x80 >> (i % 8)) != 0))
        .collect())
}

pub fn encode_bitfield(pieces: &BTreeSet<u64>, count: u64) -> String {
    let mut bytes = vec![0u8; count.div_ceil(8) as usize];
    for &i in pieces.iter().filter(|&&i| i < count) {
        bytes[(i / 8) as usize] |= 0x80 >> (i % 8);
    }
    STANDARD.encode(bytes)
}

#[derive(Clone, Debug)]
pub struct Tracker {
    manifest: FilesetManifest,
    config: TrackerConfig,
    sites: Vec<StorageSite>,
    slots: Vec<Slot>,
    checksums: Vec<Option<String>>,
    replicas: Vec<ReplicaRecord>,
    by_subpiece: Vec<Vec<usize>>,
    live_by_ordinal: Vec<u32>,
    live_at: BTreeMap<(u32, u64), u32>,
    writable: Vec<u32>,
    live_locations: BTreeMap<String, usize>,
    used_sites: BTreeSet<u32>,
    dead_sites: BTreeSet<u32>,
    pending_targets: BTreeMap<(u32, u64), u32>,
    pending_uploads: BTreeMap<u64, u32>,
    peers: BTreeMap<String, PeerSession>,
    buckets: BTreeMap<String, TokenBucket>,
    strikes: BTreeMap<String, u32>,
    banned: BTreeSet<String>,
    ips: InitialPieceSet,
    ips_history: Vec<InitialPieceSet>,
    next_pair: u64,
    counters: Counters,
    rng: ChaCha8Rng,
}

impl Tracker {
    pub fn new(manifest: FilesetManifest, config: TrackerConfig, mut sites: Vec<StorageSite>, seed: u64) -> Self {
        sites.sort_by_key(|s| s.site_id);
        let slots = manifest.layout();
        let n = slots.len();
        let writable = sites.iter().filter(|s| s.protection.is_writable()).map(|s| s.site_id).collect();
        let ips = InitialPieceSet { window_start: 0, window_length: config.ips_window, entries: Vec::new() };
        Tracker {
            manifest,
            config,
            sites,
            slots,
            checksums: vec![None; n],
            replicas: Vec::new(),
            by_subpiece: vec![Vec::new(); n],
            live_by_ordinal: vec![0; n],
            live_at: BTreeMap::new(),
            writable,
            live_locations: BTreeMap::new(),
            used_sites: BTreeSet::new(),
            dead_sites: BTreeSet::new(),
            pending_targets: BTreeMap::new(),
            pending_uploads: BTreeMap::new(),
            peers: BTreeMap::new(),
            buckets: BTreeMap::new(),
            strikes: BTreeMap::new(),
            banned: BTreeSet::new(),
            ips,
            ips_history: Vec::new(),
            next_pair: 1,
            counters: Counters::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn manifest(&self) -> &FilesetManifest {
        &self.manifest
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn sites(&self) -> &[StorageSite] {
        &self.sites
    }

    pub fn replicas(&self) -> &[ReplicaRecord] {
        &self.replicas
    }

    pub fn replica(&self, replica_id: u64) -> Option<&ReplicaRecord> {
        self.replicas.get(replica_id as usize)
    }

    pub fn peer(&self, peer_id: &str) -> Option<&PeerSession> {
        self.peers.get(peer_id)
    }

    pub fn is_banned(&self, peer_id: &str) -> bool {
        self.banned.contains(peer_id)
    }

    pub fn strikes(&self, peer_id: &str) -> u32 {
        self.strikes.get(peer_id).copied().unwrap_or(0)
    }

    pub fn ips(&self) -> &InitialPieceSet {
        &self.ips
    }

    pub fn ips_history(&self) -> &[InitialPieceSet] {
        &self.ips_history
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn peers(&self) -> impl Iterator<Item = &PeerSession> {
        self.peers.values()
    }

    pub fn subpiece_count(&self) -> usize {
        self.slots.len()
    }

    fn ordinal(&self, id: SubPieceId) -> Option<u64> {
        let o = self.manifest.geometry().ordinal(id);
        (self.slots.get(o as usize)?.id == id).then_some(o)
    }

    fn subpiece_ref(&self, ordinal: u64) -> Option<SubPieceRef> {
        let slot = self.slots.get(ordinal as usize)?;
        let checksum = self.checksums[ordinal as usize].clone()?;
        Some(SubPieceRef { piece_index: slot.id.piece, subpiece_index: slot.id.index, length: slot.length, checksum })
    }

    pub fn site(&self, site_id: u32) -> Option<&StorageSite> {
        self.sites.binary_search_by_key(&site_id, |s| s.site_id).ok().map(|i| &self.sites[i])
    }

    pub fn live_count(&self, ordinal: u64) -> u32 {
        self.live_by_ordinal[ordinal as usize]
    }

    pub fn live_counts(&self) -> Vec<u32> {
        self.live_by_ordinal.clone()
    }

    fn live_replicas(&self, ordinal: u64) -> Vec<usize> {
        self.by_subpiece[ordinal as usize].iter().copied().filter(|&i| self.replicas[i].status.is_live()).collect()
    }

    fn validate_claim(&self, claim: &ReplicaClaim, subpiece: &SubPieceRef) -> Result<u32, String> {
        if claim.checksum != subpiece.checksum {
            return Err("checksum does not match the sub-piece".into());
        }
        if claim.start_marker.len() != MARKER_LEN || claim.end_marker.len() != MARKER_LEN {
            return Err("markers must be 16 characters".into());
        }
        let (base, site_id, _) = parse_location(&claim.location).ok_or("unparseable location")?;
        match self.site(site_id) {
            Some(site) if site.base_url.trim_end_matches('/') == base => Ok(site_id),
            Some(_) => Err(format!("site {site_id} is not served from {base}")),
            None => Err(format!("site {site_id} is not in the directory")),
        }
    }

    fn insert_record(&mut self, record: ReplicaRecord) -> u64 {
        let idx = self.replicas.len();
        let ordinal = self.manifest.geometry().ordinal(record.subpiece.id());
        self.by_subpiece[ordinal as usize].push(idx);
        if record.status.is_live() {
            self.live_locations.insert(record.location.clone(), idx);
            self.live_by_ordinal[ordinal as usize] += 1;
            *self.live_at.entry((record.site_id, ordinal)).or_default() += 1;
        }
        self.used_sites.insert(record.site_id);
        self.replicas.push(record);
        idx as u64
    }

    /// Registers an initial replica written by the fileset's publisher. The
    /// first seed of a sub-piece also fixes its checksum.
    pub fn add_seed_replica(&mut self, subpiece: SubPieceRef, claim: ReplicaClaim, now: Timestamp) -> Result<u64, TrackerError> {
        let ordinal = self.ordinal(subpiece.id()).ok_or_else(|| TrackerError::BadRequest(format!("no sub-piece {}", subpiece.id())))?;
        if self.slots[ordinal as usize].length != subpiece.length {
            return Err(TrackerError::BadRequest("sub-piece length mismatch".into()));
        }
        match &self.checksums[ordinal as usize] {
            Some(known) if *known != subpiece.checksum => {
                return Err(TrackerError::BadRequest("conflicting sub-piece checksum".into()))
            }
            _ => self.checksums[ordinal as usize] = Some(subpiece.checksum.clone()),
        }
        if self.live_locations.contains_key(&claim.location) {
            return Err(TrackerError::DuplicateLocation(claim.location));
        }
        let site_id = self.validate_claim(&claim, &subpiece).map_err(TrackerError::BadRequest)?;
        let replica_id = self.replicas.len() as u64;
        Ok(self.insert_record(ReplicaRecord {
            replica_id,
            subpiece,
            site_id,
            location: claim.location,
            key: claim.key,
            checksum: claim.checksum,
            start_marker: claim.start_marker,
            end_marker: claim.end_marker,
            status: ReplicaStatus::Available,
            created_at: now,
            last_checked: None,
            reported_by: "seed".into(),
        }))
    }

    fn set_status(&mut self, idx: usize, status: ReplicaStatus) {
        let rec = &mut self.replicas[idx];
        if !rec.status.can_transition_to(status) {
            return;
        }
        let was_live = rec.status.is_live();
        rec.status = status;
        if was_live && !status.is_live() {
            self.live_locations.remove(&rec.location);
            let ordinal = self.manifest.geometry().ordinal(rec.subpiece.id());
            self.live_by_ordinal[ordinal as usize] -= 1;
            let key = (rec.site_id, ordinal);
            if let Some(c) = self.live_at.get_mut(&key) {
                *c -= 1;
                if *c == 0 {
                    self.live_at.remove(&key);
                }
            }
        }
        if status == ReplicaStatus::NotFound {
            self.dead_sites.insert(rec.site_id);
        }
    }

    /// Fetches a replica through `proxy` and updates its status.
    ///
    /// A proxy failure leaves the record untouched so the check can be retried.
    pub fn verify_replica(&mut self, replica_id: u64, proxy: &mut dyn ReplicaProxy, now: Timestamp) -> Result<ReplicaStatus, TrackerError> {
        let idx = replica_id as usize;
        let rec = self.replicas.get(idx).ok_or(TrackerError::UnknownReplica(replica_id))?;
        let fetch = proxy.fetch(&rec.location).map_err(TrackerError::ProxyUnavailable)?;
        let observed = classify_probe(rec.locator().probe(&fetch).0);
        self.set_status(idx, observed);
        self.replicas[idx].last_checked = Some(now);
        Ok(self.replicas[idx].status)
    }

    /// Replaces the IPS once its window has elapsed, or when it is empty and
    /// replicas have since appeared. Otherwise returns the current set.
    pub fn rotate_ips(&mut self, now: Timestamp) -> &InitialPieceSet {
        let expired = !self.ips.covers(now) && now >= self.ips.window_start;
        if expired || self.ips.entries.is_empty() {
            let len = self.config.ips_window.max(1);
            let window_start = now.div_euclid(len) * len;
            let live: Vec<u64> = (0..self.slots.len() as u64)
                .filter(|&o| self.checksums[o as usize].is_some() && self.live_count(o) > 0)
                .collect();
            let size = self.config.aps_capacity.min(live.len());
            let mut chosen: Vec<u64> = sample(&mut self.rng, live.len(), size).into_iter().map(|i| live[i]).collect();
            chosen.sort_unstable();
            let entries = chosen
                .into_iter()
                .map(|o| {
                    let candidates = self.live_replicas(o);
                    let source = candidates[self.rng.gen_range(0..candidates.len())] as u64;
                    IpsEntry { subpiece: self.subpiece_ref(o).expect("checksum known"), source }
                })
                .collect();
            let next = InitialPieceSet { window_start, window_length: len, entries };
            if expired || !next.entries.is_empty() {
                let old = std::mem::replace(&mut self.ips, next);
                if !old.entries.is_empty() {
                    self.ips_history.push(old);
                }
            }
        }
        &self.ips
    }

    /// Drops pairs that have waited longer than the expiry without a report.
    pub fn expire_pairs(&mut self, now: Timestamp) -> usize {
        let expiry = self.config.pair_expiry;
        let mut expired = Vec::new();
        for session in self.peers.values_mut() {
            let stale: Vec<u64> =
                session.aps.values().filter(|p| now - p.issued_at >= expiry).map(|p| p.pair_id).collect();
            for id in stale {
                let pair = session.aps.remove(&id).expect("present");
                if let PairKind::Ips { entry, round } = pair.kind {
                    session.ips_queue.push_front((entry, round));
                } else {
                    let o = self.manifest.geometry().ordinal(pair.download.id());
                    session.pending_downloads.remove(&o);
                }
                expired.push(pair);
            }
        }
        for pair in &expired {
            self.release(pair);
        }
        self.counters.expired += expired.len() as u64;
        expired.len()
    }

    fn reserve(&mut self, pair: &RequestPair) {
        let o = self.manifest.geometry().ordinal(pair.upload_subpiece.id());
        *self.pending_targets.entry((pair.upload_target, o)).or_default() += 1;
        *self.pending_uploads.entry(o).or_default() += 1;
    }

    fn release(&mut self, pair: &RequestPair) {
        let o = self.manifest.geometry().ordinal(pair.upload_subpiece.id());
        if let Some(c) = self.pending_targets.get_mut(&(pair.upload_target, o)) {
            *c -= 1;
            if *c == 0 {
                self.pending_targets.remove(&(pair.upload_target, o));
            }
        }
        if let Some(c) = self.pending_uploads.get_mut(&o) {
            *c -= 1;
            if *c == 0 {
                self.pending_uploads.remove(&o);
            }
        }
    }

    fn site_pending(&self, site_id: u32) -> bool {
        self.pending_targets.range((site_id, 0)..=(site_id, u64::MAX)).next().is_some()
    }

    fn target_eligible(&self, site_id: u32, ordinal: u64) -> bool {
        !self.dead_sites.contains(&site_id)
            && match self.config.site_reuse {
                SiteReuse::OncePerFileset => !self.used_sites.contains(&site_id) && !self.site_pending(site_id),
                SiteReuse::AcrossSubpieces => {
                    !self.pending_targets.contains_key(&(site_id, ordinal)) && !self.live_at.contains_key(&(site_id, ordinal))
                }
            }
    }

    /// Draws uniformly among eligible writable sites: rejection sampling
    /// first, then an exhaustive scan when eligible sites are scarce.
    fn choose_target(&mut self, ordinal: u64) -> Option<u32> {
        const DRAWS: usize = 32;
        if self.writable.is_empty() {
            return None;
        }
        for _ in 0..DRAWS {
            let site = self.writable[self.rng.gen_range(0..self.writable.len())];
            if self.target_eligible(site, ordinal) {
                return Some(site);
            }
        }
        let eligible: Vec<u32> =
            self.writable.iter().copied().filter(|&site| self.target_eligible(site, ordinal)).collect();
        (!eligible.is_empty()).then(|| eligible[self.rng.gen_range(0..eligible.len())])
    }

    fn choose_source(&mut self, ordinal: u64) -> Option<usize> {
        let live = self.live_replicas(ordinal);
        (!live.is_empty()).then(|| live[self.rng.gen_range(0..live.len())])
    }

    fn new_pair(&mut self, kind: PairKind, source: usize, upload_ordinal: u64, target: u32, now: Timestamp) -> RequestPair {
        let pair = RequestPair {
            pair_id: self.next_pair,
            kind,
            download_replica: source as u64,
            download: self.replicas[source].subpiece.clone(),
            upload_subpiece: self.subpiece_ref(upload_ordinal).expect("checksum known"),
            upload_target: target,
            issued_at: now,
        };
        self.next_pair += 1;
        self.reserve(&pair);
        pair
    }

    fn next_ips_pair(&mut self, s: &mut PeerSession, now: Timestamp) -> Result<RequestPair, Blocked> {
        let Some(&(entry, round)) = s.ips_queue.front() else {
            return Err(Blocked::Waiting);
        };
        let ordinal = self.manifest.geometry().ordinal(s.ips[entry].subpiece.id());
        let pinned = s.ips[entry].source as usize;
        let source = if self.replicas[pinned].status.is_live() {
            pinned
        } else {
            let Some(fresh) = self.choose_source(ordinal) else {
                return Err(Blocked::Starved(vec![ordinal]));
            };
            s.ips[entry].source = fresh as u64;
            if self.ips.entries.get(entry).is_some_and(|e| e.subpiece == s.ips[entry].subpiece) {
                self.ips.entries[entry].source = fresh as u64;
            }
            fresh
        };
        let Some(target) = self.choose_target(ordinal) else {
            return Err(Blocked::TargetExhausted);
        };
        s.ips_queue.pop_front();
        Ok(self.new_pair(PairKind::Ips { entry, round }, source, ordinal, target, now))
    }

    fn next_normal_pair(&mut self, s: &mut PeerSession, now: Timestamp) -> Result<RequestPair, Blocked> {
        let n = self.slots.len() as u64;
        let missing: Vec<u64> = (0..n).filter(|o| !s.have.contains(o) && !s.pending_downloads.contains(o)).collect();
        if missing.is_empty() {
            return Err(if s.pending_downloads.is_empty() { Blocked::Complete } else { Blocked::Waiting });
        }
        let download = missing
            .iter()
            .copied()
            .filter(|&o| self.checksums[o as usize].is_some())
            .map(|o| (self.live_count(o), o))
            .filter(|&(c, _)| c > 0)
            .min();
        let Some((_, download)) = download else {
            return Err(Blocked::Starved(missing));
        };
        let mut uploads: Vec<(u32, u64)> = s
            .downloaded
            .iter()
            .copied()
            .filter(|&o| self.checksums[o as usize].is_some())
            .map(|o| (self.live_count(o) + self.pending_uploads.get(&o).copied().unwrap_or(0), o))
            .collect();
        uploads.sort_unstable();
        let Some((upload, target)) =
            uploads.iter().find_map(|&(_, o)| self.choose_target(o).map(|t| (o, t)))
        else {
            return Err(Blocked::TargetExhausted);
        };
        let bucket = self
            .buckets
            .entry(s.peer_id.clone())
            .or_insert_with(|| TokenBucket::per_hour(self.config.pairs_per_hour, now));
        if !bucket.try_take(now) {
            return Err(Blocked::Throttled);
        }
        let source = self.choose_source(download).expect("live replica exists");
        s.pending_downloads.insert(download);
        Ok(self.new_pair(PairKind::Normal, source, upload, target, now))
    }

    /// Issues up to `max` pairs into the session's APS, honoring capacity and
    /// the tit-for-tat ledger.
    fn fill(&mut self, s: &mut PeerSession, max: usize, now: Timestamp) -> (Vec<RequestPair>, ScheduleSignals) {
        let capacity = self.config.aps_capacity;
        let mut out = Vec::new();
        let mut signals = ScheduleSignals::default();
        while out.len() < max {
            let next = if s.aps.len() >= capacity || s.issued - s.refunded >= s.validated + capacity as u64 {
                Err(Blocked::Full)
            } else {
                match s.phase {
                    Phase::Initializing => self.next_ips_pair(s, now),
                    Phase::Normal => self.next_normal_pair(s, now),
                }
            };
            match next {
                Ok(pair) => {
                    s.issued += 1;
                    self.counters.pairs_issued += 1;
                    s.aps.insert(pair.pair_id, pair.clone());
                    out.push(pair);
                }
                Err(blocked) => {
                    match blocked {
                        Blocked::Starved(ords) => signals.starved = ords,
                        Blocked::Throttled => signals.throttled = true,
                        Blocked::TargetExhausted => signals.target_exhausted = true,
                        Blocked::Complete => signals.complete = true,
                        Blocked::Full | Blocked::Waiting => {}
                    }
                    break;
                }
            }
        }
        (out, signals)
    }

    fn check_tracked(&self, info_hash: &str) -> Result<(), TrackerError> {
        if info_hash != self.manifest.info_hash {
            return Err(TrackerError::NotTracked(info_hash.to_owned()));
        }
        Ok(())
    }

    fn check_banned(&self, peer_id: &str) -> Result<(), TrackerError> {
        if self.banned.contains(peer_id) {
            return Err(TrackerError::Banned(peer_id.to_owned()));
        }
        Ok(())
    }

    /// Starts a fresh session for `peer_id` in the initialization phase and
    /// fills its APS from the current IPS.
    pub fn announce(&mut self, peer_id: &str, info_hash: &str, have_pieces: &BTreeSet<u64>, now: Timestamp) -> Result<Scheduled, TrackerError> {
        self.check_tracked(info_hash)?;
        self.check_banned(peer_id)?;
        self.expire_pairs(now);
        if let Some(old) = self.peers.remove(peer_id) {
            self.drop_session(old);
        }
        self.rotate_ips(now);
        let geometry = self.manifest.geometry();
        let have: BTreeSet<u64> = self
            .slots
            .iter()
            .filter(|slot| have_pieces.contains(&(slot.id.piece as u64)))
            .map(|slot| geometry.ordinal(slot.id))
            .collect();
        let ips = self.ips.entries.clone();
        let ips_queue = (0..IPS_REPLICAS).flat_map(|round| (0..ips.len()).map(move |e| (e, round))).collect();
        let mut session = PeerSession {
            peer_id: peer_id.to_owned(),
            phase: if ips.is_empty() { Phase::Normal } else { Phase::Initializing },
            downloaded: have.clone(),
            have,
            pending_downloads: BTreeSet::new(),
            aps: BTreeMap::new(),
            ips_progress: vec![0; ips.len()],
            ips,
            ips_queue,
            issued: 0,
            refunded: 0,
            validated: 0,
        };
        let (pairs, signals) = self.fill(&mut session, usize::MAX, now);
        let phase = session.phase;
        self.peers.insert(peer_id.to_owned(), session);
        Ok(Scheduled { phase, pairs, signals })
    }

    fn session(&mut self, peer_id: &str) -> Result<PeerSession, TrackerError> {
        self.check_banned(peer_id)?;
        self.peers.remove(peer_id).ok_or_else(|| TrackerError::UnknownPeer(peer_id.to_owned()))
    }

    /// Tops up the peer's APS. In the normal phase this is rarest-first
    /// scheduling, subject to the per-peer rate limit.
    pub fn request_pairs(&mut self, peer_id: &str, info_hash: &str, now: Timestamp) -> Result<Scheduled, TrackerError> {
        self.check_tracked(info_hash)?;
        self.expire_pairs(now);
        let mut s = self.session(peer_id)?;
        let (pairs, signals) = self.fill(&mut s, usize::MAX, now);
        let phase = s.phase;
        let throttled = pairs.is_empty() && signals.throttled;
        self.peers.insert(peer_id.to_owned(), s);
        if throttled {
            return Err(TrackerError::Throttled);
        }
        Ok(Scheduled { phase, pairs, signals })
    }

    /// Normal-phase scheduling of at most `k` pairs for a peer.
    pub fn schedule_pairs(&mut self, peer_id: &str, k: usize, now: Timestamp) -> Result<Scheduled, TrackerError> {
        let mut s = self.session(peer_id)?;
        if s.phase != Phase::Normal {
            self.peers.insert(peer_id.to_owned(), s);
            return Err(TrackerError::BadRequest("peer is still initializing".into()));
        }
        let (pairs, signals) = self.fill(&mut s, k, now);
        self.peers.insert(peer_id.to_owned(), s);
        Ok(Scheduled { phase: Phase::Normal, pairs, signals })
    }

    fn strike(&mut self, peer_id: &str) {
        let strikes = self.strikes.entry(peer_id.to_owned()).or_default();
        *strikes += 1;
        if *strikes >= self.config.strike_threshold {
            self.banned.insert(peer_id.to_owned());
        }
    }

    fn drop_session(&mut self, s: PeerSession) {
        for pair in s.aps.values() {
            self.release(pair);
        }
        self.counters.dropped += s.aps.len() as u64;
    }

    /// Records a replica the peer claims to have written for `pair_id`.
    pub fn report_replica(
        &mut self,
        peer_id: &str,
        pair_id: u64,
        claim: ReplicaClaim,
        proxy: &mut dyn ReplicaProxy,
        now: Timestamp,
    ) -> Result<ReportOutcome, TrackerError> {
        self.expire_pairs(now);
        let mut s = self.session(peer_id)?;
        let Some(pair) = s.aps.get(&pair_id).cloned() else {
            self.peers.insert(peer_id.to_owned(), s);
            return Err(TrackerError::StalePair(pair_id));
        };
        if self.live_locations.contains_key(&claim.location) {
            self.peers.insert(peer_id.to_owned(), s);
            return Err(TrackerError::DuplicateLocation(claim.location));
        }
        self.counters.reports += 1;
        let rejected = |this: &mut Self, s: PeerSession, reason: String| {
            this.counters.reports_rejected += 1;
            this.strike(peer_id);
            let phase = s.phase;
            if this.banned.contains(peer_id) {
                this.drop_session(s);
            } else {
                this.peers.insert(peer_id.to_owned(), s);
            }
            Ok(ReportOutcome { accepted: false, next_pair: None, phase, reason: Some(reason), replica_id: None })
        };
        let site_id = match self.validate_claim(&claim, &pair.upload_subpiece) {
            Ok(site) if site == pair.upload_target => site,
            Ok(site) => return rejected(self, s, format!("replica written to site {site}, expected {}", pair.upload_target)),
            Err(reason) => return rejected(self, s, reason),
        };
        let mut record = ReplicaRecord {
            replica_id: self.replicas.len() as u64,
            subpiece: pair.upload_subpiece.clone(),
            site_id,
            location: claim.location,
            key: claim.key,
            checksum: claim.checksum,
            start_marker: claim.start_marker,
            end_marker: claim.end_marker,
            status: ReplicaStatus::Unverified,
            created_at: now,
            last_checked: None,
            reported_by: peer_id.to_owned(),
        };
        if self.rng.gen_bool(self.config.verify_prob) {
            self.counters.verifications_sampled += 1;
            // An unreachable proxy means the report is trusted optimistically.
            if let Ok(fetch) = proxy.fetch(&record.location) {
                record.last_checked = Some(now);
                match classify_probe(record.locator().probe(&fetch).0) {
                    ReplicaStatus::Available => record.status = ReplicaStatus::Available,
                    other => return rejected(self, s, format!("verification failed: {other}")),
                }
            }
        }
        let replica_id = self.insert_record(record);
        s.aps.remove(&pair_id);
        self.release(&pair);
        s.validated += 1;
        self.counters.validated += 1;
        let geometry = self.manifest.geometry();
        let downloaded = geometry.ordinal(pair.download.id());
        s.downloaded.insert(downloaded);
        match pair.kind {
            PairKind::Ips { entry, .. } => {
                s.ips_progress[entry] += 1;
                if s.ips_progress.iter().all(|&c| c >= IPS_REPLICAS) && s.ips_queue.is_empty() {
                    s.phase = Phase::Normal;
                }
            }
            PairKind::Normal => {
                s.pending_downloads.remove(&downloaded);
                s.have.insert(downloaded);
            }
        }
        let (mut next, _) = self.fill(&mut s, 1, now);
        let phase = s.phase;
        self.peers.insert(peer_id.to_owned(), s);
        Ok(ReportOutcome { accepted: true, next_pair: next.pop(), phase, reason: None, replica_id: Some(replica_id) })
    }

    /// Handles a peer saying it could not complete a pair.
    ///
    /// Download failures are confirmed through the proxy; a confirmed-dead
    /// source is refunded and the pair reissued with another source. A false
    /// claim earns a strike. Upload failures get a fresh target.
    pub fn report_failure(
        &mut self,
        peer_id: &str,
        pair_id: u64,
        stage: wire::FailureStage,
        proxy: &mut dyn ReplicaProxy,
        now: Timestamp,
    ) -> Result<(Option<RequestPair>, Phase), TrackerError> {
        self.expire_pairs(now);
        let mut s = self.session(peer_id)?;
        let Some(pair) = s.aps.get(&pair_id).cloned() else {
            self.peers.insert(peer_id.to_owned(), s);
            return Err(TrackerError::StalePair(pair_id));
        };
        let geometry = self.manifest.geometry();
        let replacement = match stage {
            wire::FailureStage::Download => {
                let status = match self.verify_replica(pair.download_replica, proxy, now) {
                    Ok(status) => status,
                    Err(e) => {
                        self.peers.insert(peer_id.to_owned(), s);
                        return Err(e);
                    }
                };
                if status.is_live() {
                    self.strike(peer_id);
                    None
                } else {
                    s.aps.remove(&pair_id);
                    self.release(&pair);
                    s.refunded += 1;
                    self.counters.refunded += 1;
                    match pair.kind {
                        PairKind::Ips { entry, round } => s.ips_queue.push_front((entry, round)),
                        PairKind::Normal => {
                            s.pending_downloads.remove(&geometry.ordinal(pair.download.id()));
                        }
                    }
                    let (mut next, _) = self.fill(&mut s, 1, now);
                    next.pop()
                }
            }
            wire::FailureStage::Upload => {
                let ordinal = geometry.ordinal(pair.upload_subpiece.id());
                self.release(&pair);
                // Keep the refused site out of the draw for this pair.
                *self.pending_targets.entry((pair.upload_target, ordinal)).or_default() += 1;
                let target = self.choose_target(ordinal);
                self.pending_targets.remove(&(pair.upload_target, ordinal));
                match target {
                    Some(target) => {
                        let mut moved = pair.clone();
                        moved.upload_target = target;
                        self.reserve(&moved);
                        s.aps.insert(pair_id, moved.clone());
                        Some(moved)
                    }
                    None => {
                        self.reserve(&pair);
                        None
                    }
                }
            }
        };
        let phase = s.phase;
        if self.banned.contains(peer_id) {
            self.drop_session(s);
        } else {
            self.peers.insert(peer_id.to_owned(), s);
        }
        Ok((replacement, phase))
    }

    pub fn to_wire(&self, pair: &RequestPair) -> WirePair {
        let source = &self.replicas[pair.download_replica as usize];
        let site = self.site(pair.upload_target).expect("target in directory");
        WirePair {
            pair_id: pair.pair_id,
            issued_at: pair.issued_at,
            initial: matches!(pair.kind, PairKind::Ips { .. }),
            download: Download {
                subpiece: pair.download.id(),
                location: source.location.clone(),
                key: source.key,
                checksum: source.checksum.clone(),
                start_marker: source.start_marker.clone(),
                end_marker: source.end_marker.clone(),
            },
            upload: Upload {
                subpiece: pair.upload_subpiece.id(),
                target_site: pair.upload_target,
                target_hints: TargetHints { base_url: site.base_url.clone(), protection: site.protection },
            },
        }
    }

    pub fn status(&self) -> StatusResponse {
        StatusResponse {
            fileset: self.manifest.name.clone(),
            info_hash: self.manifest.info_hash.clone(),
            replica_counts: self.live_counts(),
            peers: self
                .peers
                .values()
                .map(|s| PeerStatus {
                    peer_id: s.peer_id.clone(),
                    phase: s.phase,
                    aps: s.aps.len(),
                    issued: s.issued,
                    validated: s.validated,
                })
                .collect(),
            ips_window: IpsWindow {
                window_start: self.ips.window_start,
                window_length: self.ips.window_length,
                subpieces: self.ips.subpieces(),
            },
        }
    }

    pub fn listing(&self) -> Vec<ReplicaListing> {
        self.replicas
            .iter()
            .map(|r| ReplicaListing {
                replica_id: r.replica_id,
                subpiece: r.subpiece.id(),
                location: r.location.clone(),
                key: r.key,
                checksum: r.checksum.clone(),
                start_marker: r.start_marker.clone(),
                end_marker: r.end_marker.clone(),
                status: r.status,
            })
            .collect()
    }
}
