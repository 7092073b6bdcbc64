//! The peer: works through request pairs handed out by a tracker.
//!
//! For each pair the client fetches and decrypts the download replica, then
//! writes a fresh replica of the upload sub-piece to the named site, reads it
//! back, and reports it. Downloads within a batch are fetched concurrently;
//! everything else runs in pair order so a session is reproducible.

mod puzzle;
mod wiki;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use puzzle::{solve_arithmetic_puzzle, PuzzleError};
pub use wiki::{
    produce_replica, random_title, word_title, LocalWiki, ProduceError, TransportProxy, WikiError, WikiTransport,
    WriteTarget, TITLE_ATTEMPTS,
};

use crate::fileset::{assemble, split, FilesetError, FilesetManifest, SubPieceId, SubPieceRef};
use crate::locator::{FetchOutcome, ReplicaLocator};
use crate::status::{classify_probe, ProbeOutcome, ReplicaStatus};
use crate::tracker::wire::{
    AnnounceRequest, FailureRequest, FailureStage, PairsRequest, ReportRequest, WirePair,
};
use crate::tracker::{encode_bitfield, ApiError, Phase, ReplicaClaim, SiteReuse, Tracker, TrackerApi, TrackerError};
use crate::Timestamp;

pub const DEFAULT_NOTICE: &str =
    "This page holds an encrypted fragment of an archived file. It is safe to delete.";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("tracker: {0}")]
    Tracker(#[from] ApiError),
    #[error(transparent)]
    Fileset(#[from] FilesetError),
    #[error(transparent)]
    Produce(#[from] ProduceError),
    #[error("seeding: {0}")]
    Seed(#[from] TrackerError),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("not enough writable sites: needed {needed}, found {found}")]
    NotEnoughSites { needed: usize, found: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientConfig {
    pub peer_id: String,
    pub seed: u64,
    /// Extra attempts for transient transport failures.
    pub retries: u32,
    /// Delay before the first retry; doubles on each further attempt.
    pub backoff: Duration,
    pub notice: String,
    pub tracking_url: String,
    /// Upper bound on pairs processed in one session.
    pub max_pairs: usize,
    /// Concurrent fetches per batch; the tracker's APS capacity bounds a batch anyway.
    pub max_parallel: usize,
}

impl ClientConfig {
    pub fn new(peer_id: &str, seed: u64) -> Self {
        ClientConfig {
            peer_id: peer_id.to_owned(),
            seed,
            retries: 3,
            backoff: Duration::from_secs(1),
            notice: DEFAULT_NOTICE.to_owned(),
            tracking_url: String::new(),
            max_pairs: 10_000,
            max_parallel: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SessionOutcome {
    Complete,
    /// Sub-pieces the peer still needs have no live replica. `progress` is
    /// a base64 bitfield of the sub-piece ordinals held.
    Starved { ordinals: Vec<u64>, progress: String },
    Throttled,
    Banned,
    /// The tracker stopped issuing work for another reason, or the pair
    /// budget ran out.
    Stalled { reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrittenReplica {
    pub pair_id: u64,
    pub subpiece: SubPieceId,
    pub location: String,
}

/// What happened to one request pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairResult {
    Replicated,
    DownloadFailed,
    UploadFailed,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: u64,
    /// Tracker clock at issue.
    pub issued_at: Timestamp,
    pub initial: bool,
    pub download: SubPieceId,
    pub upload: SubPieceId,
    pub target_site: u32,
    pub result: PairResult,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionReport {
    pub peer_id: String,
    pub info_hash: String,
    pub outcome: SessionOutcome,
    pub phase: Phase,
    pub pairs: u32,
    pub downloads: u32,
    pub download_failures: u32,
    pub uploads: u32,
    pub upload_failures: u32,
    pub rejected_reports: u32,
    pub subpieces_held: usize,
    pub subpiece_count: usize,
    pub written: Vec<WrittenReplica>,
    pub pair_log: Vec<PairRecord>,
    pub errors: Vec<String>,
}

enum Fetched {
    Ok(Vec<u8>),
    Failed(ReplicaStatus),
}

fn with_retries<T, E>(
    retries: u32,
    backoff: Duration,
    transient: impl Fn(&E) -> bool,
    mut op: impl FnMut() -> Result<T, E>,
) -> Result<T, E> {
    let mut delay = backoff;
    let mut attempt = 0;
    loop {
        match op() {
            Err(e) if attempt < retries && transient(&e) => {
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
                delay *= 2;
                attempt += 1;
            }
            other => return other,
        }
    }
}

fn fetch_replica<W: WikiTransport + ?Sized>(wiki: &W, pair: &WirePair, config: &ClientConfig) -> Fetched {
    let d = &pair.download;
    let locator = ReplicaLocator {
        location: d.location.clone(),
        key: d.key,
        checksum: d.checksum.clone(),
        start_marker: d.start_marker.clone(),
        end_marker: d.end_marker.clone(),
    };
    let fetched = with_retries(config.retries, config.backoff, |_| true, || match wiki.fetch(&locator.location) {
        Ok(FetchOutcome::Unreachable) => Err(()),
        Ok(outcome) => Ok(outcome),
        Err(_) => Err(()),
    });
    match fetched {
        Ok(outcome) => match locator.probe(&outcome) {
            (_, Some(bytes)) => Fetched::Ok(bytes),
            (outcome, None) => Fetched::Failed(classify_probe(outcome)),
        },
        Err(()) => Fetched::Failed(classify_probe(ProbeOutcome::Unreachable)),
    }
}

/// One peer session against a tracker.
pub struct Client<'a, T: TrackerApi + ?Sized, W: WikiTransport + ?Sized> {
    tracker: &'a mut T,
    wiki: &'a W,
    config: ClientConfig,
    rng: ChaCha20Rng,
    manifest: Option<FilesetManifest>,
    store: BTreeMap<SubPieceId, (SubPieceRef, Vec<u8>)>,
    on_subpiece_complete: Option<Box<dyn FnMut(SubPieceId, &[u8]) + 'a>>,
}

impl<'a, T: TrackerApi + ?Sized, W: WikiTransport + ?Sized> Client<'a, T, W> {
    pub fn new(tracker: &'a mut T, wiki: &'a W, config: ClientConfig) -> Self {
        let rng = ChaCha20Rng::seed_from_u64(config.seed);
        Client { tracker, wiki, config, rng, manifest: None, store: BTreeMap::new(), on_subpiece_complete: None }
    }

    /// Called once for each sub-piece as it is first acquired, e.g. to feed
    /// a conventional swarm.
    pub fn on_subpiece_complete(&mut self, hook: impl FnMut(SubPieceId, &[u8]) + 'a) {
        self.on_subpiece_complete = Some(Box::new(hook));
    }

    fn progress(&self, manifest: &FilesetManifest) -> String {
        let geometry = manifest.geometry();
        let held: BTreeSet<u64> = self.store.keys().map(|&id| geometry.ordinal(id)).collect();
        encode_bitfield(&held, manifest.subpiece_count() as u64)
    }

    /// Uses a manifest obtained out of band instead of asking the tracker.
    pub fn use_manifest(&mut self, manifest: FilesetManifest) -> Result<(), ClientError> {
        manifest.validate()?;
        self.manifest = Some(manifest);
        Ok(())
    }

    pub fn manifest(&self) -> Option<&FilesetManifest> {
        self.manifest.as_ref()
    }

    /// Loads local copies of the fileset so the peer can announce them.
    pub fn preload(&mut self, data: &[u8]) -> Result<(), ClientError> {
        let manifest = self.fetch_manifest()?;
        for (subpiece, bytes) in split(data, &manifest)? {
            self.store.insert(subpiece.id(), (subpiece, bytes.to_vec()));
        }
        Ok(())
    }

    fn fetch_manifest(&mut self) -> Result<FilesetManifest, ClientError> {
        if let Some(m) = &self.manifest {
            return Ok(m.clone());
        }
        let m = self.tracker.manifest()?;
        m.validate()?;
        self.manifest = Some(m.clone());
        Ok(m)
    }

    /// The reassembled fileset, once every sub-piece is held.
    pub fn assembled(&self) -> Result<Vec<u8>, ClientError> {
        let manifest = self.manifest.as_ref().ok_or_else(|| ClientError::Protocol("no manifest yet".into()))?;
        let blocks: BTreeMap<SubPieceRef, Vec<u8>> = self.store.values().cloned().collect();
        Ok(assemble(&blocks, manifest)?)
    }

    fn held_pieces(&self, manifest: &FilesetManifest) -> BTreeSet<u64> {
        let mut per_piece: BTreeMap<u64, usize> = BTreeMap::new();
        for id in self.store.keys() {
            *per_piece.entry(id.piece as u64).or_default() += 1;
        }
        let layout = manifest.layout();
        per_piece
            .into_iter()
            .filter(|&(p, n)| layout.iter().filter(|s| s.id.piece as u64 == p).count() == n)
            .map(|(p, _)| p)
            .collect()
    }

    fn download_batch(&self, batch: &[WirePair]) -> Vec<Fetched> {
        let (wiki, config) = (self.wiki, &self.config);
        if config.max_parallel < 2 || batch.len() < 2 {
            return batch.iter().map(|p| fetch_replica(wiki, p, config)).collect();
        }
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(config.max_parallel) {
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk.iter().map(|p| scope.spawn(move || fetch_replica(wiki, p, config))).collect();
                out.extend(handles.into_iter().map(|h| h.join().expect("download thread panicked")));
            });
        }
        out
    }

    fn peer_id(&self) -> String {
        self.config.peer_id.clone()
    }

    /// Announces and works through pairs until the tracker has nothing more
    /// for this peer.
    pub fn run(&mut self) -> Result<SessionReport, ClientError> {
        let manifest = self.fetch_manifest()?;
        let have = self.held_pieces(&manifest);
        let announce = AnnounceRequest {
            info_hash: manifest.info_hash.clone(),
            peer_id: self.peer_id(),
            have_pieces: encode_bitfield(&have, manifest.piece_count()),
        };
        let mut report = SessionReport {
            peer_id: self.peer_id(),
            info_hash: manifest.info_hash.clone(),
            outcome: SessionOutcome::Complete,
            phase: Phase::Initializing,
            pairs: 0,
            downloads: 0,
            download_failures: 0,
            uploads: 0,
            upload_failures: 0,
            rejected_reports: 0,
            subpieces_held: 0,
            subpiece_count: manifest.subpiece_count(),
            written: Vec::new(),
            pair_log: Vec::new(),
            errors: Vec::new(),
        };
        let first = match self.tracker.announce(&announce) {
            Ok(r) => r,
            Err(e) if e.code() == Some("BANNED") => {
                report.outcome = SessionOutcome::Banned;
                return Ok(report);
            }
            Err(e) => return Err(e.into()),
        };
        report.phase = first.phase;
        let mut queue: VecDeque<WirePair> = first.pairs.into();
        let outcome = loop {
            if queue.is_empty() {
                let req = PairsRequest { info_hash: manifest.info_hash.clone(), peer_id: self.peer_id() };
                match self.tracker.request_pairs(&req) {
                    Ok(r) => {
                        report.phase = r.phase;
                        if r.pairs.is_empty() {
                            break if r.complete {
                                SessionOutcome::Complete
                            } else if !r.starved.is_empty() {
                                SessionOutcome::Starved { ordinals: r.starved, progress: self.progress(&manifest) }
                            } else {
                                SessionOutcome::Stalled { reason: "no pairs issued".into() }
                            };
                        }
                        queue.extend(r.pairs);
                    }
                    Err(e) if e.code() == Some("THROTTLED") => break SessionOutcome::Throttled,
                    Err(e) if e.code() == Some("BANNED") => break SessionOutcome::Banned,
                    Err(e) => return Err(e.into()),
                }
            }
            let batch: Vec<WirePair> = queue.drain(..).collect();
            let fetched = self.download_batch(&batch);
            let mut stop = None;
            for (pair, result) in batch.into_iter().zip(fetched) {
                if stop.is_some() {
                    break;
                }
                if report.pairs as usize >= self.config.max_pairs {
                    stop = Some(SessionOutcome::Stalled { reason: "pair budget exhausted".into() });
                    break;
                }
                report.pairs += 1;
                match self.work_pair(&pair, result, &mut report) {
                    Ok(next) => queue.extend(next),
                    Err(e) if e.code() == Some("BANNED") => {
                        report.errors.push(format!("pair {}: {e}", pair.pair_id));
                        stop = Some(SessionOutcome::Banned);
                    }
                    // The pair expired or was superseded; the next request tops the APS back up.
                    Err(e) if e.code() == Some("STALE_PAIR") => report.errors.push(format!("pair {}: {e}", pair.pair_id)),
                    Err(e) => return Err(e.into()),
                }
            }
            if let Some(outcome) = stop {
                break outcome;
            }
        };
        report.outcome = outcome;
        report.subpieces_held = self.store.len();
        Ok(report)
    }

    fn work_pair(&mut self, pair: &WirePair, fetched: Fetched, report: &mut SessionReport) -> Result<Vec<WirePair>, ApiError> {
        let (result, next) = self.attempt_pair(pair, fetched, report)?;
        report.pair_log.push(PairRecord {
            pair_id: pair.pair_id,
            issued_at: pair.issued_at,
            initial: pair.initial,
            download: pair.download.subpiece,
            upload: pair.upload.subpiece,
            target_site: pair.upload.target_site,
            result,
        });
        Ok(next)
    }

    fn attempt_pair(
        &mut self,
        pair: &WirePair,
        fetched: Fetched,
        report: &mut SessionReport,
    ) -> Result<(PairResult, Vec<WirePair>), ApiError> {
        match fetched {
            Fetched::Ok(bytes) => {
                report.downloads += 1;
                let d = &pair.download;
                let subpiece = SubPieceRef {
                    piece_index: d.subpiece.piece,
                    subpiece_index: d.subpiece.index,
                    length: bytes.len() as u64,
                    checksum: d.checksum.clone(),
                };
                if !self.store.contains_key(&d.subpiece) {
                    if let Some(hook) = self.on_subpiece_complete.as_mut() {
                        hook(d.subpiece, &bytes);
                    }
                    self.store.insert(d.subpiece, (subpiece, bytes));
                }
            }
            Fetched::Failed(observed) => {
                report.download_failures += 1;
                report.errors.push(format!("pair {}: download from {} failed: {observed}", pair.pair_id, pair.download.location));
                return Ok((PairResult::DownloadFailed, self.fail(pair, FailureStage::Download, Some(observed))?));
            }
        }
        let Some((subpiece, bytes)) = self.store.get(&pair.upload.subpiece).cloned() else {
            report.upload_failures += 1;
            report.errors.push(format!("pair {}: sub-piece {} to upload is not held", pair.pair_id, pair.upload.subpiece));
            return Ok((PairResult::UploadFailed, self.fail(pair, FailureStage::Upload, None)?));
        };
        let hints = &pair.upload.target_hints;
        let target = WriteTarget {
            base: &hints.base_url,
            site_id: pair.upload.target_site,
            protection: hints.protection,
            username: &self.config.peer_id,
            notice: &self.config.notice,
            tracking_url: &self.config.tracking_url,
        };
        let (wiki, retries, backoff) = (self.wiki, self.config.retries, self.config.backoff);
        let rng = &mut self.rng;
        let produced = with_retries(
            retries,
            backoff,
            |e| matches!(e, ProduceError::Wiki(WikiError::Transport(_))),
            || produce_replica(wiki, rng, &target, &subpiece, &bytes),
        );
        let claim = match produced {
            Ok(claim) => claim,
            Err(e) => {
                report.upload_failures += 1;
                report.errors.push(format!("pair {}: upload to site {} failed: {e}", pair.pair_id, pair.upload.target_site));
                return Ok((PairResult::UploadFailed, self.fail(pair, FailureStage::Upload, None)?));
            }
        };
        let location = claim.location.clone();
        let resp = self.tracker.report(&report_request(&self.config.peer_id, pair.pair_id, claim))?;
        report.phase = resp.phase;
        let result = if resp.accepted { PairResult::Replicated } else { PairResult::Rejected };
        if resp.accepted {
            report.uploads += 1;
            report.written.push(WrittenReplica { pair_id: pair.pair_id, subpiece: subpiece.id(), location });
        } else {
            report.rejected_reports += 1;
            report.errors.push(format!(
                "pair {}: report rejected: {}",
                pair.pair_id,
                resp.reason.as_deref().unwrap_or("no reason given")
            ));
        }
        Ok((result, resp.next_pair.into_iter().collect()))
    }

    fn fail(&mut self, pair: &WirePair, stage: FailureStage, observed: Option<ReplicaStatus>) -> Result<Vec<WirePair>, ApiError> {
        let req = FailureRequest { peer_id: self.peer_id(), pair_id: pair.pair_id, stage, observed, reason: None };
        Ok(self.tracker.failure(&req)?.replacement.into_iter().collect())
    }
}

fn report_request(peer_id: &str, pair_id: u64, claim: ReplicaClaim) -> ReportRequest {
    ReportRequest {
        peer_id: peer_id.to_owned(),
        pair_id,
        location: claim.location,
        key: claim.key,
        checksum: claim.checksum,
        start_marker: claim.start_marker,
        end_marker: claim.end_marker,
    }
}

/// Writes `copies` initial replicas of every sub-piece of `data` onto
/// writable sites and registers them with `tracker`, honoring its site reuse
/// policy.
pub fn seed_replicas<W, R>(
    tracker: &mut Tracker,
    wiki: &W,
    rng: &mut R,
    data: &[u8],
    copies: usize,
    notice: &str,
    now: Timestamp,
) -> Result<Vec<u64>, ClientError>
where
    W: WikiTransport + ?Sized,
    R: RngCore + CryptoRng,
{
    let manifest = tracker.manifest().clone();
    let reuse = tracker.config().site_reuse;
    let blocks = split(data, &manifest)?;
    let mut sites: Vec<_> = tracker.sites().iter().filter(|s| s.protection.is_writable()).cloned().collect();
    sites.shuffle(rng);
    let needed = match reuse {
        SiteReuse::OncePerFileset => blocks.len() * copies,
        SiteReuse::AcrossSubpieces => copies,
    };
    let mut cursor = 0usize;
    let mut ids = Vec::with_capacity(blocks.len() * copies);
    for (subpiece, bytes) in &blocks {
        if reuse == SiteReuse::AcrossSubpieces {
            cursor = 0;
        }
        for _ in 0..copies {
            let claim = loop {
                let site = sites.get(cursor).ok_or(ClientError::NotEnoughSites { needed, found: cursor })?;
                cursor += 1;
                let target = WriteTarget {
                    base: &site.base_url,
                    site_id: site.site_id,
                    protection: site.protection,
                    username: "publisher",
                    notice,
                    tracking_url: &manifest.tracker_url,
                };
                match produce_replica(wiki, rng, &target, subpiece, bytes) {
                    Ok(claim) => break claim,
                    Err(ProduceError::Refused(_)) | Err(ProduceError::Wiki(_)) => continue,
                    Err(e) => return Err(e.into()),
                }
            };
            ids.push(tracker.add_seed_replica(subpiece.clone(), claim, now)?);
        }
    }
    Ok(ids)
}

#[cfg(test)]
mod tests;
