use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use super::*;
use crate::fileset::{build_manifest, Geometry, SourceFile};
use crate::sitehost::{Challenge, EditRequest, PopulationSpec, Protection, RefusalReason, SiteError, SiteHost};
use crate::tracker::{site_directory, Clock, TrackerConfig, TrackerService};
use crate::HOUR;

const BASE: &str = "http://wiki.test";

struct World {
    service: TrackerService,
    wiki: LocalWiki,
    data: Vec<u8>,
}

fn payload(len: usize, salt: u8) -> Vec<u8> {
    let mut rng = ChaCha20Rng::seed_from_u64(salt as u64);
    let mut out = vec![0u8; len];
    rng.fill_bytes(&mut out);
    out
}

fn world(spec: &PopulationSpec, len: usize, geometry: Geometry, copies: usize, seed: u64) -> World {
    let data = payload(len, seed as u8);
    let manifest = build_manifest("demo", &[SourceFile { path: "demo.bin", bytes: &data }], geometry, "http://tracker.test")
        .unwrap();
    let host = SiteHost::from_spec(spec, seed);
    let sites = site_directory(&host, BASE);
    let wiki = LocalWiki::new(Arc::new(Mutex::new(host)), BASE);
    let config = TrackerConfig { ips_window: HOUR, ..Default::default() };
    let mut tracker = Tracker::new(manifest, config, sites, seed);
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xabc);
    seed_replicas(&mut tracker, &wiki, &mut rng, &data, copies, DEFAULT_NOTICE, 0).unwrap();
    let service = TrackerService::new(tracker, Clock::logical(0), Box::new(TransportProxy(wiki.clone())));
    World { service, wiki, data }
}

fn quiet_config(peer: &str, seed: u64) -> ClientConfig {
    ClientConfig { backoff: Duration::ZERO, ..ClientConfig::new(peer, seed) }
}

fn small_geometry() -> Geometry {
    Geometry::new(256, 64).unwrap()
}

#[test]
fn reconstructs_a_fileset_from_seed_replicas() {
    let mut w = world(&PopulationSpec::desk(), 1_572_864, Geometry::DEFAULT, 1, 7);
    assert_eq!(w.service.tracker().subpiece_count(), 24);
    let mut client = Client::new(&mut w.service, &w.wiki, quiet_config("peer-1", 1));
    let report = client.run().unwrap();
    assert_eq!(report.outcome, SessionOutcome::Complete);
    assert_eq!(client.assembled().unwrap(), w.data);
    assert!(report.uploads >= 32, "{report:?}");
    assert!(report.uploads >= report.downloads);
    assert_eq!(report.phase, Phase::Normal);
    assert!(report.errors.is_empty(), "{:?}", report.errors);
    drop(client);
    let live: u32 = w.service.tracker().live_counts().iter().sum();
    assert_eq!(live, 24 + report.uploads);
}

#[test]
fn identical_seeds_give_identical_reports() {
    let run = || {
        let mut w = world(&PopulationSpec::desk(), 24 * 64, small_geometry(), 1, 3);
        let report = Client::new(&mut w.service, &w.wiki, quiet_config("peer", 9)).run().unwrap();
        (serde_json::to_string(&report).unwrap(), w.service.snapshot_json())
    };
    assert_eq!(run(), run());
}

#[test]
fn missing_subpiece_starves_with_its_ordinal() {
    let mut w = world(&PopulationSpec::desk(), 12 * 64, small_geometry(), 1, 5);
    let victim = w.service.tracker().replicas().iter().find(|r| r.subpiece.id() == SubPieceId { piece: 1, index: 1 }).unwrap().clone();
    {
        let (_, site, title) = crate::sitehost::parse_location(&victim.location).unwrap();
        w.wiki.host().lock().unwrap().delete_page(site, title).unwrap();
    }
    w.service.verify_all().unwrap();
    let report = Client::new(&mut w.service, &w.wiki, quiet_config("peer", 2)).run().unwrap();
    match report.outcome {
        SessionOutcome::Starved { ordinals, progress } => {
            assert_eq!(ordinals, vec![5]);
            let held = crate::tracker::decode_bitfield(&progress, 12).unwrap();
            assert!(!held.contains(&5));
            assert_eq!(held.len(), 11);
        }
        other => panic!("expected starvation, got {other:?}"),
    }
}

fn target(protection: Protection, site_id: u32) -> WriteTarget<'static> {
    WriteTarget { base: BASE, site_id, protection, username: "tester", notice: DEFAULT_NOTICE, tracking_url: "" }
}

fn first_site(wiki: &LocalWiki, p: Protection) -> u32 {
    wiki.host().lock().unwrap().sites().iter().find(|s| s.protection == p).unwrap().site_id
}

fn block() -> (SubPieceRef, Vec<u8>) {
    let bytes = payload(64, 1);
    let r = SubPieceRef { piece_index: 0, subpiece_index: 0, length: 64, checksum: crate::canonical::sha256_hex(&bytes) };
    (r, bytes)
}

#[test]
fn produces_on_every_passable_gate() {
    let spec = PopulationSpec { captcha: 1, closed: 1, ..PopulationSpec::with_counts(1, 1, 1) };
    let wiki = LocalWiki::new(Arc::new(Mutex::new(SiteHost::from_spec(&spec, 1))), BASE);
    let (r, bytes) = block();
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    for p in [Protection::Anonymous, Protection::Registration, Protection::Puzzle] {
        let claim = produce_replica(&wiki, &mut rng, &target(p, first_site(&wiki, p)), &r, &bytes).unwrap();
        let locator = ReplicaLocator {
            location: claim.location,
            key: claim.key,
            checksum: claim.checksum,
            start_marker: claim.start_marker,
            end_marker: claim.end_marker,
        };
        let fetched = wiki.fetch(&locator.location).unwrap();
        assert_eq!(locator.probe(&fetched).1.unwrap(), bytes, "{p}");
    }
    for (p, reason) in [(Protection::Captcha, RefusalReason::CaptchaRequired), (Protection::Closed, RefusalReason::Closed)] {
        let err = produce_replica(&wiki, &mut rng, &target(p, first_site(&wiki, p)), &r, &bytes).unwrap_err();
        assert_eq!(err, ProduceError::Refused(reason));
    }
}

/// Wraps a transport and lets a test tamper with edits.
struct Tamper<F: Fn(&EditRequest) -> Option<Result<u64, WikiError>> + Sync> {
    inner: LocalWiki,
    edits: AtomicUsize,
    rule: F,
}

impl<F: Fn(&EditRequest) -> Option<Result<u64, WikiError>> + Sync> WikiTransport for Tamper<F> {
    fn fetch(&self, location: &str) -> Result<FetchOutcome, String> {
        self.inner.fetch(location)
    }
    fn register(&self, base: &str, site_id: u32, username: &str) -> Result<String, WikiError> {
        self.inner.register(base, site_id, username)
    }
    fn challenge(&self, base: &str, site_id: u32) -> Result<Challenge, WikiError> {
        self.inner.challenge(base, site_id)
    }
    fn edit(&self, base: &str, site_id: u32, req: &EditRequest) -> Result<u64, WikiError> {
        self.edits.fetch_add(1, Ordering::SeqCst);
        match (self.rule)(req) {
            Some(result) => result,
            None => self.inner.edit(base, site_id, req),
        }
    }
}

#[test]
fn title_collisions_fall_back_to_random_text() {
    let inner = LocalWiki::new(Arc::new(Mutex::new(SiteHost::from_spec(&PopulationSpec::with_counts(1, 0, 0), 1))), BASE);
    let wiki = Tamper {
        inner,
        edits: AtomicUsize::new(0),
        rule: |req: &EditRequest| req.title.contains('_').then_some(Err(WikiError::Site(SiteError::TitleTaken))),
    };
    let (r, bytes) = block();
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let claim = produce_replica(&wiki, &mut rng, &target(Protection::Anonymous, 0), &r, &bytes).unwrap();
    assert_eq!(wiki.edits.load(Ordering::SeqCst), TITLE_ATTEMPTS + 1);
    let title = claim.location.rsplit('/').next().unwrap();
    assert_eq!(title.len(), 12);
    assert!(title.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit()));
}

#[test]
fn read_back_mismatch_is_never_returned() {
    let inner = LocalWiki::new(Arc::new(Mutex::new(SiteHost::from_spec(&PopulationSpec::with_counts(1, 0, 0), 1))), BASE);
    let host = inner.host().clone();
    let wiki = Tamper {
        inner,
        edits: AtomicUsize::new(0),
        rule: move |req: &EditRequest| {
            let mut bad = req.clone();
            bad.content = bad.content.replacen('A', "B", 1).replacen('Q', "R", 1);
            Some(host.lock().unwrap().edit_page(0, &bad).map_err(WikiError::Site))
        },
    };
    let (r, bytes) = block();
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let err = produce_replica(&wiki, &mut rng, &target(Protection::Anonymous, 0), &r, &bytes).unwrap_err();
    assert!(matches!(err, ProduceError::ReadBack { outcome: ProbeOutcome::ChecksumMismatch, .. }), "{err:?}");
}

#[test]
fn fetch_classifies_failures() {
    let mut w = world(&PopulationSpec::with_counts(10, 0, 0), 4 * 64, small_geometry(), 1, 8);
    let hash = w.service.tracker().manifest().info_hash.clone();
    let s = w.service.tracker_mut().announce("p", &hash, &BTreeSet::new(), 1).unwrap();
    let pairs: Vec<WirePair> = s.pairs.iter().map(|p| w.service.tracker().to_wire(p)).collect();
    let config = quiet_config("p", 1);
    assert!(matches!(fetch_replica(&w.wiki, &pairs[0], &config), Fetched::Ok(_)));
    let site_of = |p: &WirePair| crate::sitehost::parse_location(&p.download.location).map(|(_, s, t)| (s, t.to_owned())).unwrap();
    {
        let mut host = w.wiki.host().lock().unwrap();
        let (site, title) = site_of(&pairs[1]);
        let req = EditRequest { title, content: "edited".into(), ..Default::default() };
        host.edit_page(site, &req).unwrap();
        let (site, title) = site_of(&pairs[2]);
        host.delete_page(site, &title).unwrap();
        let (site, _) = site_of(&pairs[3]);
        host.kill_site(site).unwrap();
    }
    let status = |p: &WirePair| match fetch_replica(&w.wiki, p, &config) {
        Fetched::Ok(_) => ReplicaStatus::Available,
        Fetched::Failed(s) => s,
    };
    assert_eq!(status(&pairs[1]), ReplicaStatus::Changed);
    assert_eq!(status(&pairs[2]), ReplicaStatus::Removed);
    assert_eq!(status(&pairs[3]), ReplicaStatus::NotFound);
}

#[test]
fn without_writes_the_client_stays_initializing() {
    let mut w = world(&PopulationSpec::desk(), 36 * 64, small_geometry(), 1, 4);
    let wiki = Tamper {
        inner: w.wiki.clone(),
        edits: AtomicUsize::new(0),
        rule: |_: &EditRequest| Some(Err(WikiError::Site(SiteError::Refused(RefusalReason::Closed)))),
    };
    let mut client = Client::new(&mut w.service, &wiki, quiet_config("leech", 3));
    let report = client.run().unwrap();
    assert_eq!(report.phase, Phase::Initializing);
    assert!(report.subpieces_held <= 4, "{report:?}");
    assert_eq!(report.uploads, 0);
    assert!(matches!(report.outcome, SessionOutcome::Stalled { .. }));
}

#[test]
fn hook_sees_each_subpiece_once() {
    let mut w = world(&PopulationSpec::desk(), 8 * 64, small_geometry(), 1, 6);
    let seen = Arc::new(Mutex::new(Vec::new()));
    let sink = seen.clone();
    let mut client = Client::new(&mut w.service, &w.wiki, quiet_config("peer", 5));
    client.on_subpiece_complete(move |id, _| sink.lock().unwrap().push(id));
    assert_eq!(client.run().unwrap().outcome, SessionOutcome::Complete);
    let seen = seen.lock().unwrap();
    let unique: BTreeSet<_> = seen.iter().collect();
    assert_eq!(seen.len(), 8);
    assert_eq!(unique.len(), 8);
}

#[test]
fn retries_back_off_then_give_up() {
    let calls = AtomicUsize::new(0);
    let out: Result<(), ()> = with_retries(3, Duration::ZERO, |_| true, || {
        calls.fetch_add(1, Ordering::SeqCst);
        Err(())
    });
    assert!(out.is_err());
    assert_eq!(calls.load(Ordering::SeqCst), 4);
}
