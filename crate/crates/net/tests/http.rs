use std::sync::{Arc, Mutex};

use graffiti_core::client::{produce_replica, seed_replicas, Client, ClientConfig, TransportProxy, WikiTransport, WriteTarget};
use graffiti_core::fileset::{build_manifest, split, Geometry, SourceFile};
use graffiti_core::locator::{FetchOutcome, ReplicaLocator};
use graffiti_core::sitehost::{page_location, EditRequest, PopulationSpec, Protection, RefusalReason, SiteError, SiteHost};
use graffiti_core::status::{classify_probe, ReplicaStatus};
use graffiti_core::tracker::wire::{AnnounceRequest, PairsRequest};
use graffiti_core::tracker::{Clock, Tracker, TrackerApi, TrackerConfig, TrackerService};
use graffiti_core::client::WikiError;
use graffiti_core::HOUR;
use graffiti_net::{sitehost_router, spawn, tracker_router, Background, HttpTracker, HttpWiki, TrackerState};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn sitehost(spec: &PopulationSpec, seed: u64) -> (Background, HttpWiki) {
    let host = Arc::new(Mutex::new(SiteHost::from_spec(spec, seed)));
    let server = spawn(sitehost_router(host), "127.0.0.1:0").unwrap();
    let wiki = HttpWiki::new(&server.url()).unwrap();
    (server, wiki)
}

fn fileset(len: usize, seed: u64) -> Vec<u8> {
    let mut data = vec![0u8; len];
    ChaCha20Rng::seed_from_u64(seed).fill_bytes(&mut data);
    data
}

#[test]
fn page_reads_follow_the_fetch_contract() {
    let (_server, wiki) = sitehost(&PopulationSpec::with_counts(3, 0, 0), 1);
    let base = wiki.base().to_owned();
    let req = EditRequest { title: "alpha_page".into(), content: "hello".into(), ..Default::default() };
    assert_eq!(wiki.edit(&base, 0, &req).unwrap(), 1);
    match wiki.fetch(&page_location(&base, 0, "alpha_page")).unwrap() {
        FetchOutcome::Page(html) => assert!(html.contains("hello")),
        other => panic!("{other:?}"),
    }
    assert_eq!(wiki.fetch(&page_location(&base, 0, "nothing_here")).unwrap(), FetchOutcome::Missing);
    wiki.kill_site(1).unwrap();
    assert_eq!(wiki.fetch(&page_location(&base, 1, "alpha_page")).unwrap(), FetchOutcome::Unreachable);
    let err = wiki.edit(&base, 0, &EditRequest { create_only: true, ..req }).unwrap_err();
    assert_eq!(err, WikiError::Site(SiteError::TitleTaken));
}

#[test]
fn foreign_locations_are_never_contacted() {
    let (_server, wiki) = sitehost(&PopulationSpec::with_counts(1, 0, 0), 1);
    assert!(wiki.fetch("http://example.org/site/0/wiki/page").is_err());
    let req = EditRequest { title: "page".into(), content: "x".into(), ..Default::default() };
    assert!(matches!(wiki.edit("http://example.org", 0, &req), Err(WikiError::Transport(_))));
    assert!(HttpWiki::new("https://example.org").is_err());
}

#[test]
fn gates_hold_over_http() {
    let spec = PopulationSpec { captcha: 1, ..PopulationSpec::with_counts(0, 1, 1) };
    let (_server, wiki) = sitehost(&spec, 3);
    let base = wiki.base().to_owned();
    let state = wiki.state().unwrap();
    let site = |p: Protection| state.sites.iter().find(|s| s.protection == p).unwrap().site_id;
    let req = EditRequest { title: "gate_test".into(), content: "x".into(), ..Default::default() };
    let refused = |r| WikiError::Site(SiteError::Refused(r));
    assert_eq!(wiki.edit(&base, site(Protection::Registration), &req).unwrap_err(), refused(RefusalReason::NeedsAccount));
    assert_eq!(wiki.edit(&base, site(Protection::Puzzle), &req).unwrap_err(), refused(RefusalReason::WrongPuzzle));
    assert_eq!(wiki.edit(&base, site(Protection::Captcha), &req).unwrap_err(), refused(RefusalReason::CaptchaRequired));

    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let data = fileset(300, 1);
    let manifest = build_manifest("g", &[SourceFile { path: "g", bytes: &data }], Geometry::new(512, 256).unwrap(), "").unwrap();
    let (subpiece, bytes) = split(&data, &manifest).unwrap().remove(0);
    for p in [Protection::Registration, Protection::Puzzle] {
        let target = WriteTarget { base: &base, site_id: site(p), protection: p, username: "u", notice: "n", tracking_url: "" };
        let claim = produce_replica(&wiki, &mut rng, &target, &subpiece, bytes).unwrap();
        let locator = ReplicaLocator {
            location: claim.location,
            key: claim.key,
            checksum: claim.checksum,
            start_marker: claim.start_marker,
            end_marker: claim.end_marker,
        };
        let (outcome, back) = locator.probe(&wiki.fetch(&locator.location).unwrap());
        assert_eq!(classify_probe(outcome), ReplicaStatus::Available);
        assert_eq!(back.as_deref(), Some(bytes));
    }
}

#[test]
fn tracker_errors_carry_codes() {
    let (_sites, wiki) = sitehost(&PopulationSpec::desk(), 7);
    let data = fileset(4096, 2);
    let manifest = build_manifest("e", &[SourceFile { path: "e", bytes: &data }], Geometry::new(2048, 1024).unwrap(), "").unwrap();
    let tracker = Tracker::new(manifest.clone(), TrackerConfig::default(), wiki.directory().unwrap(), 1);
    let service = TrackerService::new(tracker, Clock::logical(0), Box::new(TransportProxy(wiki.clone())));
    let server = spawn(tracker_router(TrackerState::new(service, None)), "127.0.0.1:0").unwrap();
    let mut http = HttpTracker::new(&server.url()).unwrap();
    let err = http
        .announce(&AnnounceRequest { info_hash: "00".into(), peer_id: "p".into(), have_pieces: String::new() })
        .unwrap_err();
    assert_eq!(err.code(), Some("NOT_TRACKED"));
    let err = http.request_pairs(&PairsRequest { info_hash: manifest.info_hash.clone(), peer_id: "ghost".into() }).unwrap_err();
    assert_eq!(err.code(), Some("UNKNOWN_PEER"));
    assert_eq!(http.manifest().unwrap(), manifest);
    let before = http.advance(0).unwrap();
    assert_eq!(http.advance(HOUR).unwrap(), before + HOUR);
}

#[test]
fn a_session_over_http_rebuilds_the_fileset() {
    let (_sites, wiki) = sitehost(&PopulationSpec::desk(), 7);
    let data = fileset(3 * 512 * 1024, 7);
    let manifest = build_manifest(
        "desk",
        &[SourceFile { path: "desk.bin", bytes: &data }],
        Geometry::new(512 * 1024, 64 * 1024).unwrap(),
        "",
    )
    .unwrap();
    let config = TrackerConfig { aps_capacity: 4, ips_window: HOUR, ..TrackerConfig::default() };
    let mut tracker = Tracker::new(manifest, config, wiki.directory().unwrap(), 7);
    seed_replicas(&mut tracker, &wiki, &mut ChaCha20Rng::seed_from_u64(7), &data, 1, "seed", 0).unwrap();
    let service = TrackerService::new(tracker, Clock::logical(0), Box::new(TransportProxy(wiki.clone())));
    let server = spawn(tracker_router(TrackerState::new(service, None)), "127.0.0.1:0").unwrap();

    let mut http = HttpTracker::new(&server.url()).unwrap();
    let mut config = ClientConfig::new("peer-1", 7);
    config.backoff = std::time::Duration::ZERO;
    let mut client = Client::new(&mut http, &wiki, config);
    let report = client.run().unwrap();
    assert_eq!(client.assembled().unwrap(), data);
    assert!(report.uploads >= 32, "{report:?}");
    assert_eq!(report.written.len(), report.uploads as usize);
    assert!(report.errors.is_empty(), "{:?}", report.errors);
}
