//! Randomized protocol driver for auditing the tracker.
//!
//! A seeded sequence interleaves honest peers with several kinds of rogue
//! peer against one in-process tracker, checking the tit-for-tat ledger and
//! the initialization bound after every step.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::client::{produce_replica, word_title, seed_replicas, LocalWiki, TransportProxy, WriteTarget};
use crate::codec::{encode_payload, generate_key};
use crate::fileset::{build_manifest, split, Geometry, SourceFile, SubPieceId, SubPieceRef};
use crate::sitehost::{page_location, PopulationSpec, SiteHost};
use crate::tracker::wire::FailureStage;
use crate::tracker::{site_directory, Phase, ReplicaClaim, RequestPair, Tracker, TrackerConfig};
use crate::{Timestamp, HOUR, MINUTE};

const BASE: &str = "http://fuzz.test";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Completes every pair it is given.
    Honest,
    /// Requests pairs and never reports anything.
    Silent,
    /// Reports replicas it never wrote.
    Forger,
    /// Claims live download replicas are dead.
    Liar,
    /// Honest until the normal phase, then stops reporting.
    Freeloader,
    /// Re-reports locations that are already registered.
    Duplicator,
}

impl Role {
    pub const ALL: [Role; 6] = [Role::Honest, Role::Silent, Role::Forger, Role::Liar, Role::Freeloader, Role::Duplicator];
}

#[derive(Clone, Debug)]
pub struct FuzzConfig {
    pub subpieces: u64,
    pub subpiece_length: u64,
    pub steps: usize,
    pub peers: usize,
    pub sites: u32,
    pub tracker: TrackerConfig,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig {
            subpieces: 36,
            subpiece_length: 64,
            steps: 400,
            peers: 8,
            sites: 600,
            tracker: TrackerConfig { ips_window: HOUR, ..TrackerConfig::default() },
        }
    }
}

/// What one sequence exercised and any invariant breaches it found.
#[derive(Clone, Debug, Default)]
pub struct FuzzReport {
    pub roles: Vec<Role>,
    /// Ledger checks made on normal-phase sessions.
    pub ledger_checks: u64,
    pub ledger_violations: Vec<String>,
    /// (peer, IPS window) pairs observed for never-reporting peers.
    pub windows_observed: u64,
    pub ips_violations: Vec<String>,
    /// Most distinct sub-pieces any never-reporting peer saw in one window.
    pub max_silent_distinct: usize,
    pub ips_size: usize,
    pub reports_accepted: u64,
    pub reports_rejected: u64,
    pub banned: usize,
    pub refunded: u64,
}

struct Peer {
    id: String,
    role: Role,
    /// IPS window of the current session.
    window: Timestamp,
    seen: BTreeMap<Timestamp, BTreeSet<SubPieceId>>,
    written: Vec<ReplicaClaim>,
}

struct World {
    tracker: Tracker,
    wiki: LocalWiki,
    blocks: BTreeMap<SubPieceId, (SubPieceRef, Vec<u8>)>,
    rng: ChaCha20Rng,
    now: Timestamp,
    report: FuzzReport,
}

impl World {
    fn info_hash(&self) -> String {
        self.tracker.manifest().info_hash.clone()
    }

    fn observe(&mut self, peer: &mut Peer, pairs: &[RequestPair]) {
        if peer.role != Role::Silent {
            return;
        }
        let seen = peer.seen.entry(peer.window).or_default();
        seen.extend(pairs.iter().map(|p| p.download.id()));
    }

    fn announce(&mut self, peer: &mut Peer) {
        let hash = self.info_hash();
        if let Ok(s) = self.tracker.announce(&peer.id, &hash, &BTreeSet::new(), self.now) {
            peer.window = self.tracker.ips().window_start;
            self.observe(peer, &s.pairs);
        }
    }

    fn request(&mut self, peer: &mut Peer) {
        let hash = self.info_hash();
        if let Ok(s) = self.tracker.request_pairs(&peer.id, &hash, self.now) {
            self.observe(peer, &s.pairs);
        }
    }

    fn open_pair(&mut self, peer: &Peer) -> Option<RequestPair> {
        let session = self.tracker.peer(&peer.id)?;
        let pairs: Vec<RequestPair> = session.pairs().cloned().collect();
        pairs.choose(&mut self.rng).cloned()
    }

    fn honest_write(&mut self, peer: &mut Peer, pair: &RequestPair) {
        let (subpiece, bytes) = self.blocks[&pair.upload_subpiece.id()].clone();
        let Some(site) = self.tracker.site(pair.upload_target).cloned() else { return };
        let target = WriteTarget {
            base: &site.base_url,
            site_id: site.site_id,
            protection: site.protection,
            username: &peer.id,
            notice: "fuzz",
            tracking_url: "",
        };
        let Ok(claim) = produce_replica(&self.wiki, &mut self.rng, &target, &subpiece, &bytes) else { return };
        peer.written.push(claim.clone());
        self.submit(peer, pair.pair_id, claim);
    }

    fn submit(&mut self, peer: &Peer, pair_id: u64, claim: ReplicaClaim) {
        let mut proxy = TransportProxy(self.wiki.clone());
        if let Ok(out) = self.tracker.report_replica(&peer.id, pair_id, claim, &mut proxy, self.now) {
            if out.accepted {
                self.report.reports_accepted += 1;
            } else {
                self.report.reports_rejected += 1;
            }
        }
    }

    fn forge(&mut self, peer: &Peer, pair: &RequestPair) {
        let key = generate_key(&mut self.rng);
        let junk: Vec<u8> = (0..pair.upload_subpiece.length).map(|_| self.rng.gen()).collect();
        let payload = encode_payload(&junk, &key).expect("non-empty");
        let title = word_title(&mut self.rng);
        let claim = ReplicaClaim {
            location: page_location(BASE, pair.upload_target, &title),
            key,
            // Claims the right checksum but nothing was written.
            checksum: pair.upload_subpiece.checksum.clone(),
            start_marker: payload.start_marker,
            end_marker: payload.end_marker,
        };
        self.submit(peer, pair.pair_id, claim);
    }

    fn step(&mut self, peer: &mut Peer) {
        if self.tracker.is_banned(&peer.id) {
            return;
        }
        if self.tracker.peer(&peer.id).is_none() || self.rng.gen_bool(0.05) {
            self.announce(peer);
            return;
        }
        let Some(pair) = self.open_pair(peer) else {
            self.request(peer);
            return;
        };
        match peer.role {
            Role::Honest => self.honest_write(peer, &pair),
            Role::Silent => self.request(peer),
            Role::Forger => self.forge(peer, &pair),
            Role::Liar => {
                let mut proxy = TransportProxy(self.wiki.clone());
                let _ = self.tracker.report_failure(&peer.id, pair.pair_id, FailureStage::Download, &mut proxy, self.now);
            }
            Role::Freeloader => {
                let phase = self.tracker.peer(&peer.id).map(|s| s.phase);
                if phase == Some(Phase::Initializing) {
                    self.honest_write(peer, &pair);
                } else {
                    self.request(peer);
                }
            }
            Role::Duplicator => {
                let reused = self.tracker.replicas().choose(&mut self.rng).cloned();
                match (peer.written.is_empty(), reused) {
                    (false, _) if self.rng.gen_bool(0.5) => self.honest_write(peer, &pair),
                    (_, Some(r)) => {
                        let claim = ReplicaClaim {
                            location: r.location,
                            key: r.key,
                            checksum: r.checksum,
                            start_marker: r.start_marker,
                            end_marker: r.end_marker,
                        };
                        self.submit(peer, pair.pair_id, claim);
                    }
                    _ => self.honest_write(peer, &pair),
                }
            }
        }
    }

    fn check_ledger(&mut self) {
        let capacity = self.tracker.config().aps_capacity as u64;
        for s in self.tracker.peers() {
            if s.phase != Phase::Normal {
                continue;
            }
            self.report.ledger_checks += 1;
            if s.issued() > s.validated() + capacity {
                self.report.ledger_violations.push(format!(
                    "t={} {}: issued {} validated {} refunded {}",
                    self.now,
                    s.peer_id,
                    s.issued(),
                    s.validated(),
                    s.refunded()
                ));
            }
        }
    }
}

/// Runs one seeded sequence. Every role appears at least once when
/// `config.peers` allows it.
pub fn fuzz_sequence(seed: u64, config: &FuzzConfig) -> FuzzReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let len = config.subpieces * config.subpiece_length;
    let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
    let manifest = build_manifest(
        "fuzz",
        &[SourceFile { path: "fuzz.bin", bytes: &data }],
        Geometry::new(4 * config.subpiece_length, config.subpiece_length).expect("valid geometry"),
        "",
    )
    .expect("non-empty fileset");
    let host = SiteHost::from_spec(&PopulationSpec::with_counts(config.sites, 0, 0), seed);
    let sites = site_directory(&host, BASE);
    let wiki = LocalWiki::new(Arc::new(Mutex::new(host)), BASE);
    let mut tracker = Tracker::new(manifest.clone(), config.tracker.clone(), sites, seed);
    seed_replicas(&mut tracker, &wiki, &mut rng, &data, 1, "seed", 0).expect("enough sites to seed");
    let blocks = split(&data, &manifest)
        .expect("length matches")
        .into_iter()
        .map(|(r, b)| (r.id(), (r, b.to_vec())))
        .collect();

    let roles: Vec<Role> = (0..config.peers.max(1))
        .map(|i| Role::ALL.get(i).copied().unwrap_or_else(|| *Role::ALL.choose(&mut rng).expect("non-empty")))
        .collect();
    let mut peers: Vec<Peer> = roles
        .iter()
        .enumerate()
        .map(|(i, &role)| Peer { id: format!("{role:?}-{i}").to_lowercase(), role, window: 0, seen: BTreeMap::new(), written: Vec::new() })
        .collect();

    let mut world = World {
        tracker,
        wiki,
        blocks,
        rng,
        now: 0,
        report: FuzzReport { roles, ..Default::default() },
    };
    for _ in 0..config.steps {
        world.now += if world.rng.gen_bool(0.05) {
            world.rng.gen_range(30..=150) * MINUTE
        } else {
            world.rng.gen_range(0..=5) * MINUTE
        };
        let i = world.rng.gen_range(0..peers.len());
        world.step(&mut peers[i]);
        world.check_ledger();
    }

    let t = &world.tracker;
    let ips_size = t.ips_history().iter().chain([t.ips()]).map(|i| i.entries.len()).max().unwrap_or(0);
    world.report.ips_size = ips_size;
    for p in peers.iter().filter(|p| p.role == Role::Silent) {
        for (window, seen) in &p.seen {
            world.report.windows_observed += 1;
            world.report.max_silent_distinct = world.report.max_silent_distinct.max(seen.len());
            if seen.len() > ips_size {
                world.report.ips_violations.push(format!("{} window {window}: {} distinct sub-pieces", p.id, seen.len()));
            }
        }
    }
    world.report.banned = peers.iter().filter(|p| world.tracker.is_banned(&p.id)).count();
    world.report.refunded = world.tracker.counters().refunded;
    world.report
}
