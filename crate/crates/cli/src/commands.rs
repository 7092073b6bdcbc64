use std::error::Error;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Component, Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use graffiti_core::canonical::to_canonical_string;
use graffiti_core::client::{seed_replicas, Client, ClientConfig, SessionOutcome, TransportProxy, WikiTransport};
use graffiti_core::fileset::{build_manifest, split_files, FilesetManifest, Geometry, SourceFile};
use graffiti_core::locator::ReplicaLocator;
use graffiti_core::sim::{self, calibrate, classify_probe, HazardModel, Milestones};
use graffiti_core::sitehost::{PopulationSpec, SiteHost};
use graffiti_core::tracker::{Clock, SiteReuse, Tracker, TrackerConfig, TrackerService};
use graffiti_core::{HOUR, MINUTE};
use graffiti_net::{serve_forever, sitehost_router, tracker_router, HttpTracker, HttpWiki, TrackerState};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::args::*;

type Result<T> = std::result::Result<T, Box<dyn Error>>;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| format!("{}: {e}", path.display()).into())
}

/// Writes to `path`, or to stdout when there is none.
fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| format!("{}: {e}", p.display()).into()),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

fn announce_listening(addr: std::net::SocketAddr) {
    println!("listening on http://{addr}");
    let _ = std::io::stdout().flush();
    tracing::info!(%addr, "listening");
}

pub fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Manifest(ManifestCmd::Create(a)) => manifest_create(a),
        Command::Tracker(TrackerCmd::Serve(a)) => tracker_serve(a, cli.seed),
        Command::Client(ClientCmd::Run(a)) => client_run(a, cli.seed),
        Command::Sitehost(SitehostCmd::Serve(a)) => sitehost_serve(a, cli.seed),
        Command::Sim(SimCmd::Run(a)) => sim_run(a, cli.seed),
        Command::Sim(SimCmd::Calibrate(a)) => sim_calibrate(a),
        Command::Sim(SimCmd::Probe(a)) => sim_probe(a),
    }
}

fn file_name(path: &Path) -> Result<String> {
    Ok(path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| format!("{}: not a file name", path.display()))?
        .to_owned())
}

fn manifest_create(a: &ManifestCreate) -> Result<ExitCode> {
    let contents: Vec<(String, Vec<u8>)> =
        a.files.iter().map(|p| Ok((file_name(p)?, read(p)?))).collect::<Result<_>>()?;
    for (i, (name, _)) in contents.iter().enumerate() {
        if contents[..i].iter().any(|(n, _)| n == name) {
            return Err(format!("two input files are named {name}").into());
        }
    }
    let sources: Vec<SourceFile<'_>> = contents.iter().map(|(n, b)| SourceFile { path: n, bytes: b }).collect();
    let name = a.name.clone().unwrap_or_else(|| contents[0].0.clone());
    let manifest = build_manifest(&name, &sources, Geometry::new(a.piece, a.subpiece)?, &a.tracker_url)?;
    tracing::info!(pieces = manifest.piece_count(), subpieces = manifest.subpiece_count(), info_hash = %manifest.info_hash, "manifest built");
    emit(a.out.as_deref(), &(manifest.to_canonical_json() + "\n"))?;
    Ok(ExitCode::SUCCESS)
}

fn load_manifest(path: &Path) -> Result<FilesetManifest> {
    Ok(FilesetManifest::from_json(&read_text(path)?)?)
}

fn tracker_serve(a: &TrackerServe, seed: u64) -> Result<ExitCode> {
    let wiki = HttpWiki::new(&a.sites)?;
    let clock = match a.clock {
        ClockKind::Logical => None,
        ClockKind::Wall => Some(Clock::Wall),
    };
    let proxy = Box::new(TransportProxy(wiki.clone()));
    let resume = a.state.as_deref().filter(|p| p.exists());
    let service = if let Some(path) = resume {
        tracing::info!(state = %path.display(), "resuming");
        TrackerService::from_snapshot(&read_text(path)?, clock, proxy)?
    } else {
        let manifest = load_manifest(a.manifest.as_deref().ok_or("--manifest is required without an existing --state")?)?;
        let config = TrackerConfig {
            aps_capacity: a.aps_capacity,
            ips_window: (a.ips_window * HOUR as f64).round() as i64,
            verify_prob: a.verify_prob,
            strike_threshold: a.strike_threshold,
            pair_expiry: a.pair_timeout * MINUTE,
            pairs_per_hour: a.pairs_per_hour,
            site_reuse: match a.site_reuse {
                ReuseKind::Once => SiteReuse::OncePerFileset,
                ReuseKind::Across => SiteReuse::AcrossSubpieces,
            },
        };
        if config.aps_capacity == 0 || config.ips_window <= 0 || !(0.0..=1.0).contains(&config.verify_prob) {
            return Err("aps capacity and ips window must be positive, verify probability within [0, 1]".into());
        }
        let mut tracker = Tracker::new(manifest.clone(), config, wiki.directory()?, seed);
        if !a.publish.is_empty() {
            let mut data = Vec::new();
            for p in &a.publish {
                data.extend(read(p)?);
            }
            let sources = [SourceFile { path: "check", bytes: &data }];
            let check = build_manifest("check", &sources, manifest.geometry(), "")?;
            if check.piece_checksums != manifest.piece_checksums {
                return Err("published files do not match the manifest".into());
            }
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let notice = graffiti_core::client::DEFAULT_NOTICE;
            let ids = seed_replicas(&mut tracker, &wiki, &mut rng, &data, a.copies, notice, 0)?;
            tracing::info!(replicas = ids.len(), "published initial replicas");
        }
        let start = clock.unwrap_or(Clock::logical(0));
        TrackerService::new(tracker, start, proxy)
    };
    let state = TrackerState::new(service, a.state.clone());
    state.persist(&state.lock())?;
    serve_forever(tracker_router(state), &a.bind, announce_listening)?;
    Ok(ExitCode::SUCCESS)
}

/// Rejects manifest paths that would escape the output directory.
fn contained(dir: &Path, rel: &str) -> Result<PathBuf> {
    let path = Path::new(rel);
    if rel.is_empty() || !path.components().all(|c| matches!(c, Component::Normal(_))) {
        return Err(format!("refusing to write manifest path {rel:?}").into());
    }
    Ok(dir.join(path))
}

fn client_run(a: &ClientRun, seed: u64) -> Result<ExitCode> {
    let Adapter::Mockwiki = a.adapters;
    let wiki = HttpWiki::new(&a.sites)?;
    let mut tracker = HttpTracker::new(&a.tracker)?;
    let peer = a.peer_id.clone().unwrap_or_else(|| format!("peer-{seed}"));
    let mut config = ClientConfig::new(&peer, seed);
    config.retries = a.retries;
    config.backoff = Duration::from_millis(a.backoff_ms);
    config.max_parallel = a.limit_parallel.max(1);
    if let Some(n) = &a.notice {
        config.notice = n.clone();
    }
    let mut client = Client::new(&mut tracker, &wiki, config);
    if let Some(path) = &a.manifest {
        client.use_manifest(load_manifest(path)?)?;
    }
    let report = client.run()?;
    tracing::info!(outcome = ?report.outcome, uploads = report.uploads, downloads = report.downloads, "session finished");
    let complete = report.outcome == SessionOutcome::Complete;
    if let (true, Some(dir)) = (complete, &a.out) {
        let data = client.assembled()?;
        let manifest = client.manifest().expect("manifest known after a session");
        std::fs::create_dir_all(dir)?;
        for (rel, bytes) in split_files(&data, manifest)? {
            let path = contained(dir, rel)?;
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&path, bytes)?;
        }
    }
    emit(a.report.as_deref(), &(to_canonical_string(&report)? + "\n"))?;
    Ok(if complete { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn population(path: Option<&Path>, fallback: PopulationSpec) -> Result<PopulationSpec> {
    match path {
        Some(p) => read_json(p),
        None => Ok(fallback),
    }
}

fn sitehost_serve(a: &SitehostServe, seed: u64) -> Result<ExitCode> {
    let counts = PopulationSpec {
        captcha: a.captcha,
        closed: a.closed,
        ..PopulationSpec::with_counts(a.anonymous, a.registration, a.puzzle)
    };
    let spec = population(a.population.as_deref(), counts)?;
    let host = SiteHost::from_spec(&spec, seed);
    tracing::info!(sites = host.sites().len(), seed, "population created");
    serve_forever(sitehost_router(Arc::new(Mutex::new(host))), &a.bind, announce_listening)?;
    Ok(ExitCode::SUCCESS)
}

fn sim_run(a: &SimRun, seed: u64) -> Result<ExitCode> {
    if a.days == 0 {
        return Err("--days must be at least 1".into());
    }
    let spec = population(a.population.as_deref(), PopulationSpec::experiment())?;
    let hazard = match &a.hazards {
        Some(p) => read_json::<HazardModel>(p)?,
        None => HazardModel::calibrated(),
    };
    hazard.validate()?;
    let timeline = match a.engine {
        Engine::Internal => sim::run_sim(&spec, a.replicas_per_site, &hazard, a.days, seed),
        Engine::Sitehost => sim::run_sim_on_host(&spec, a.replicas_per_site, &hazard, a.days, seed),
    };
    tracing::info!(replicas = timeline.replicas, available = timeline.last().total.available_fraction(), "simulation finished");
    if let Some(p) = &a.csv {
        emit(Some(p), &sim::to_csv(&timeline))?;
    }
    if a.summary.is_some() || a.csv.is_none() {
        emit(a.summary.as_deref(), &sim::summary(&timeline))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn sim_calibrate(a: &SimCalibrate) -> Result<ExitCode> {
    let targets = match &a.targets {
        Some(p) => read_json::<Milestones>(p)?,
        None => Milestones::default(),
    };
    let spec = population(a.population.as_deref(), PopulationSpec::experiment())?;
    let fit = calibrate(&targets, &spec);
    tracing::info!(
        objective = fit.objective,
        early_missing = fit.early_missing,
        mid_missing = fit.mid_missing,
        final_available = fit.final_available,
        crossover = ?fit.crossover_day,
        "calibrated"
    );
    emit(a.out.as_deref(), &(to_canonical_string(&fit.params)? + "\n"))?;
    Ok(ExitCode::SUCCESS)
}

fn sim_probe(a: &SimProbe) -> Result<ExitCode> {
    let wiki = HttpWiki::new(&a.sites)?;
    let tracker = HttpTracker::new(&a.tracker)?;
    let mut csv = String::from("replica_id,piece,index,location,status\n");
    for r in tracker.replicas()? {
        let locator = ReplicaLocator {
            location: r.location.clone(),
            key: r.key,
            checksum: r.checksum,
            start_marker: r.start_marker,
            end_marker: r.end_marker,
        };
        let fetch = wiki.fetch(&locator.location)?;
        let status = classify_probe(locator.probe(&fetch).0);
        writeln!(csv, "{},{},{},{},{}", r.replica_id, r.subpiece.piece, r.subpiece.index, r.location, status)?;
    }
    emit(a.csv.as_deref(), &csv)?;
    Ok(ExitCode::SUCCESS)
}
