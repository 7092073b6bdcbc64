use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "graffiti", version, about = "Replicated file sharing over mock wiki sites")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Log as JSON lines on stderr.
    #[arg(long, global = true)]
    pub log_json: bool,
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// JSON object of flag values; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fileset manifests.
    #[command(subcommand)]
    Manifest(ManifestCmd),
    /// The coordinating tracker.
    #[command(subcommand)]
    Tracker(TrackerCmd),
    /// A peer.
    #[command(subcommand)]
    Client(ClientCmd),
    /// The mock storage sites.
    #[command(subcommand)]
    Sitehost(SitehostCmd),
    /// The churn simulator.
    #[command(subcommand)]
    Sim(SimCmd),
}

#[derive(Subcommand, Debug)]
pub enum ManifestCmd {
    /// Build a manifest for one or more files.
    Create(ManifestCreate),
}

#[derive(Args, Debug)]
pub struct ManifestCreate {
    /// Files of the fileset, in order.
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    /// Piece length in bytes.
    #[arg(long, default_value_t = 524_288)]
    pub piece: u64,
    /// Sub-piece length in bytes.
    #[arg(long, default_value_t = 65_536)]
    pub subpiece: u64,
    /// Fileset name; defaults to the first file's name.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value = "")]
    pub tracker_url: String,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum TrackerCmd {
    /// Serve the tracker protocol over HTTP.
    Serve(TrackerServe),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ClockKind {
    /// One second per command; reproducible.
    Logical,
    Wall,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ReuseKind {
    /// Each site receives at most one replica of the fileset.
    Once,
    /// A site may hold replicas of different sub-pieces.
    Across,
}

#[derive(Args, Debug)]
pub struct TrackerServe {
    /// Manifest of the tracked fileset. Not needed when resuming from --state.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:7070")]
    pub bind: String,
    /// Base URL of the sitehost that provides the storage sites.
    #[arg(long)]
    pub sites: String,
    #[arg(long, default_value_t = 4)]
    pub aps_capacity: usize,
    /// IPS rotation period in hours of tracker clock.
    #[arg(long, default_value_t = 24.0)]
    pub ips_window: f64,
    #[arg(long, default_value_t = 0.2)]
    pub verify_prob: f64,
    #[arg(long, default_value_t = 3)]
    pub strike_threshold: u32,
    /// Minutes without a report before a pair's slot is reclaimed.
    #[arg(long, default_value_t = 60)]
    pub pair_timeout: i64,
    #[arg(long, default_value_t = 30)]
    pub pairs_per_hour: u32,
    #[arg(long, value_enum, default_value_t = ReuseKind::Once)]
    pub site_reuse: ReuseKind,
    #[arg(long, value_enum, default_value_t = ClockKind::Logical)]
    pub clock: ClockKind,
    /// Snapshot file; restored from when it exists, rewritten after every command.
    #[arg(long)]
    pub state: Option<PathBuf>,
    /// Fileset contents to place as initial replicas before serving.
    #[arg(long, num_args = 1..)]
    pub publish: Vec<PathBuf>,
    /// Initial replicas per sub-piece when publishing.
    #[arg(long, default_value_t = 1)]
    pub copies: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Adapter {
    /// The bundled mock sites.
    Mockwiki,
}

#[derive(Subcommand, Debug)]
pub enum ClientCmd {
    /// Run one peer session.
    Run(ClientRun),
}

#[derive(Args, Debug)]
pub struct ClientRun {
    #[arg(long)]
    pub tracker: String,
    /// Base URL of the sitehost the mockwiki adapter talks to.
    #[arg(long)]
    pub sites: String,
    /// Local manifest; fetched from the tracker when absent.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Adapter::Mockwiki)]
    pub adapters: Adapter,
    /// Concurrent replica fetches.
    #[arg(long, default_value_t = 4)]
    pub limit_parallel: usize,
    /// Defaults to `peer-<seed>`.
    #[arg(long)]
    pub peer_id: Option<String>,
    /// Directory for the reconstructed files.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Session report file; stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub retries: u32,
    /// First retry delay; doubles on each further attempt.
    #[arg(long, default_value_t = 1000)]
    pub backoff_ms: u64,
    /// Notice placed above every replica the peer writes.
    #[arg(long)]
    pub notice: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum SitehostCmd {
    /// Serve a population of mock sites over HTTP.
    Serve(SitehostServe),
}

#[derive(Args, Debug)]
pub struct SitehostServe {
    #[arg(long, default_value = "127.0.0.1:7080")]
    pub bind: String,
    /// Population spec JSON; overrides the count flags.
    #[arg(long)]
    pub population: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    pub anonymous: u32,
    #[arg(long, default_value_t = 15)]
    pub registration: u32,
    #[arg(long, default_value_t = 5)]
    pub puzzle: u32,
    #[arg(long, default_value_t = 0)]
    pub captcha: u32,
    #[arg(long, default_value_t = 0)]
    pub closed: u32,
}

#[derive(Subcommand, Debug)]
pub enum SimCmd {
    /// Simulate replica survival.
    Run(SimRun),
    /// Fit hazards to availability milestones.
    Calibrate(SimCalibrate),
    /// Classify every replica a tracker knows about.
    Probe(SimProbe),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Engine {
    /// The simulator's own survival model.
    Internal,
    /// Full mock sites driven through their moderation hook.
    Sitehost,
}

#[derive(Args, Debug)]
pub struct SimRun {
    /// Population spec JSON; the long-running deployment when absent.
    #[arg(long)]
    pub population: Option<PathBuf>,
    /// Hazard model JSON; the calibrated defaults when absent.
    #[arg(long)]
    pub hazards: Option<PathBuf>,
    #[arg(long, default_value_t = 324)]
    pub days: u32,
    #[arg(long, default_value_t = 1)]
    pub replicas_per_site: u32,
    #[arg(long, value_enum, default_value_t = Engine::Internal)]
    pub engine: Engine,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Summary file; stdout when neither this nor --csv is given.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimCalibrate {
    /// Milestone targets JSON; the defaults when absent.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    #[arg(long)]
    pub population: Option<PathBuf>,
    /// Hazard model output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimProbe {
    #[arg(long)]
    pub tracker: String,
    /// Base URL of the sitehost holding the replicas.
    #[arg(long)]
    pub sites: String,
    /// CSV output; stdout when absent.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}
