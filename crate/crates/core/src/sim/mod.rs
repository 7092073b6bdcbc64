//! Daily replica-survival simulation over a mock site population.
//!
//! Every writable site receives `replicas_per_site` replicas on day 0. Each
//! simulated day first draws site deaths, then per-replica removal and
//! mutation, then probes every replica and records the status counts. The
//! same hazards can be applied either to a lightweight internal state or to a
//! full [`SiteHost`] through its moderation hook.

mod calibrate;
mod hazard;
mod report;
pub mod stats;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use calibrate::{calibrate, expected_curves, CalibrationResult, ExpectedCurves, Milestones};
pub use hazard::{DeathHazard, HazardModel, PhaseHazards};
pub use report::{milestone_days, summary, to_csv};

pub use crate::status::{classify_probe, ProbeOutcome, ReplicaStatus};
use crate::canonical::sha256_hex;
use crate::sitehost::{create_population, DomainClass, EditRequest, PopulationSpec, Protection, SiteError, SiteHost};
use crate::{Timestamp, DAY};

/// Standard errors by which the anonymous missing fraction must exceed the
/// registration missing fraction before a crossover is declared.
pub const CROSSOVER_Z: f64 = 3.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayCounts {
    pub available: u32,
    pub removed: u32,
    pub changed: u32,
    pub not_found: u32,
}

impl DayCounts {
    pub fn total(&self) -> u32 {
        self.available + self.removed + self.changed + self.not_found
    }

    pub fn missing(&self) -> u32 {
        self.total() - self.available
    }

    pub fn missing_fraction(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.missing() as f64 / n as f64,
        }
    }

    pub fn available_fraction(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.available as f64 / n as f64,
        }
    }

    fn add(&mut self, status: ReplicaStatus) {
        match status {
            ReplicaStatus::Available | ReplicaStatus::Unverified => self.available += 1,
            ReplicaStatus::Removed => self.removed += 1,
            ReplicaStatus::Changed => self.changed += 1,
            ReplicaStatus::NotFound => self.not_found += 1,
        }
    }

    fn merge(&mut self, other: &DayCounts) {
        self.available += other.available;
        self.removed += other.removed;
        self.changed += other.changed;
        self.not_found += other.not_found;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayRow {
    pub day: u32,
    pub total: DayCounts,
    /// Indexed in `Protection::ALL` order.
    pub by_protection: [DayCounts; 5],
    /// Indexed in `DomainClass::ALL` order.
    pub by_domain: [DayCounts; 5],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityTimeline {
    pub seed: u64,
    pub replicas: u32,
    pub params: HazardModel,
    pub rows: Vec<DayRow>,
}

impl AvailabilityTimeline {
    pub fn row(&self, day: u32) -> Option<&DayRow> {
        self.rows.iter().find(|r| r.day == day)
    }

    pub fn last(&self) -> &DayRow {
        self.rows.last().expect("timeline has at least one day")
    }
}

#[derive(Clone, Copy, Debug)]
struct SimReplica {
    site: usize,
    status: ReplicaStatus,
    last_edit: Timestamp,
}

fn moderation_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15)
}

fn tally(
    replicas: impl Iterator<Item = (ReplicaStatus, Protection, DomainClass)>,
    day: u32,
) -> DayRow {
    let mut row = DayRow { day, total: DayCounts::default(), by_protection: Default::default(), by_domain: Default::default() };
    for (status, protection, domain) in replicas {
        row.total.add(status);
        row.by_protection[protection as usize].add(status);
        row.by_domain[domain.index()].add(status);
    }
    row
}

/// Runs the internal survival model.
pub fn run_sim(
    spec: &PopulationSpec,
    replicas_per_site: u32,
    hazard: &HazardModel,
    days: u32,
    seed: u64,
) -> AvailabilityTimeline {
    assert!(days >= 1, "simulation needs at least one day");
    let sites = create_population(spec, seed);
    let mut alive: Vec<bool> = sites.iter().map(|s| s.alive).collect();
    let mut replicas: Vec<SimReplica> = Vec::new();
    let mut by_site: Vec<Vec<usize>> = vec![Vec::new(); sites.len()];
    for (idx, site) in sites.iter().enumerate() {
        if site.accepts_writes(0) {
            for _ in 0..replicas_per_site {
                by_site[idx].push(replicas.len());
                replicas.push(SimReplica { site: idx, status: ReplicaStatus::Available, last_edit: 0 });
            }
        }
    }
    let mut rng = moderation_rng(seed);
    let mut rows = Vec::with_capacity(days as usize);
    for day in 1..=days {
        let now = (day as Timestamp - 1) * DAY;
        for (idx, site) in sites.iter().enumerate() {
            if !alive[idx] {
                continue;
            }
            if rng.gen_bool(hazard.site_death(day)) {
                alive[idx] = false;
                for &r in &by_site[idx] {
                    let rep = &mut replicas[r];
                    if rep.status.can_transition_to(ReplicaStatus::NotFound) {
                        rep.status = ReplicaStatus::NotFound;
                    }
                }
                continue;
            }
            let window = site.policies.recent_changes_window_days as Timestamp * DAY;
            for &r in &by_site[idx] {
                let rep = &mut replicas[r];
                // Removed pages are gone; changed ones keep their status.
                if rep.status == ReplicaStatus::Removed {
                    continue;
                }
                let h = hazard.removal(site.protection, site.domain_class, day, now - rep.last_edit < window);
                if rng.gen_bool(h) {
                    if rep.status == ReplicaStatus::Available {
                        rep.status = ReplicaStatus::Removed;
                    } else {
                        // The changed page is gone but its status is terminal.
                        rep.status = ReplicaStatus::Changed;
                    }
                } else if hazard.mutation > 0.0 && rng.gen_bool(hazard.mutation) {
                    rep.last_edit = now;
                    rep.status = ReplicaStatus::Changed;
                }
            }
        }
        rows.push(tally(
            replicas.iter().map(|r| (r.status, sites[r.site].protection, sites[r.site].domain_class)),
            day,
        ));
    }
    AvailabilityTimeline { seed, replicas: replicas.len() as u32, params: hazard.clone(), rows }
}

/// Places a page on a site through its edit gate, as a client would.
pub fn write_through_gate(host: &mut SiteHost, site_id: u32, title: &str, content: &str) -> Result<u64, SiteError> {
    let protection = host.site(site_id)?.protection;
    let mut req = EditRequest { title: title.to_owned(), content: content.to_owned(), ..Default::default() };
    match protection {
        Protection::Registration => req.token = Some(host.register(site_id, "archivist")?),
        Protection::Puzzle => {
            let challenge = host.challenge(site_id)?;
            let answer = crate::client::solve_arithmetic_puzzle(&challenge.question)
                .map_err(|_| SiteError::Refused(crate::sitehost::RefusalReason::WrongPuzzle))?;
            req.puzzle_id = Some(challenge.puzzle_id);
            req.puzzle_answer = Some(answer);
        }
        _ => {}
    }
    host.edit_page(site_id, &req)
}

/// Probes a page on an in-process host against the content digest it was
/// written with.
pub fn probe_host(host: &SiteHost, site_id: u32, title: &str, checksum: &str) -> ProbeOutcome {
    match host.page_content(site_id, title) {
        Ok(content) if sha256_hex(content.as_bytes()) == checksum => ProbeOutcome::Content,
        Ok(_) => ProbeOutcome::ChecksumMismatch,
        Err(SiteError::PageMissing) => ProbeOutcome::MissingPage,
        Err(_) => ProbeOutcome::Unreachable,
    }
}

/// Runs the same experiment against a full [`SiteHost`], using its
/// moderation hook and probing every replica each day.
pub fn run_sim_on_host(
    spec: &PopulationSpec,
    replicas_per_site: u32,
    hazard: &HazardModel,
    days: u32,
    seed: u64,
) -> AvailabilityTimeline {
    assert!(days >= 1, "simulation needs at least one day");
    let mut host = SiteHost::from_spec(spec, seed);
    let mut placed = Vec::new();
    let candidates: Vec<u32> =
        host.sites().iter().filter(|s| s.accepts_writes(0)).map(|s| s.site_id).collect();
    for site_id in candidates {
        for k in 0..replicas_per_site {
            let title = format!("replica_{k}");
            let content = format!("payload {seed} {site_id} {k}");
            if write_through_gate(&mut host, site_id, &title, &content).is_ok() {
                placed.push((site_id, title, sha256_hex(content.as_bytes()), ReplicaStatus::Available));
            }
        }
    }
    let mut rng = moderation_rng(seed);
    let mut rows = Vec::with_capacity(days as usize);
    for day in 1..=days {
        let now = (day as Timestamp - 1) * DAY;
        host.set_now(now);
        host.moderate_all(now, &mut rng, hazard);
        for (site_id, title, checksum, status) in placed.iter_mut() {
            let observed = classify_probe(probe_host(&host, *site_id, title, checksum));
            if status.can_transition_to(observed) {
                *status = observed;
            }
        }
        let sites = host.sites();
        rows.push(tally(
            placed.iter().map(|(id, _, _, st)| (*st, sites[*id as usize].protection, sites[*id as usize].domain_class)),
            day,
        ));
    }
    AvailabilityTimeline { seed, replicas: placed.len() as u32, params: hazard.clone(), rows }
}

/// Missing-fraction series for one protection class, pooled over timelines.
pub fn pooled_class_counts(timelines: &[AvailabilityTimeline], protection: Protection) -> Vec<DayCounts> {
    let Some(first) = timelines.first() else { return Vec::new() };
    (0..first.rows.len())
        .map(|i| {
            let mut acc = DayCounts::default();
            for t in timelines {
                acc.merge(&t.rows[i].by_protection[protection as usize]);
            }
            acc
        })
        .collect()
}

/// First day on which the anonymous class has lost a larger share of its
/// replicas than the registration class, by more than [`CROSSOVER_Z`]
/// standard errors. Counts are pooled across the given timelines.
pub fn check_crossover_pooled(timelines: &[AvailabilityTimeline]) -> Option<u32> {
    let anon = pooled_class_counts(timelines, Protection::Anonymous);
    let reg = pooled_class_counts(timelines, Protection::Registration);
    let days: Vec<u32> = timelines.first()?.rows.iter().map(|r| r.day).collect();
    for ((a, r), day) in anon.iter().zip(&reg).zip(days) {
        let (na, nr) = (a.total() as f64, r.total() as f64);
        if na == 0.0 || nr == 0.0 {
            return None;
        }
        let (pa, pr) = (a.missing_fraction(), r.missing_fraction());
        let se = (pa * (1.0 - pa) / na + pr * (1.0 - pr) / nr).sqrt();
        if pa - pr > CROSSOVER_Z * se {
            return Some(day);
        }
    }
    None
}

pub fn check_crossover(timeline: &AvailabilityTimeline) -> Option<u32> {
    check_crossover_pooled(std::slice::from_ref(timeline))
}

/// Mean over timelines of a per-row statistic.
pub fn mean_series(timelines: &[AvailabilityTimeline], stat: impl Fn(&DayRow) -> f64) -> Vec<f64> {
    let Some(first) = timelines.first() else { return Vec::new() };
    (0..first.rows.len())
        .map(|i| timelines.iter().map(|t| stat(&t.rows[i])).sum::<f64>() / timelines.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_hazard_keeps_everything() {
        let t = run_sim(&PopulationSpec::desk(), 1, &HazardModel::zero(), 365, 1);
        assert_eq!(t.rows.len(), 365);
        assert!(t.rows.iter().all(|r| r.total.available == 60 && r.total.missing() == 0));
    }

    #[test]
    fn counts_sum_and_availability_never_rises() {
        let t = run_sim(&PopulationSpec::desk(), 2, &HazardModel::calibrated(), 200, 3);
        let mut prev = u32::MAX;
        for row in &t.rows {
            assert_eq!(row.total.total(), t.replicas);
            let by_class: u32 = row.by_protection.iter().map(DayCounts::total).sum();
            let by_domain: u32 = row.by_domain.iter().map(DayCounts::total).sum();
            assert_eq!(by_class, t.replicas);
            assert_eq!(by_domain, t.replicas);
            assert!(row.total.available <= prev);
            prev = row.total.available;
        }
    }

    #[test]
    fn seed_determinism() {
        let h = HazardModel::calibrated();
        let spec = PopulationSpec::desk();
        assert_eq!(run_sim(&spec, 1, &h, 50, 9), run_sim(&spec, 1, &h, 50, 9));
        assert_eq!(run_sim_on_host(&spec, 1, &h, 20, 9), run_sim_on_host(&spec, 1, &h, 20, 9));
    }

    #[test]
    fn captcha_sites_receive_nothing() {
        let spec = PopulationSpec { captcha: 10, closed: 5, ..PopulationSpec::with_counts(3, 0, 0) };
        assert_eq!(run_sim(&spec, 1, &HazardModel::zero(), 1, 0).replicas, 3);
        assert_eq!(run_sim_on_host(&spec, 1, &HazardModel::zero(), 1, 0).replicas, 3);
    }

    #[test]
    fn mutation_produces_changed() {
        let mut h = HazardModel::zero();
        h.mutation = 0.3;
        for t in [run_sim(&PopulationSpec::desk(), 1, &h, 10, 2), run_sim_on_host(&PopulationSpec::desk(), 1, &h, 10, 2)] {
            assert!(t.last().total.changed > 0);
            assert_eq!(t.last().total.removed, 0);
        }
    }

    #[test]
    fn site_death_gives_not_found() {
        let mut h = HazardModel::zero();
        h.death = DeathHazard { base: 1.0, ramp_start_day: 0, slope: 0.0, max: 1.0 };
        let t = run_sim_on_host(&PopulationSpec::desk(), 1, &h, 1, 2);
        assert_eq!(t.last().total.not_found, 60);
    }

    #[test]
    fn dominance_means_no_crossover() {
        let mut h = HazardModel::zero();
        h.anonymous = PhaseHazards { early: 0.01, mid: 0.002, late: 0.001 };
        h.registration = PhaseHazards { early: 0.03, mid: 0.006, late: 0.003 };
        let t = run_sim(&PopulationSpec::with_counts(5_000, 5_000, 0), 1, &h, 324, 4);
        assert_eq!(check_crossover(&t), None);
    }

    #[test]
    fn symmetric_hazards_mean_no_crossover() {
        let h = HazardModel::constant(0.004);
        let t = run_sim(&PopulationSpec::with_counts(50_000, 50_000, 0), 1, &h, 200, 12);
        assert_eq!(check_crossover(&t), None);
    }
}
