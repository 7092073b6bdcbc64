use graffiti_core::sim::stats::{ks_two_sample, mean};
use graffiti_core::sim::{classify_probe, run_sim, run_sim_on_host, HazardModel, ProbeOutcome, ReplicaStatus};
use graffiti_core::sitehost::PopulationSpec;

fn mean_missing(spec: &PopulationSpec, h: &HazardModel, days: u32, seeds: std::ops::Range<u64>) -> f64 {
    let xs: Vec<f64> = seeds.map(|s| run_sim(spec, 1, h, days, s).last().total.missing_fraction()).collect();
    mean(&xs)
}

#[test]
fn constant_hazard_matches_closed_form() {
    let spec = PopulationSpec::with_counts(10, 0, 0);
    for h in [0.05, 0.2, 0.5] {
        let model = HazardModel::constant(h);
        let xs: Vec<f64> = (0..1_000).map(|s| run_sim(&spec, 1, &model, 5, s).last().total.available_fraction()).collect();
        let p = (1.0f64 - h).powi(5);
        let band = 2.576 * (p * (1.0 - p) / 10_000.0).sqrt();
        let m = mean(&xs);
        assert!((m - p).abs() <= band, "h={h}: mean {m} expected {p} +- {band}");
    }
}

#[test]
fn more_hazard_means_more_loss() {
    let spec = PopulationSpec::desk();
    let base = HazardModel::calibrated();
    let losses: Vec<f64> = [0.5, 1.0, 2.0, 4.0]
        .iter()
        .map(|&k| mean_missing(&spec, &base.scale_removal(k), 100, 0..100))
        .collect();
    assert!(losses.windows(2).all(|w| w[0] < w[1]), "{losses:?}");
}

#[test]
fn longer_runs_lose_more() {
    let spec = PopulationSpec::desk();
    let h = HazardModel::calibrated();
    let a = mean_missing(&spec, &h, 30, 0..100);
    let b = mean_missing(&spec, &h, 120, 0..100);
    let c = mean_missing(&spec, &h, 324, 0..100);
    assert!(a < b && b < c, "{a} {b} {c}");
}

#[test]
fn faster_site_death_means_more_not_found() {
    let spec = PopulationSpec::desk();
    let slow = HazardModel::calibrated();
    let mut fast = slow.clone();
    fast.death.slope *= 4.0;
    let nf = |h: &HazardModel| mean(&(0..100).map(|s| run_sim(&spec, 1, h, 324, s).last().total.not_found as f64).collect::<Vec<_>>());
    assert!(nf(&slow) < nf(&fast));
}

#[test]
fn host_engine_matches_internal_engine_in_distribution() {
    let spec = PopulationSpec::with_counts(120, 45, 15);
    let h = HazardModel::calibrated();
    let days = 60;
    let internal: Vec<f64> = (0..200).map(|s| run_sim(&spec, 1, &h, days, s).last().total.missing_fraction()).collect();
    let hosted: Vec<f64> =
        (1_000..1_200).map(|s| run_sim_on_host(&spec, 1, &h, days, s).last().total.missing_fraction()).collect();
    let (d, p) = ks_two_sample(&internal, &hosted);
    assert!(p > 0.01, "D={d} p={p}");
}

#[test]
fn ks_detects_a_shift() {
    let a: Vec<f64> = (0..200).map(|i| i as f64).collect();
    let b: Vec<f64> = (0..200).map(|i| i as f64 + 60.0).collect();
    let (d, p) = ks_two_sample(&a, &b);
    assert!((d - 0.3).abs() < 1e-12);
    assert!(p < 1e-6);
}

#[test]
fn probe_table() {
    let table = [
        (ProbeOutcome::Content, ReplicaStatus::Available),
        (ProbeOutcome::ChecksumMismatch, ReplicaStatus::Changed),
        (ProbeOutcome::MissingPage, ReplicaStatus::Removed),
        (ProbeOutcome::Unreachable, ReplicaStatus::NotFound),
    ];
    for (outcome, status) in table {
        assert_eq!(classify_probe(outcome), status);
    }
}
