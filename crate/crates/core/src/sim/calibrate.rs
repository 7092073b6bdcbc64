//! Fits [`HazardModel`] parameters to availability milestones.
//!
//! The objective is evaluated on exact expected survival curves rather than
//! Monte-Carlo runs, so the fit is deterministic and cheap. A coarse grid is
//! followed by coordinate refinement with shrinking steps.

use serde::{Deserialize, Serialize};

use super::hazard::{DeathHazard, HazardModel, PhaseHazards};
use crate::sitehost::{DomainClass, PopulationSpec, Protection};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Milestones {
    pub early_day: u32,
    pub early_missing: f64,
    pub mid_day: u32,
    pub mid_missing: f64,
    pub final_day: u32,
    pub final_available: f64,
    pub crossover_day: u32,
    /// Weight of the squared crossover error, measured in units of 100 days.
    pub crossover_weight: f64,
}

impl Default for Milestones {
    fn default() -> Self {
        Milestones {
            early_day: 7,
            early_missing: 0.20,
            mid_day: 42,
            mid_missing: 0.30,
            final_day: 324,
            final_available: 0.40,
            crossover_day: 120,
            crossover_weight: 0.05,
        }
    }
}

/// Expected fractions for days `1..=days`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpectedCurves {
    pub available: Vec<f64>,
    pub anonymous_missing: Vec<f64>,
    pub registration_missing: Vec<f64>,
}

impl ExpectedCurves {
    /// First day the anonymous class is expected to have lost more than the
    /// registration class.
    pub fn crossover(&self) -> Option<u32> {
        self.anonymous_missing
            .iter()
            .zip(&self.registration_missing)
            .position(|(a, r)| a > r)
            .map(|i| i as u32 + 1)
    }

    pub fn missing_at(&self, day: u32) -> f64 {
        1.0 - self.available[day as usize - 1]
    }
}

fn class_survival(spec: &PopulationSpec, hazard: &HazardModel, protection: Protection, days: u32) -> Vec<f64> {
    let window = spec.recent_changes_window_days;
    let weights = spec.domain_mix.0;
    let weight_sum: f64 = weights.iter().sum();
    let mut per_domain = [1.0f64; 5];
    let mut out = Vec::with_capacity(days as usize);
    for day in 1..=days {
        let death = hazard.site_death(day);
        let in_window = day - 1 < window;
        for d in DomainClass::ALL {
            let h = hazard.removal(protection, d, day, in_window);
            per_domain[d.index()] *= (1.0 - h) * (1.0 - death);
        }
        out.push(per_domain.iter().zip(weights).map(|(s, w)| s * w).sum::<f64>() / weight_sum);
    }
    out
}

/// Exact expected survival under `hazard` for one replica per writable site.
pub fn expected_curves(spec: &PopulationSpec, hazard: &HazardModel, days: u32) -> ExpectedCurves {
    let classes = [
        (Protection::Anonymous, spec.anonymous),
        (Protection::Registration, spec.registration),
        (Protection::Puzzle, spec.puzzle),
    ];
    let curves: Vec<(u32, Vec<f64>)> =
        classes.iter().map(|&(p, n)| (n, class_survival(spec, hazard, p, days))).collect();
    let total: f64 = classes.iter().map(|c| c.1 as f64).sum();
    let available = (0..days as usize)
        .map(|i| curves.iter().map(|(n, s)| *n as f64 * s[i]).sum::<f64>() / total)
        .collect();
    ExpectedCurves {
        available,
        anonymous_missing: curves[0].1.iter().map(|s| 1.0 - s).collect(),
        registration_missing: curves[1].1.iter().map(|s| 1.0 - s).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub params: HazardModel,
    pub objective: f64,
    pub early_missing: f64,
    pub mid_missing: f64,
    pub final_available: f64,
    pub crossover_day: Option<u32>,
}

/// Free parameters: anonymous early/mid, registration early/mid, late-to-mid
/// ratio, site-death ramp slope.
#[derive(Clone, Copy, Debug)]
struct Knobs([f64; 6]);

const RECENT_MULTIPLIER: f64 = 2.0;
const DEATH_RAMP_START: u32 = 100;
const DEATH_MAX: f64 = 0.05;

impl Knobs {
    fn model(&self) -> HazardModel {
        let [ae, re, am, rm, rho, slope] = self.0;
        let registration = PhaseHazards { early: re, mid: rm, late: rm * rho };
        HazardModel {
            anonymous: PhaseHazards { early: ae, mid: am, late: am * rho },
            registration,
            puzzle: registration,
            recent_multiplier: RECENT_MULTIPLIER,
            early_end_day: 7,
            mid_end_day: 100,
            death: DeathHazard { base: 0.0, ramp_start_day: DEATH_RAMP_START, slope, max: DEATH_MAX },
            mutation: 0.0,
            domain_multipliers: None,
        }
    }
}

fn score(spec: &PopulationSpec, targets: &Milestones, model: &HazardModel) -> (f64, ExpectedCurves) {
    let days = targets.final_day.max(targets.mid_day).max(targets.early_day);
    let curves = expected_curves(spec, model, days);
    let crossover = curves.crossover().unwrap_or(days + 100) as f64;
    let obj = (curves.missing_at(targets.early_day) - targets.early_missing).powi(2)
        + (curves.missing_at(targets.mid_day) - targets.mid_missing).powi(2)
        + (curves.available[targets.final_day as usize - 1] - targets.final_available).powi(2)
        + targets.crossover_weight * ((crossover - targets.crossover_day as f64) / 100.0).powi(2);
    (obj, curves)
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

pub fn calibrate(targets: &Milestones, spec: &PopulationSpec) -> CalibrationResult {
    let grids = [
        linspace(0.005, 0.02, 7),
        linspace(0.01, 0.03, 7),
        linspace(0.001, 0.008, 8),
        linspace(0.0005, 0.006, 8),
        vec![0.25, 0.5, 0.75],
        vec![0.0, 1e-5, 2e-5, 4e-5],
    ];
    let mut best = (f64::INFINITY, Knobs([0.0; 6]));
    for &ae in &grids[0] {
        for &re in &grids[1] {
            for &am in &grids[2] {
                for &rm in &grids[3] {
                    for &rho in &grids[4] {
                        for &slope in &grids[5] {
                            let k = Knobs([ae, re, am, rm, rho, slope]);
                            let (obj, _) = score(spec, targets, &k.model());
                            if obj < best.0 {
                                best = (obj, k);
                            }
                        }
                    }
                }
            }
        }
    }
    let mut steps = [0.0025, 0.0033, 0.001, 0.0008, 0.125, 5e-6];
    for _ in 0..12 {
        for i in 0..6 {
            for dir in [-1.0, 1.0] {
                let mut k = best.1;
                k.0[i] = (k.0[i] + dir * steps[i]).max(0.0);
                let (obj, _) = score(spec, targets, &k.model());
                if obj < best.0 {
                    best = (obj, k);
                }
            }
        }
        for s in steps.iter_mut() {
            *s *= 0.6;
        }
    }
    let params = best.1.model();
    let (objective, curves) = score(spec, targets, &params);
    CalibrationResult {
        objective,
        early_missing: curves.missing_at(targets.early_day),
        mid_missing: curves.missing_at(targets.mid_day),
        final_available: curves.available[targets.final_day as usize - 1],
        crossover_day: curves.crossover(),
        params,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_hazard_curve_is_geometric() {
        let c = expected_curves(&PopulationSpec::desk(), &HazardModel::constant(0.2), 5);
        assert!((c.available[4] - 0.8f64.powi(5)).abs() < 1e-12);
        assert_eq!(c.crossover(), None);
    }
}
