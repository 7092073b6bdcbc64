use serde::{Deserialize, Serialize};

use crate::sitehost::{DomainClass, Protection};

/// Daily removal probabilities for the three age phases of a replica.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseHazards {
    /// Exposure days 1..=7.
    pub early: f64,
    /// Exposure days 8..=100.
    pub mid: f64,
    /// Exposure days after 100.
    pub late: f64,
}

impl PhaseHazards {
    pub const fn constant(h: f64) -> Self {
        PhaseHazards { early: h, mid: h, late: h }
    }

    fn scaled(self, k: f64) -> Self {
        PhaseHazards { early: self.early * k, mid: self.mid * k, late: self.late * k }
    }
}

/// Daily probability that a whole site becomes unreachable: a base rate plus a
/// linear ramp after `ramp_start_day`, capped at `max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeathHazard {
    pub base: f64,
    pub ramp_start_day: u32,
    pub slope: f64,
    pub max: f64,
}

impl DeathHazard {
    pub const NONE: DeathHazard = DeathHazard { base: 0.0, ramp_start_day: 0, slope: 0.0, max: 0.0 };

    pub fn at(&self, day: u32) -> f64 {
        let ramp = self.slope * day.saturating_sub(self.ramp_start_day) as f64;
        (self.base + ramp).min(self.max).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazardModel {
    pub anonymous: PhaseHazards,
    pub registration: PhaseHazards,
    pub puzzle: PhaseHazards,
    /// Applied to removal hazard while a page's latest edit is inside the
    /// recent-changes window.
    pub recent_multiplier: f64,
    pub early_end_day: u32,
    pub mid_end_day: u32,
    pub death: DeathHazard,
    /// Daily probability that a surviving page has its payload altered.
    pub mutation: f64,
    /// Optional per-domain multipliers in `DomainClass::ALL` order.
    #[serde(default)]
    pub domain_multipliers: Option<[f64; 5]>,
}

impl HazardModel {
    /// Same removal hazard `h` every day for every class, no site deaths, no
    /// visibility boost.
    pub fn constant(h: f64) -> Self {
        HazardModel {
            anonymous: PhaseHazards::constant(h),
            registration: PhaseHazards::constant(h),
            puzzle: PhaseHazards::constant(h),
            recent_multiplier: 1.0,
            early_end_day: 7,
            mid_end_day: 100,
            death: DeathHazard::NONE,
            mutation: 0.0,
            domain_multipliers: None,
        }
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    /// Calibrated defaults (see `sim calibrate` and `data/calibrated_hazards.json`).
    pub fn calibrated() -> Self {
        serde_json::from_str(include_str!("../../data/calibrated_hazards.json"))
            .expect("bundled hazards parse")
    }

    pub fn phases(&self, protection: Protection) -> PhaseHazards {
        match protection {
            Protection::Anonymous => self.anonymous,
            Protection::Registration => self.registration,
            Protection::Puzzle => self.puzzle,
            // Never written to by clients; treat like the strictest writable class.
            Protection::Captcha | Protection::Closed => self.registration,
        }
    }

    /// Removal probability on exposure day `day` (1-based age).
    pub fn removal(&self, protection: Protection, domain: DomainClass, day: u32, in_window: bool) -> f64 {
        let phases = self.phases(protection);
        let mut h = if day <= self.early_end_day {
            phases.early
        } else if day <= self.mid_end_day {
            phases.mid
        } else {
            phases.late
        };
        if in_window {
            h *= self.recent_multiplier;
        }
        if let Some(mult) = self.domain_multipliers {
            h *= mult[domain.index()];
        }
        h.clamp(0.0, 1.0)
    }

    pub fn site_death(&self, day: u32) -> f64 {
        self.death.at(day)
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut values = vec![self.death.base, self.death.max, self.mutation];
        for p in [self.anonymous, self.registration, self.puzzle] {
            values.extend([p.early, p.mid, p.late]);
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err("hazards must lie in [0, 1]".into());
        }
        if self.recent_multiplier < 0.0 || self.death.slope < 0.0 {
            return Err("multiplier and slope must be non-negative".into());
        }
        Ok(())
    }

    /// Multiplies every removal hazard by `k`.
    pub fn scale_removal(&self, k: f64) -> Self {
        HazardModel {
            anonymous: self.anonymous.scaled(k),
            registration: self.registration.scaled(k),
            puzzle: self.puzzle.scaled(k),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibrated_parameters_are_valid() {
        HazardModel::calibrated().validate().unwrap();
    }

    #[test]
    fn phase_boundaries() {
        let mut m = HazardModel::zero();
        m.anonymous = PhaseHazards { early: 0.1, mid: 0.2, late: 0.3 };
        let at = |d| m.removal(Protection::Anonymous, DomainClass::Com, d, false);
        assert_eq!(at(7), 0.1);
        assert_eq!(at(8), 0.2);
        assert_eq!(at(100), 0.2);
        assert_eq!(at(101), 0.3);
    }

    #[test]
    fn death_ramp() {
        let d = DeathHazard { base: 0.001, ramp_start_day: 100, slope: 0.0001, max: 0.01 };
        assert_eq!(d.at(50), 0.001);
        assert!((d.at(110) - 0.002).abs() < 1e-12);
        assert_eq!(d.at(10_000), 0.01);
    }
}
