//! Discrete-time noise schedules: per-step rates `beta_t` and cumulative
//! noise levels `sigma_t = 1 - prod_{s<=t} (1 - beta_s)`.

use std::f64::consts::FRAC_PI_2;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};

pub const CONSISTENCY_TOL: f64 = 1e-12;

/// Default constant `c` of the fine-discretization rule `1/T <= c * sigma^2`.
pub const DEFAULT_FINENESS: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    LinearCumulative,
    Cosine,
    Custom,
}

impl FromStr for ScheduleKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "linear_cumulative" => Ok(ScheduleKind::LinearCumulative),
            "cosine" => Ok(ScheduleKind::Cosine),
            "custom" => Ok(ScheduleKind::Custom),
            other => invalid(format!("unknown schedule kind `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule")]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    #[serde(rename = "T")]
    steps: usize,
    beta: Vec<f64>,
    sigma: Vec<f64>,
}

#[derive(Deserialize)]
struct RawSchedule {
    kind: ScheduleKind,
    #[serde(rename = "T")]
    steps: usize,
    beta: Vec<f64>,
    sigma: Vec<f64>,
}

impl TryFrom<RawSchedule> for NoiseSchedule {
    type Error = LabError;

    fn try_from(raw: RawSchedule) -> Result<Self> {
        let s = NoiseSchedule {
            kind: raw.kind,
            steps: raw.steps,
            beta: raw.beta,
            sigma: raw.sigma,
        };
        s.validate()?;
        Ok(s)
    }
}

/// Builds a named schedule with `steps` steps.
///
/// `LinearCumulative` has `sigma_t = t/T` and `beta_t = 1/(T - t + 1)`;
/// `Cosine` has `sigma_t = 1 - cos^2(pi t / 2T)` with `beta_t` recovered
/// from the product identity.
pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return invalid("schedule needs T >= 1");
    }
    let tf = steps as f64;
    let (beta, sigma): (Vec<f64>, Vec<f64>) = match kind {
        ScheduleKind::LinearCumulative => (1..=steps)
            .map(|t| (1.0 / (steps - t + 1) as f64, t as f64 / tf))
            .unzip(),
        ScheduleKind::Cosine => {
            let keep = |t: usize| {
                if t == steps {
                    0.0
                } else {
                    (FRAC_PI_2 * t as f64 / tf).cos().powi(2)
                }
            };
            (1..=steps)
                .map(|t| {
                    let (prev, cur) = (keep(t - 1), keep(t));
                    (1.0 - cur / prev, 1.0 - cur)
                })
                .unzip()
        }
        ScheduleKind::Custom => {
            return invalid("custom schedules are built with NoiseSchedule::from_betas")
        }
    };
    let s = NoiseSchedule {
        kind,
        steps,
        beta,
        sigma,
    };
    s.validate()?;
    Ok(s)
}

impl NoiseSchedule {
    /// Custom schedule from per-step rates.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return invalid("schedule needs T >= 1");
        }
        let sigma = cumulative_sigma(&beta);
        let s = NoiseSchedule {
            kind: ScheduleKind::Custom,
            steps: beta.len(),
            beta,
            sigma,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// `sigma_t` for `t` in `0..=T`, with `sigma_0 = 0`.
    pub fn sigma(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.sigma[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return invalid(format!("step {t} outside 1..={}", self.steps));
        }
        Ok(())
    }

    /// Largest deviation between the stored `sigma` and the product formula.
    pub fn consistency_error(&self) -> f64 {
        cumulative_sigma(&self.beta)
            .iter()
            .zip(&self.sigma)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.beta.len() != self.steps || self.sigma.len() != self.steps {
            return invalid("schedule arrays must have length T >= 1");
        }
        if self.beta.iter().any(|&b| !(b > 0.0 && b <= 1.0)) {
            return invalid("beta_t must lie in (0, 1]");
        }
        if self.sigma.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return invalid("sigma_t must lie in (0, 1]");
        }
        if self.sigma.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("sigma_t must be strictly increasing");
        }
        let err = self.consistency_error();
        if err > CONSISTENCY_TOL {
            return invalid(format!("sigma inconsistent with beta (max error {err:e})"));
        }
        Ok(())
    }

    /// `t_sigma(T)`: the step whose noise level is closest to `sigma`, ties
    /// resolved toward the smaller step.
    pub fn time_index_for_sigma(&self, sigma: f64) -> Result<usize> {
        if !(sigma > 0.0 && sigma < 1.0) {
            return invalid(format!("sigma {sigma} outside (0, 1)"));
        }
        let mut best = (1usize, f64::INFINITY);
        for (i, &s) in self.sigma.iter().enumerate() {
            let gap = (s - sigma).abs();
            // equal gaps up to rounding count as ties
            if gap < best.1 - 1e-12 {
                best = (i + 1, gap);
            }
        }
        Ok(best.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `sigma_t = 1 - prod_{s<=t} (1 - beta_s)`, accumulated as a compensated
/// sum of logarithms so that long schedules do not drift.
fn cumulative_sigma(beta: &[f64]) -> Vec<f64> {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    beta.iter()
        .map(|&b| {
            if b >= 1.0 {
                sum = f64::NEG_INFINITY;
            } else if sum.is_finite() {
                let y = (-b).ln_1p() - carry;
                let next = sum + y;
                carry = (next - sum) - y;
                sum = next;
            }
            -sum.exp_m1()
        })
        .collect()
}

/// `T = ceil(1 / (c sigma^2))`, the smallest horizon meeting the
/// fine-discretization rule at noise level `sigma`.
pub fn steps_for_sigma(sigma: f64, fineness: f64) -> usize {
    ((1.0 / (fineness * sigma * sigma)) - 1e-9).ceil().max(1.0) as usize
}

/// Whether `1/T <= c sigma^2`.
pub fn is_fine_enough(sigma: f64, steps: usize, fineness: f64) -> bool {
    steps as f64 * fineness * sigma * sigma >= 1.0 - 1e-9
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn linear_grid_points() {
        let s = make_schedule(ScheduleKind::LinearCumulative, 10).unwrap();
        assert_abs_diff_eq!(s.sigma(5), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.beta(5), 1.0 / 6.0, epsilon = 1e-15);
        let one = make_schedule(ScheduleKind::LinearCumulative, 1).unwrap();
        assert_eq!(one.sigma(1), 1.0);
        assert_eq!(one.beta(1), 1.0);
    }

    #[test]
    fn cosine_is_consistent_and_increasing() {
        let s = make_schedule(ScheduleKind::Cosine, 64).unwrap();
        // independent recomputation of sigma from beta
        let mut keep = 1.0;
        for t in 1..=64 {
            keep *= 1.0 - s.beta(t);
            assert!((s.sigma(t) - (1.0 - keep)).abs() < 1e-12);
            assert!(s.sigma(t) > s.sigma(t - 1));
        }
        assert_eq!(s.sigma(64), 1.0);
    }

    #[test]
    fn long_linear_schedules_stay_consistent() {
        for t in [100, 401, 1600, 10_000, 40_000, 1_000_000] {
            let s = make_schedule(ScheduleKind::LinearCumulative, t).unwrap();
            assert!(s.consistency_error() < CONSISTENCY_TOL, "T={t}");
        }
    }

    #[test]
    fn time_index_ties_go_low() {
        let s = make_schedule(ScheduleKind::LinearCumulative, 10).unwrap();
        assert_eq!(s.time_index_for_sigma(0.12).unwrap(), 1);
        assert_eq!(s.time_index_for_sigma(0.5).unwrap(), 5);
        assert_eq!(s.time_index_for_sigma(0.15).unwrap(), 1);
        assert_eq!(s.time_index_for_sigma(0.25).unwrap(), 2);
        assert!(s.time_index_for_sigma(0.0).is_err());
        assert!(s.time_index_for_sigma(1.0).is_err());
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(make_schedule(ScheduleKind::LinearCumulative, 0).is_err());
        assert!(NoiseSchedule::from_betas(vec![]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.0, 0.5]).is_err());
    }

    #[test]
    fn custom_schedule_from_betas() {
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5, 1.0]).unwrap();
        assert_abs_diff_eq!(s.sigma(2), 0.75, epsilon = 1e-15);
        assert_eq!(s.sigma(3), 1.0);
        assert_eq!(s.kind(), ScheduleKind::Custom);
    }

    #[test]
    fn fine_discretization_rule() {
        for sigma in [0.2, 0.1, 0.05, 0.02, 0.01] {
            let t = steps_for_sigma(sigma, DEFAULT_FINENESS);
            assert!(is_fine_enough(sigma, t, DEFAULT_FINENESS));
            assert!(!is_fine_enough(sigma, t - 1, DEFAULT_FINENESS));
        }
        assert_eq!(steps_for_sigma(0.2, 0.25), 100);
        assert_eq!(steps_for_sigma(0.1, 0.25), 400);
        assert_eq!(steps_for_sigma(0.01, 0.25), 40_000);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let s = make_schedule(ScheduleKind::LinearCumulative, 4).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s.to_json().unwrap()).unwrap();
        assert_eq!(v["kind"], "linear_cumulative");
        assert_eq!(v["T"], 4);
        let back: NoiseSchedule = serde_json::from_str(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
        let broken = r#"{"kind":"custom","T":2,"beta":[0.5,1.0],"sigma":[0.4,1.0]}"#;
        assert!(serde_json::from_str::<NoiseSchedule>(broken).is_err());
    }
}
