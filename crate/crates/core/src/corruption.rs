//! Forward corruption kernels and exact forward marginals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ExplicitDistribution, Mechanism, Token, TokenSeq, MASK};
use crate::error::{invalid, Result};
use crate::schedule::NoiseSchedule;
use crate::support::{hamming, projection};

/// Below this noise level marginals are accumulated in log space.
pub const LOG_SPACE_SIGMA: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardKernelSpec {
    pub mechanism: Mechanism,
    pub beta: f64,
}

impl ForwardKernelSpec {
    pub fn new(mechanism: Mechanism, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return invalid(format!("beta {beta} outside (0, 1]"));
        }
        Ok(ForwardKernelSpec { mechanism, beta })
    }
}

/// One-step transition probability `q(to | from)`.
pub fn forward_token_prob(
    spec: ForwardKernelSpec,
    from: Token,
    to: Token,
    k: usize,
) -> Result<f64> {
    check_pair(spec.mechanism, from, to, k)?;
    Ok(token_transition(spec.mechanism, spec.beta, from, to, k))
}

fn check_pair(mechanism: Mechanism, from: Token, to: Token, k: usize) -> Result<()> {
    for t in [from, to] {
        if t as usize > k || (t == MASK && mechanism == Mechanism::Uniform) {
            return invalid(format!(
                "token {t} not valid for {mechanism} corruption with K={k}"
            ));
        }
    }
    Ok(())
}

/// Per-token corruption probability at rate `rate`, which is `beta_t` for a
/// single step and `sigma_t` for the marginal from clean data.
pub(crate) fn token_transition(
    mechanism: Mechanism,
    rate: f64,
    from: Token,
    to: Token,
    k: usize,
) -> f64 {
    let stay = if from == to { 1.0 - rate } else { 0.0 };
    match mechanism {
        Mechanism::Uniform => stay + rate / k as f64,
        Mechanism::Absorbing => {
            if from == MASK {
                f64::from(u8::from(to == MASK))
            } else {
                stay + if to == MASK { rate } else { 0.0 }
            }
        }
    }
}

/// Corrupts each position independently with probability `sigma`.
pub fn corrupt_to_level<R: Rng + ?Sized>(
    seq: &TokenSeq,
    sigma: f64,
    mechanism: Mechanism,
    k: usize,
    rng: &mut R,
) -> TokenSeq {
    let out = seq
        .iter()
        .map(|&t| {
            if rng.gen::<f64>() < sigma {
                match mechanism {
                    Mechanism::Uniform => rng.gen_range(1..=k as Token),
                    Mechanism::Absorbing => MASK,
                }
            } else {
                t
            }
        })
        .collect();
    TokenSeq::new(out)
}

fn level_prob(mechanism: Mechanism, sigma: f64, clean: Token, noisy: Token, kf: f64) -> f64 {
    match mechanism {
        Mechanism::Uniform if clean == noisy => 1.0 - sigma + sigma / kf,
        Mechanism::Uniform => sigma / kf,
        Mechanism::Absorbing if noisy == MASK => sigma,
        Mechanism::Absorbing if clean == noisy => 1.0 - sigma,
        Mechanism::Absorbing => 0.0,
    }
}

/// Probability of `x` at noise level `sigma` given clean `x0`.
pub(crate) fn forward_marginal(
    mechanism: Mechanism,
    sigma: f64,
    x0: &[Token],
    x: &[Token],
    k: usize,
) -> f64 {
    let kf = k as f64;
    x0.iter()
        .zip(x)
        .map(|(&a, &b)| level_prob(mechanism, sigma, a, b, kf))
        .product()
}

/// Log of [`forward_marginal`], `None` when it is zero.
fn log_forward_marginal(
    mechanism: Mechanism,
    sigma: f64,
    x0: &[Token],
    x: &[Token],
    k: usize,
) -> Option<f64> {
    let kf = k as f64;
    x0.iter().zip(x).try_fold(0.0, |acc, (&a, &b)| {
        let p = level_prob(mechanism, sigma, a, b, kf);
        (p > 0.0).then(|| acc + p.ln())
    })
}

pub(crate) fn check_state(
    dist: &ExplicitDistribution,
    x: &[Token],
    mechanism: Mechanism,
) -> Result<()> {
    TokenSeq::from(x).validate(dist.vocab(), dist.len(), Some(mechanism))
}

/// `q(x)` at noise level `sigma` under data `dist`.
pub fn marginal_at_level(
    dist: &ExplicitDistribution,
    sigma: f64,
    x: &[Token],
    mechanism: Mechanism,
) -> Result<f64> {
    check_state(dist, x, mechanism)?;
    if !(0.0..=1.0).contains(&sigma) {
        return invalid(format!("sigma {sigma} outside [0, 1]"));
    }
    Ok(marginal_unchecked(dist, sigma, x, mechanism))
}

pub(crate) fn marginal_unchecked(
    dist: &ExplicitDistribution,
    sigma: f64,
    x: &[Token],
    mechanism: Mechanism,
) -> f64 {
    let k = dist.vocab();
    if sigma > LOG_SPACE_SIGMA {
        return dist
            .iter()
            .map(|(x0, p)| p * forward_marginal(mechanism, sigma, x0, x, k))
            .sum();
    }
    let logs: Vec<f64> = dist
        .iter()
        .filter_map(|(x0, p)| log_forward_marginal(mechanism, sigma, x0, x, k).map(|l| l + p.ln()))
        .collect();
    log_sum_exp(&logs).exp()
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `q_t(x)` for step `t` of `schedule`.
pub fn marginal_exact(
    dist: &ExplicitDistribution,
    schedule: &NoiseSchedule,
    t: usize,
    x: &TokenSeq,
    mechanism: Mechanism,
) -> Result<f64> {
    schedule.check_step(t)?;
    marginal_at_level(dist, schedule.sigma(t), x, mechanism)
}

/// Leading monomial of the small-noise marginal expansion:
/// `p_data(proj(x)) * (sigma/K)^d` for uniform and `p_data(proj(x)) * sigma^d`
/// for absorbing, which is zero when the unmasked part of `x` agrees with no
/// support string.
pub fn marginal_leading_term(
    dist: &ExplicitDistribution,
    x: &TokenSeq,
    sigma: f64,
    mechanism: Mechanism,
) -> Result<f64> {
    check_state(dist, x, mechanism)?;
    let proj = projection(x, dist)?;
    let d = proj.distance as i32;
    Ok(match mechanism {
        Mechanism::Uniform => proj.mass * (sigma / dist.vocab() as f64).powi(d),
        Mechanism::Absorbing => {
            if proj.distance > x.mask_count() {
                0.0
            } else {
                proj.mass * sigma.powi(d)
            }
        }
    })
}

/// Whether some support string agrees with every unmasked token of `x`.
pub fn consistent_with_support(dist: &ExplicitDistribution, x: &[Token]) -> bool {
    let masks = x.iter().filter(|&&t| t == MASK).count();
    dist.support().iter().any(|z| hamming(x, z) == masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::all_states;
    use crate::schedule::{make_schedule, ScheduleKind};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(k: usize) -> ExplicitDistribution {
        ExplicitDistribution::new(k, 1, vec![TokenSeq::new(vec![1])], vec![1.0]).unwrap()
    }

    fn pair_dist() -> ExplicitDistribution {
        ExplicitDistribution::new(
            2,
            2,
            vec![TokenSeq::new(vec![1, 1]), TokenSeq::new(vec![2, 2])],
            vec![0.75, 0.25],
        )
        .unwrap()
    }

    #[test]
    fn forward_rows() {
        let u = ForwardKernelSpec::new(Mechanism::Uniform, 0.1).unwrap();
        assert_abs_diff_eq!(
            forward_token_prob(u, 2, 2, 4).unwrap(),
            0.925,
            epsilon = 1e-15
        );
        let a = ForwardKernelSpec::new(Mechanism::Absorbing, 0.1).unwrap();
        assert_eq!(forward_token_prob(a, 2, MASK, 4).unwrap(), 0.1);
        assert!(forward_token_prob(u, MASK, 1, 4).is_err());
        assert!(ForwardKernelSpec::new(Mechanism::Uniform, 0.0).is_err());
        for (spec, alphabet) in [(u, vec![1, 2, 3, 4]), (a, vec![MASK, 1, 2, 3, 4])] {
            for &from in &alphabet {
                let row: f64 = alphabet
                    .iter()
                    .map(|&to| forward_token_prob(spec, from, to, 4).unwrap())
                    .sum();
                assert_abs_diff_eq!(row, 1.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn corruption_extremes_and_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = TokenSeq::new(vec![1, 2, 3]);
        assert_eq!(
            corrupt_to_level(&s, 0.0, Mechanism::Uniform, 3, &mut rng),
            s
        );
        assert_eq!(
            corrupt_to_level(&s, 1.0, Mechanism::Absorbing, 3, &mut rng),
            TokenSeq::masked(3)
        );
        let long = TokenSeq::new(vec![1; 100_000]);
        let out = corrupt_to_level(&long, 0.5, Mechanism::Absorbing, 4, &mut rng);
        let rate = out.mask_count() as f64 / 1e5;
        assert!((rate - 0.5).abs() < 0.01, "{rate}");
    }

    #[test]
    fn single_token_marginals() {
        let s = NoiseSchedule::from_betas(vec![0.2]).unwrap();
        let d = single(2);
        assert_abs_diff_eq!(
            marginal_exact(&d, &s, 1, &TokenSeq::new(vec![1]), Mechanism::Uniform).unwrap(),
            0.9,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            marginal_exact(&d, &s, 1, &TokenSeq::new(vec![2]), Mechanism::Uniform).unwrap(),
            0.1,
            epsilon = 1e-15
        );
        assert_eq!(
            marginal_exact(&d, &s, 1, &TokenSeq::new(vec![2]), Mechanism::Absorbing).unwrap(),
            0.0
        );
        assert!(marginal_exact(&d, &s, 2, &TokenSeq::new(vec![1]), Mechanism::Uniform).is_err());
    }

    #[test]
    fn marginals_normalize() {
        let d = pair_dist();
        for mech in [Mechanism::Uniform, Mechanism::Absorbing] {
            for sigma in [0.3, 1e-4] {
                let total: f64 = all_states(2, 2, mech)
                    .iter()
                    .map(|x| marginal_at_level(&d, sigma, x, mech).unwrap())
                    .sum();
                assert_abs_diff_eq!(total, 1.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn log_space_agrees_with_direct_sum() {
        let d = pair_dist();
        let sigma = 5e-4;
        for mech in [Mechanism::Uniform, Mechanism::Absorbing] {
            for x in all_states(2, 2, mech) {
                let direct: f64 = d
                    .iter()
                    .map(|(x0, p)| p * forward_marginal(mech, sigma, x0, &x, 2))
                    .sum();
                let logged = marginal_at_level(&d, sigma, &x, mech).unwrap();
                assert!((direct - logged).abs() <= 1e-14 * direct.max(1e-300), "{x}");
            }
        }
    }

    #[test]
    fn chapman_kolmogorov() {
        let d = ExplicitDistribution::from_weights(
            3,
            2,
            vec![
                TokenSeq::new(vec![1, 2]),
                TokenSeq::new(vec![3, 3]),
                TokenSeq::new(vec![2, 1]),
            ],
            vec![0.5, 0.3, 0.2],
        )
        .unwrap();
        let s = make_schedule(ScheduleKind::Cosine, 6).unwrap();
        for mech in [Mechanism::Uniform, Mechanism::Absorbing] {
            let states = all_states(3, 2, mech);
            for t in 2..=6 {
                for y in &states {
                    let pushed: f64 = states
                        .iter()
                        .map(|x| {
                            let step: f64 = x
                                .iter()
                                .zip(y.iter())
                                .map(|(&a, &b)| token_transition(mech, s.beta(t), a, b, 3))
                                .product();
                            marginal_exact(&d, &s, t - 1, x, mech).unwrap() * step
                        })
                        .sum();
                    assert_abs_diff_eq!(
                        pushed,
                        marginal_exact(&d, &s, t, y, mech).unwrap(),
                        epsilon = 1e-10
                    );
                }
            }
        }
    }

    #[test]
    fn leading_term_examples() {
        let d = pair_dist();
        let lead = marginal_leading_term(&d, &TokenSeq::new(vec![1, 2]), 0.01, Mechanism::Uniform)
            .unwrap();
        assert_abs_diff_eq!(lead, 0.005, epsilon = 1e-15);
        let lead = marginal_leading_term(&d, &TokenSeq::new(vec![1, 1]), 0.01, Mechanism::Uniform)
            .unwrap();
        assert_eq!(lead, 0.75);
        let lead =
            marginal_leading_term(&d, &TokenSeq::new(vec![1, 2]), 0.01, Mechanism::Absorbing)
                .unwrap();
        assert_eq!(lead, 0.0);
        let x = TokenSeq::new(vec![MASK, 2]);
        assert!(consistent_with_support(&d, &x));
        let lead = marginal_leading_term(&d, &x, 0.01, Mechanism::Absorbing).unwrap();
        assert_abs_diff_eq!(lead, 0.0025, epsilon = 1e-15);
        let mut last = f64::INFINITY;
        for sigma in [0.1, 0.01, 0.001] {
            let x = TokenSeq::new(vec![1, 2]);
            let ratio = marginal_at_level(&d, sigma, &x, Mechanism::Uniform).unwrap()
                / marginal_leading_term(&d, &x, sigma, Mechanism::Uniform).unwrap();
            let gap = (ratio - 1.0).abs();
            assert!(gap < last && gap < 2.0 * sigma);
            last = gap;
        }
    }
}
