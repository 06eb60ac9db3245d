//! Numerical checks of the small-noise behaviour of reverse kernels:
//! scale-exponent fits, threshold recovery under multiplicative distortion,
//! marginal expansions and parameterization identities.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corruption::{marginal_at_level, marginal_leading_term, marginal_unchecked};
use crate::domain::{all_states, ExplicitDistribution, Mechanism, Token, TokenSeq, MASK};
use crate::error::{invalid, Result};
use crate::reverse::{
    candidate_edits, kernel_from_posterior_at, posterior_at_level, reverse_token_kernel_exact,
    score_entropy_exact, weighted_masked_ce_exact, Denoiser, ExactDenoiser, Parameterization,
    PosteriorTable, ScoreTable,
};
use crate::schedule::{
    make_schedule, steps_for_sigma, NoiseSchedule, ScheduleKind, DEFAULT_FINENESS,
};
use crate::support::{classify_edit, projection};

/// Noise levels used by the scale checks.
pub const DEFAULT_SIGMA_GRID: [f64; 5] = [0.2, 0.1, 0.05, 0.02, 0.01];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateTolerances {
    pub exponent: f64,
    pub coefficient_rel: f64,
    pub zero_mass: f64,
}

impl Default for RateTolerances {
    fn default() -> Self {
        RateTolerances {
            exponent: 0.1,
            coefficient_rel: 0.1,
            zero_mass: 1e-12,
        }
    }
}

/// Scaling fit of one edit's normalized score across the noise grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditFit {
    pub state: TokenSeq,
    pub h: usize,
    pub y: Token,
    pub delta_d: i8,
    /// Predicted slope of `log score` against `log sigma`, equal to `delta_d`.
    pub target_exponent: f64,
    /// Least-squares slope; `None` when the score vanishes identically.
    pub fitted_exponent: Option<f64>,
    pub fitted_coefficient: f64,
    pub coefficient_target: f64,
    pub scores: Vec<f64>,
    /// Largest raw kernel mass seen for this edit.
    pub max_kernel_mass: f64,
    pub exponent_ok: bool,
    pub coefficient_ok: bool,
}

impl EditFit {
    pub fn passed(&self) -> bool {
        self.exponent_ok && self.coefficient_ok
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSeparationReport {
    pub mechanism: Mechanism,
    pub sigma_grid: Vec<f64>,
    pub steps: Vec<usize>,
    pub fineness: f64,
    pub tolerances: RateTolerances,
    pub edits: Vec<EditFit>,
}

impl RateSeparationReport {
    pub fn passed(&self) -> bool {
        self.edits.iter().all(EditFit::passed)
    }

    pub fn classes(&self) -> Vec<i8> {
        let mut c: Vec<i8> = self.edits.iter().map(|e| e.delta_d).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "state,h,y,delta_d,target_exponent,fitted_exponent,fitted_coefficient,coefficient_target,exponent_ok,coefficient_ok\n",
        );
        for e in &self.edits {
            let slope = e
                .fitted_exponent
                .map_or_else(|| "+inf".to_string(), |s| format!("{s:.6}"));
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.6e},{:.6e},{},{}",
                e.state,
                e.h,
                e.y,
                e.delta_d,
                e.target_exponent,
                slope,
                e.fitted_coefficient,
                e.coefficient_target,
                e.exponent_ok,
                e.coefficient_ok
            );
        }
        out
    }
}

/// Ordinary least squares slope and intercept.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Default edit set: every admissible edit of every state that has positive
/// probability at small noise.
pub fn default_edits(
    dist: &ExplicitDistribution,
    mechanism: Mechanism,
) -> Vec<(TokenSeq, usize, Token)> {
    let k = dist.vocab();
    all_states(k, dist.len(), mechanism)
        .into_iter()
        .filter(|x| {
            mechanism == Mechanism::Uniform
                || (x.mask_count() > 0 && marginal_unchecked(dist, 0.5, x, mechanism) > 0.0)
        })
        .flat_map(|x| {
            candidate_edits(&x, k, mechanism)
                .into_iter()
                .map(move |(h, y)| (x.clone(), h, y))
        })
        .collect()
}

/// Fits `log score ~ log sigma` for each edit on a linear schedule with
/// `T = ceil(1 / (c sigma^2))` steps per noise level.
pub fn verify_rate_separation(
    dist: &ExplicitDistribution,
    mechanism: Mechanism,
    sigma_grid: &[f64],
    fineness: f64,
    edits: &[(TokenSeq, usize, Token)],
    tol: RateTolerances,
) -> Result<RateSeparationReport> {
    if sigma_grid.len() < 3 {
        return invalid("rate fits need at least 3 noise levels");
    }
    if sigma_grid.iter().any(|&s| !(s > 0.0 && s < 1.0)) {
        return invalid("noise levels must lie in (0, 1)");
    }
    let k = dist.vocab();
    let schedules: Vec<(NoiseSchedule, usize)> = sigma_grid
        .iter()
        .map(|&s| {
            let sched =
                make_schedule(ScheduleKind::LinearCumulative, steps_for_sigma(s, fineness))?;
            let t = sched.time_index_for_sigma(s)?;
            Ok((sched, t))
        })
        .collect::<Result<_>>()?;
    let (imin, &sigma_min) = sigma_grid
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty grid");
    let fits = edits
        .par_iter()
        .map(|(x, h, y)| {
            let class = classify_edit(x, *h, *y, dist, mechanism)?;
            let dd = class.delta_d;
            let mut scores = Vec::with_capacity(sigma_grid.len());
            let mut max_mass: f64 = 0.0;
            for (sched, t) in &schedules {
                let kernel = reverse_token_kernel_exact(dist, sched, *t, x, *h, mechanism)?;
                let mass = kernel[*y as usize];
                max_mass = max_mass.max(mass);
                scores.push(mass / mechanism.proposal_rate(sched.beta(*t), k));
            }
            let before = projection(x, dist)?.mass;
            let after = projection(&x.with_edit(*h, *y), dist)?.mass;
            let ratio = after / before;
            let vanishing = mechanism == Mechanism::Absorbing && dd >= 0;
            let fit = if vanishing {
                EditFit {
                    state: x.clone(),
                    h: *h,
                    y: *y,
                    delta_d: dd,
                    target_exponent: f64::from(dd),
                    fitted_exponent: None,
                    fitted_coefficient: scores[imin],
                    coefficient_target: 0.0,
                    exponent_ok: max_mass <= tol.zero_mass,
                    coefficient_ok: max_mass <= tol.zero_mass,
                    scores,
                    max_kernel_mass: max_mass,
                }
            } else {
                let target = match mechanism {
                    Mechanism::Uniform => (k as f64).powi(-i32::from(dd)) * ratio,
                    Mechanism::Absorbing => ratio,
                };
                let logs: Vec<f64> = sigma_grid.iter().map(|s| s.ln()).collect();
                let ls: Vec<f64> = scores.iter().map(|s| s.ln()).collect();
                let slope = if scores.iter().all(|&s| s > 0.0) {
                    Some(least_squares(&logs, &ls).0)
                } else {
                    None
                };
                let coef = scores[imin] / sigma_min.powi(i32::from(dd));
                EditFit {
                    state: x.clone(),
                    h: *h,
                    y: *y,
                    delta_d: dd,
                    target_exponent: f64::from(dd),
                    fitted_exponent: slope,
                    fitted_coefficient: coef,
                    coefficient_target: target,
                    exponent_ok: slope.is_some_and(|s| (s - f64::from(dd)).abs() <= tol.exponent),
                    coefficient_ok: (coef / target - 1.0).abs() <= tol.coefficient_rel,
                    scores,
                    max_kernel_mass: max_mass,
                }
            };
            Ok(fit)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RateSeparationReport {
        mechanism,
        sigma_grid: sigma_grid.to_vec(),
        steps: schedules.iter().map(|(s, _)| s.steps()).collect(),
        fineness,
        tolerances: tol,
        edits: fits,
    })
}

/// The exact score table of `x` at noise level `sigma` on the fine
/// schedule used by the rate checks.
pub fn exact_score_table(
    dist: &ExplicitDistribution,
    mechanism: Mechanism,
    x: &TokenSeq,
    sigma: f64,
    fineness: f64,
) -> Result<ScoreTable> {
    let sched = make_schedule(
        ScheduleKind::LinearCumulative,
        steps_for_sigma(sigma, fineness),
    )?;
    let t = sched.time_index_for_sigma(sigma)?;
    let kernel = crate::reverse::ExactKernel { dist, mechanism };
    let mut table = ScoreTable::build(&kernel, x, t, &sched, Some(dist))?;
    table.sigma = sigma;
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub h: usize,
    pub y: Token,
    pub predicted_improving: bool,
    pub improving: Option<bool>,
}

/// Flags an edit as support-improving iff its score exceeds `sigma^(-1/2)`.
pub fn threshold_recovery(scores: &ScoreTable, sigma: f64) -> Vec<Classification> {
    let tau = sigma.powf(-0.5);
    scores
        .entries
        .iter()
        .map(|e| Classification {
            h: e.h,
            y: e.y,
            predicted_improving: e.score > tau,
            improving: e.delta_d.map(|d| d < 0),
        })
        .collect()
}

/// Fraction of classified edits whose prediction matches the ground truth;
/// `None` when no entry carries ground truth.
pub fn classification_accuracy(c: &[Classification]) -> Option<f64> {
    let labelled: Vec<_> = c
        .iter()
        .filter_map(|c| c.improving.map(|t| t == c.predicted_improving))
        .collect();
    if labelled.is_empty() {
        return None;
    }
    Some(labelled.iter().filter(|&&ok| ok).count() as f64 / labelled.len() as f64)
}

/// Largest symmetric ratio between corresponding entries. Entries that are
/// zero in both tables are skipped.
pub fn distortion_factor(a: &ScoreTable, b: &ScoreTable) -> Result<f64> {
    if a.state != b.state || a.entries.len() != b.entries.len() {
        return invalid("score tables describe different states or edit sets");
    }
    let mut worst: f64 = 1.0;
    for (p, q) in a.entries.iter().zip(&b.entries) {
        if (p.h, p.y) != (q.h, q.y) {
            return invalid("score tables list edits in different orders");
        }
        match (p.score > 0.0, q.score > 0.0) {
            (false, false) => {}
            (true, true) => worst = worst.max(p.score / q.score).max(q.score / p.score),
            _ => {
                return invalid(format!(
                    "entry ({}, {}) is zero in only one table",
                    p.h, p.y
                ))
            }
        }
    }
    Ok(worst)
}

/// Multiplies each score by `sigma^(-exponent * u)` with `u` uniform on
/// `[-1, 1]`; the draw with the largest `|u|` is pushed to `±1` so the
/// distortion equals `sigma^(-exponent)` whenever a nonzero entry exists.
pub fn perturb_scores(table: &ScoreTable, sigma: f64, exponent: f64, seed: u64) -> ScoreTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut us: Vec<f64> = table
        .entries
        .iter()
        .map(|_| rng.gen_range(-1.0..=1.0))
        .collect();
    let extreme = us
        .iter()
        .enumerate()
        .filter(|(i, _)| table.entries[*i].score > 0.0)
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i);
    if let Some(i) = extreme {
        us[i] = if us[i] < 0.0 { -1.0 } else { 1.0 };
    }
    let mut out = table.clone();
    for (e, u) in out.entries.iter_mut().zip(us) {
        e.score *= sigma.powf(-exponent * u);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionProfile {
    pub sigma_grid: Vec<f64>,
    pub threshold: Vec<f64>,
    pub distortion: Vec<f64>,
    pub accuracy_exact: Vec<f64>,
    pub accuracy_perturbed: Vec<f64>,
    /// Largest grid level at and below which exact-score accuracy is 1.
    pub sigma_star_exact: Option<f64>,
    pub sigma_star_perturbed: Option<f64>,
}

fn sigma_star(grid: &[f64], acc: &[f64]) -> Option<f64> {
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[a].total_cmp(&grid[b]));
    let mut best = None;
    for i in order {
        if acc[i] < 1.0 {
            break;
        }
        best = Some(grid[i]);
    }
    best
}

/// Threshold classification over every positive-probability state of the
/// instance, with exact scores and with seeded distortion
/// `sigma^(-exponent)`.
pub fn threshold_profile(
    dist: &ExplicitDistribution,
    mechanism: Mechanism,
    sigma_grid: &[f64],
    exponent: f64,
    seed: u64,
) -> Result<DistortionProfile> {
    let states: Vec<TokenSeq> = all_states(dist.vocab(), dist.len(), mechanism)
        .into_iter()
        .filter(|x| marginal_unchecked(dist, 0.5, x, mechanism) > 0.0)
        .filter(|x| mechanism == Mechanism::Uniform || x.mask_count() > 0)
        .collect();
    let rows = sigma_grid
        .par_iter()
        .map(|&sigma| {
            let (mut exact, mut perturbed) = (Vec::new(), Vec::new());
            let mut distortion: f64 = 1.0;
            for (i, x) in states.iter().enumerate() {
                let table = exact_score_table(dist, mechanism, x, sigma, DEFAULT_FINENESS)?;
                let noisy = perturb_scores(&table, sigma, exponent, seed.wrapping_add(i as u64));
                distortion = distortion.max(distortion_factor(&table, &noisy)?);
                exact.extend(threshold_recovery(&table, sigma));
                perturbed.extend(threshold_recovery(&noisy, sigma));
            }
            Ok((
                distortion,
                classification_accuracy(&exact).unwrap_or(1.0),
                classification_accuracy(&perturbed).unwrap_or(1.0),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let accuracy_exact: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let accuracy_perturbed: Vec<f64> = rows.iter().map(|r| r.2).collect();
    Ok(DistortionProfile {
        sigma_grid: sigma_grid.to_vec(),
        threshold: sigma_grid.iter().map(|s| s.powf(-0.5)).collect(),
        distortion: rows.iter().map(|r| r.0).collect(),
        sigma_star_exact: sigma_star(sigma_grid, &accuracy_exact),
        sigma_star_perturbed: sigma_star(sigma_grid, &accuracy_perturbed),
        accuracy_exact,
        accuracy_perturbed,
    })
}

/// Two-point example where a bounded multiplicative error still leaves a
/// large total-variation gap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiplicativeVsTv {
    pub sigma: f64,
    pub alpha: f64,
    pub distortion: f64,
    pub tv: f64,
    pub kl_pq: f64,
    pub kl_qp: f64,
}

pub fn example_multiplicative_vs_tv(sigma: f64, alpha: f64) -> Result<MultiplicativeVsTv> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return invalid(format!("alpha {alpha} outside (0, 1/2)"));
    }
    if !(sigma > 0.0 && sigma < 0.25) {
        return invalid(format!("sigma {sigma} outside (0, 1/4)"));
    }
    let q = [0.5 - sigma, 0.5 + sigma];
    let p0 = sigma.powf(alpha) * (0.5 - sigma);
    let p = [p0, 1.0 - p0];
    let distortion = p
        .iter()
        .zip(&q)
        .map(|(a, b)| (a / b).max(b / a))
        .fold(1.0, f64::max);
    let tv = 0.5 * p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>();
    let kl =
        |a: &[f64; 2], b: &[f64; 2]| a.iter().zip(b).map(|(x, y)| x * (x / y).ln()).sum::<f64>();
    Ok(MultiplicativeVsTv {
        sigma,
        alpha,
        distortion,
        tv,
        kl_pq: kl(&p, &q),
        kl_qp: kl(&q, &p),
    })
}

/// Error of the leading marginal term on one state across a noise grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalCheck {
    pub state: TokenSeq,
    pub distance: usize,
    /// `|q - leading| / scale^(d+1)` per grid level.
    pub scaled_error: Vec<f64>,
    pub bound: f64,
    pub within_bound: bool,
    /// Scaled error at the smallest level over that at the largest.
    pub growth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalReport {
    pub mechanism: Mechanism,
    pub sigma_grid: Vec<f64>,
    pub states: Vec<MarginalCheck>,
}

impl MarginalReport {
    pub fn passed(&self, max_growth: f64) -> bool {
        self.states
            .iter()
            .all(|s| s.within_bound && s.growth <= max_growth)
    }
}

/// Checks `|q(x) - leading(x)| <= B * scale^(d(x,D)+1)` over the grid, with
/// `scale = sigma/K` and `B = 1 + H(K-1)` under uniform corruption, and
/// `scale = sigma`, `B = 1 + H` under absorbing corruption.
pub fn verify_marginal_expansion(
    dist: &ExplicitDistribution,
    mechanism: Mechanism,
    sigma_grid: &[f64],
) -> Result<MarginalReport> {
    let (k, h) = (dist.vocab(), dist.len());
    let bound = match mechanism {
        Mechanism::Uniform => 1.0 + (h * (k - 1)) as f64,
        Mechanism::Absorbing => 1.0 + h as f64,
    };
    let mut order: Vec<usize> = (0..sigma_grid.len()).collect();
    order.sort_by(|&a, &b| sigma_grid[a].total_cmp(&sigma_grid[b]));
    let (smallest, largest) = (order[0], order[order.len() - 1]);
    let mut states = Vec::new();
    for x in all_states(k, h, mechanism) {
        if marginal_unchecked(dist, 0.5, &x, mechanism) <= 0.0 {
            continue;
        }
        let d = projection(&x, dist)?.distance;
        let scaled_error = sigma_grid
            .iter()
            .map(|&s| {
                let q = marginal_at_level(dist, s, &x, mechanism)?;
                let lead = marginal_leading_term(dist, &x, s, mechanism)?;
                let scale = match mechanism {
                    Mechanism::Uniform => s / k as f64,
                    Mechanism::Absorbing => s,
                };
                Ok((q - lead).abs() / scale.powi(d as i32 + 1))
            })
            .collect::<Result<Vec<f64>>>()?;
        // the floor keeps rounding noise on exact matches from reading as growth
        let growth = (scaled_error[smallest] + 1e-9) / (scaled_error[largest] + 1e-9);
        states.push(MarginalCheck {
            state: x,
            distance: d,
            within_bound: scaled_error.iter().all(|&e| e <= bound),
            scaled_error,
            bound,
            growth,
        });
    }
    Ok(MarginalReport {
        mechanism,
        sigma_grid: sigma_grid.to_vec(),
        states,
    })
}

/// Largest entrywise gap among Bayes, D3PM and SUBS kernels built from
/// random posteriors on random absorbing states.
pub fn absorbing_parameterization_gap(
    k: usize,
    h: usize,
    states: usize,
    posteriors: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sched = make_schedule(ScheduleKind::Cosine, 16)?;
    let mut worst: f64 = 0.0;
    for _ in 0..states {
        let x: Vec<Token> = (0..h)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    MASK
                } else {
                    rng.gen_range(1..=k as Token)
                }
            })
            .collect();
        let t = rng.gen_range(1..=sched.steps());
        for _ in 0..posteriors {
            for &xh in &x {
                let mut post: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
                let z: f64 = post.iter().sum();
                post.iter_mut().for_each(|p| *p /= z);
                let kernels = [
                    Parameterization::Bayes,
                    Parameterization::D3pm,
                    Parameterization::Subs,
                ]
                .map(|p| kernel_from_posterior_at(&post, xh, t, &sched, Mechanism::Absorbing, p));
                let [a, b, c] = kernels;
                let (a, b, c) = (a?, b?, c?);
                for i in 0..=k {
                    worst = worst.max((a[i] - b[i]).abs()).max((a[i] - c[i]).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// A uniform-corruption instance on which the Bayes and D3PM kernels built
/// from the exact posterior differ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterizationGap {
    pub dist: ExplicitDistribution,
    pub state: TokenSeq,
    pub h: usize,
    pub t: usize,
    pub steps: usize,
    pub gap: f64,
}

/// Scans `K = 2, H = 2` supports (weights `1, 2, ...` in listing order),
/// states, positions and steps of a short linear schedule for the first
/// Bayes/D3PM gap above `min_gap`.
pub fn search_bayes_d3pm_gap(min_gap: f64) -> Result<Option<ParameterizationGap>> {
    let (k, h, steps) = (2usize, 2usize, 4usize);
    let sched = make_schedule(ScheduleKind::LinearCumulative, steps)?;
    let strings = all_states(k, h, Mechanism::Uniform);
    for mask in 1u32..(1 << strings.len()) {
        let support: Vec<TokenSeq> = strings
            .iter()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 1)
            .map(|(_, s)| s.clone())
            .collect();
        let weights = (1..=support.len()).map(|w| w as f64).collect();
        let dist = ExplicitDistribution::from_weights(k, h, support, weights)?;
        for x in &strings {
            for t in 1..=steps {
                let post: PosteriorTable =
                    posterior_at_level(&dist, sched.sigma(t), x, Mechanism::Uniform)?;
                for pos in 0..h {
                    let p = post.position(pos);
                    let a = kernel_from_posterior_at(
                        p,
                        x[pos],
                        t,
                        &sched,
                        Mechanism::Uniform,
                        Parameterization::Bayes,
                    )?;
                    let b = kernel_from_posterior_at(
                        p,
                        x[pos],
                        t,
                        &sched,
                        Mechanism::Uniform,
                        Parameterization::D3pm,
                    )?;
                    let gap = a
                        .iter()
                        .zip(&b)
                        .map(|(u, v)| (u - v).abs())
                        .fold(0.0, f64::max);
                    if gap > min_gap {
                        return Ok(Some(ParameterizationGap {
                            dist,
                            state: x.clone(),
                            h: pos,
                            t,
                            steps,
                            gap,
                        }));
                    }
                }
            }
        }
    }
    Ok(None)
}

/// Mixes a denoiser's posterior with the uniform law.
#[derive(Clone, Debug)]
pub struct BlendDenoiser<D> {
    pub inner: D,
    pub uniform_weight: f64,
}

impl<D: Denoiser> Denoiser for BlendDenoiser<D> {
    fn vocab(&self) -> usize {
        self.inner.vocab()
    }

    fn clean_posterior(&self, x: &TokenSeq, h: usize, sigma: f64) -> Result<Vec<f64>> {
        let k = self.vocab() as f64;
        let w = self.uniform_weight;
        Ok(self
            .inner
            .clean_posterior(x, h, sigma)?
            .into_iter()
            .map(|p| (1.0 - w) * p + w / k)
            .collect())
    }
}

/// Score-entropy minus weighted cross-entropy for several posterior models on
/// one instance; the spread of the returned gaps measures their dependence
/// on the model.
pub fn score_entropy_gaps(
    dist: &ExplicitDistribution,
    steps: usize,
    uniform_weights: &[f64],
) -> Result<Vec<f64>> {
    let sched = make_schedule(ScheduleKind::LinearCumulative, steps)?;
    let ts: Vec<usize> = (1..steps).collect();
    uniform_weights
        .iter()
        .map(|&w| {
            let model = BlendDenoiser {
                inner: ExactDenoiser {
                    dist,
                    mechanism: Mechanism::Absorbing,
                },
                uniform_weight: w,
            };
            let se = score_entropy_exact(&model, dist, &sched, &ts)?;
            let ce = weighted_masked_ce_exact(&model, dist, &sched, &ts)?;
            Ok(se.value - ce.value)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn single() -> ExplicitDistribution {
        ExplicitDistribution::new(2, 1, vec![TokenSeq::new(vec![1])], vec![1.0]).unwrap()
    }

    #[test]
    fn least_squares_recovers_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 - 0.5 * x).collect();
        let (m, b) = least_squares(&xs, &ys);
        assert_abs_diff_eq!(m, -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(b, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn toward_support_edit_on_single_token() {
        let d = single();
        let edits = vec![(TokenSeq::new(vec![2]), 0, 1)];
        let r = verify_rate_separation(
            &d,
            Mechanism::Uniform,
            &DEFAULT_SIGMA_GRID,
            DEFAULT_FINENESS,
            &edits,
            RateTolerances::default(),
        )
        .unwrap();
        let e = &r.edits[0];
        assert_eq!(e.delta_d, -1);
        assert!((e.fitted_exponent.unwrap() + 1.0).abs() < 0.05);
        assert_abs_diff_eq!(e.coefficient_target, 2.0, epsilon = 1e-12);
        assert!((e.fitted_coefficient / 2.0 - 1.0).abs() < 0.05);
        assert!(verify_rate_separation(
            &d,
            Mechanism::Uniform,
            &[0.1, 0.05],
            DEFAULT_FINENESS,
            &edits,
            RateTolerances::default()
        )
        .is_err());
    }

    #[test]
    fn example_values() {
        let e = example_multiplicative_vs_tv(1e-4, 0.25).unwrap();
        assert_abs_diff_eq!(e.distortion, 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(e.tv, 0.44991, epsilon = 1e-5);
        assert!(e.kl_pq >= 2.0 * e.tv * e.tv && e.kl_qp >= 2.0 * e.tv * e.tv);
        assert!(example_multiplicative_vs_tv(0.3, 0.25).is_err());
        assert!(example_multiplicative_vs_tv(0.1, 0.5).is_err());
    }

    #[test]
    fn distortion_of_scaled_table() {
        let d = single();
        let t = exact_score_table(
            &d,
            Mechanism::Uniform,
            &TokenSeq::new(vec![2]),
            0.1,
            DEFAULT_FINENESS,
        )
        .unwrap();
        assert_eq!(distortion_factor(&t, &t).unwrap(), 1.0);
        let mut u = t.clone();
        u.entries[0].score *= 3.0;
        assert_abs_diff_eq!(distortion_factor(&t, &u).unwrap(), 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(distortion_factor(&u, &t).unwrap(), 3.0, epsilon = 1e-12);
        u.entries[0].score = 0.0;
        assert!(distortion_factor(&t, &u).is_err());
        let noisy = perturb_scores(&t, 0.01, 0.3, 5);
        assert_abs_diff_eq!(
            distortion_factor(&t, &noisy).unwrap(),
            0.01f64.powf(-0.3),
            epsilon = 1e-9
        );
    }

    #[test]
    fn empty_table_classifies_nothing() {
        let t = ScoreTable {
            state: TokenSeq::new(vec![1]),
            sigma: 0.1,
            t: 1,
            normalizer_kind: crate::reverse::NormalizerKind::PerBeta,
            entries: vec![],
        };
        assert!(threshold_recovery(&t, 0.1).is_empty());
        assert_eq!(classification_accuracy(&[]), None);
    }

    #[test]
    fn uniform_gap_exists() {
        let g = search_bayes_d3pm_gap(1e-6)
            .unwrap()
            .expect("counterexample");
        assert!(g.gap > 1e-6);
    }
}
