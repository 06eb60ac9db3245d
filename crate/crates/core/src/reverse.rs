//! Exact reverse kernels, scores and clean-token posteriors, plus the
//! reverse-kernel parameterizations built from an arbitrary posterior.
//!
//! Kernel vectors have length `K + 1` and are indexed by token id, so entry
//! `0` is the mask. Posterior vectors have length `K`, entry `v - 1` holding
//! clean token `v`.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corruption::{check_state, forward_marginal, marginal_unchecked, token_transition};
use crate::domain::{
    all_states, clean_alphabet, for_each_sequence, ExplicitDistribution, Mechanism, Token,
    TokenSeq, MASK,
};
use crate::error::{invalid, LabError, Result};
use crate::schedule::NoiseSchedule;
use crate::support::SupportOracle;

/// Largest number of joint states a brute-force kernel may enumerate.
pub const KERNEL_ENUMERATION_LIMIT: u64 = 1_000_000;

/// Clean-token predictor `x_t, h -> q(x_0^h = . | x_t)`.
pub trait Denoiser {
    fn vocab(&self) -> usize;
    fn clean_posterior(&self, x: &TokenSeq, h: usize, sigma: f64) -> Result<Vec<f64>>;
}

/// One-position reverse transition `q(x_{t-1}^h = . | x_t)`.
pub trait ReverseKernel {
    fn vocab(&self) -> usize;
    fn mechanism(&self) -> Mechanism;
    fn kernel(
        &self,
        x: &TokenSeq,
        h: usize,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<Vec<f64>>;

    /// Kernels at every position of `x`.
    fn kernels(&self, x: &TokenSeq, t: usize, schedule: &NoiseSchedule) -> Result<Vec<Vec<f64>>> {
        (0..x.len())
            .map(|h| self.kernel(x, h, t, schedule))
            .collect()
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn vocab(&self) -> usize {
        (**self).vocab()
    }

    fn clean_posterior(&self, x: &TokenSeq, h: usize, sigma: f64) -> Result<Vec<f64>> {
        (**self).clean_posterior(x, h, sigma)
    }
}

impl<R: ReverseKernel + ?Sized> ReverseKernel for &R {
    fn vocab(&self) -> usize {
        (**self).vocab()
    }

    fn mechanism(&self) -> Mechanism {
        (**self).mechanism()
    }

    fn kernel(
        &self,
        x: &TokenSeq,
        h: usize,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<Vec<f64>> {
        (**self).kernel(x, h, t, schedule)
    }

    fn kernels(&self, x: &TokenSeq, t: usize, schedule: &NoiseSchedule) -> Result<Vec<Vec<f64>>> {
        (**self).kernels(x, t, schedule)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    Bayes,
    D3pm,
    Subs,
}

impl Parameterization {
    /// The parameterization a learned model uses under each mechanism.
    pub fn default_for(mechanism: Mechanism) -> Self {
        match mechanism {
            Mechanism::Uniform => Parameterization::D3pm,
            Mechanism::Absorbing => Parameterization::Subs,
        }
    }
}

impl FromStr for Parameterization {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bayes" => Ok(Parameterization::Bayes),
            "d3pm" => Ok(Parameterization::D3pm),
            "subs" => Ok(Parameterization::Subs),
            other => invalid(format!("unknown parameterization `{other}`")),
        }
    }
}

/// Per-position clean-token posteriors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTable {
    pub positions: Vec<Vec<f64>>,
}

impl PosteriorTable {
    pub fn position(&self, h: usize) -> &[f64] {
        &self.positions[h]
    }
}

fn alphabet(k: usize, mechanism: Mechanism) -> Vec<Token> {
    let mut a = clean_alphabet(k);
    if mechanism == Mechanism::Absorbing {
        a.insert(0, MASK);
    }
    a
}

fn check_position(x: &TokenSeq, h: usize) -> Result<()> {
    if h >= x.len() {
        return invalid(format!("position {h} out of range for length {}", x.len()));
    }
    Ok(())
}

fn check_enumeration(k: usize, len: usize, mechanism: Mechanism) -> Result<()> {
    let a = alphabet(k, mechanism).len() as u64;
    let size = a.checked_pow(len as u32).unwrap_or(u64::MAX);
    if size > KERNEL_ENUMERATION_LIMIT {
        return Err(LabError::Capacity(format!(
            "{size} joint states exceed {KERNEL_ENUMERATION_LIMIT}"
        )));
    }
    Ok(())
}

/// Probability of the one-step corruption `y -> x`.
fn step_prob(mechanism: Mechanism, beta: f64, y: &[Token], x: &[Token], k: usize) -> f64 {
    y.iter()
        .zip(x)
        .map(|(&a, &b)| token_transition(mechanism, beta, a, b, k))
        .product()
}

fn require_support(
    dist: &ExplicitDistribution,
    sigma: f64,
    x: &TokenSeq,
    mechanism: Mechanism,
) -> Result<f64> {
    check_state(dist, x, mechanism)?;
    let q = marginal_unchecked(dist, sigma, x, mechanism);
    if !(q > 0.0) {
        return invalid(format!("state {x} has zero probability at sigma {sigma}"));
    }
    Ok(q)
}

/// Exact reverse kernel at position `h`, split by the number `d` of other
/// positions that change in the step: entry `[y][d]` is the contribution of
/// all `y^{-h}` at Hamming distance `d` from `x^{-h}`.
pub fn reverse_kernel_by_order(
    dist: &ExplicitDistribution,
    schedule: &NoiseSchedule,
    t: usize,
    x: &TokenSeq,
    h: usize,
    mechanism: Mechanism,
) -> Result<Vec<Vec<f64>>> {
    schedule.check_step(t)?;
    check_position(x, h)?;
    let k = dist.vocab();
    check_enumeration(k, x.len(), mechanism)?;
    let q_t = require_support(dist, schedule.sigma(t), x, mechanism)?;
    let (sigma_prev, beta) = (schedule.sigma(t - 1), schedule.beta(t));
    let rest: Vec<Token> = x
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != h)
        .map(|(_, &v)| v)
        .collect();
    let alpha = alphabet(k, mechanism);
    let mut out = vec![vec![0.0; x.len()]; k + 1];
    let mut y = x.clone();
    for_each_sequence(rest.len(), &alpha, |others| {
        let mut d = 0;
        for (j, &v) in others.iter().enumerate() {
            let i = if j < h { j } else { j + 1 };
            y.set(i, v);
            d += usize::from(v != rest[j]);
        }
        for &yh in &alpha {
            y.set(h, yh);
            let fwd = step_prob(mechanism, beta, &y, x, k);
            if fwd > 0.0 {
                out[yh as usize][d] +=
                    marginal_unchecked(dist, sigma_prev, &y, mechanism) * fwd / q_t;
            }
        }
    });
    Ok(out)
}

/// Exact `q^h_{t-1|t}(. | x)` by enumeration of `y^{-h}`.
pub fn reverse_token_kernel_exact(
    dist: &ExplicitDistribution,
    schedule: &NoiseSchedule,
    t: usize,
    x: &TokenSeq,
    h: usize,
    mechanism: Mechanism,
) -> Result<Vec<f64>> {
    Ok(reverse_kernel_by_order(dist, schedule, t, x, h, mechanism)?
        .into_iter()
        .map(|terms| terms.iter().sum())
        .collect())
}

/// Reference kernel by joint enumeration of clean data and the previous
/// state, normalized by its own total rather than by a marginal formula.
pub fn reverse_token_kernel_naive(
    dist: &ExplicitDistribution,
    schedule: &NoiseSchedule,
    t: usize,
    x: &TokenSeq,
    h: usize,
    mechanism: Mechanism,
) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    check_position(x, h)?;
    check_state(dist, x, mechanism)?;
    let k = dist.vocab();
    check_enumeration(k, x.len(), mechanism)?;
    let (sigma_prev, beta) = (schedule.sigma(t - 1), schedule.beta(t));
    let mut out = vec![0.0; k + 1];
    for (x0, p) in dist.iter() {
        for_each_sequence(x.len(), &alphabet(k, mechanism), |y| {
            let w = p
                * forward_marginal(mechanism, sigma_prev, x0, y, k)
                * step_prob(mechanism, beta, y, x, k);
            out[y[h] as usize] += w;
        });
    }
    let total: f64 = out.iter().sum();
    if !(total > 0.0) {
        return invalid(format!("state {x} has zero probability at step {t}"));
    }
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

/// Reverse kernel entry divided by the mechanism's proposal rate.
pub fn normalized_score(
    dist: &ExplicitDistribution,
    schedule: &NoiseSchedule,
    t: usize,
    x: &TokenSeq,
    h: usize,
    y: Token,
    mechanism: Mechanism,
) -> Result<f64> {
    check_position(x, h)?;
    if y == x[h] {
        return invalid("normalized score needs y != x^h");
    }
    if y as usize > dist.vocab() {
        return invalid(format!("token {y} outside vocabulary"));
    }
    let kernel = reverse_token_kernel_exact(dist, schedule, t, x, h, mechanism)?;
    Ok(kernel[y as usize] / mechanism.proposal_rate(schedule.beta(t), dist.vocab()))
}

/// Concrete score `q_t(x^{h -> y}) / q_t(x)`.
pub fn concrete_score(
    dist: &ExplicitDistribution,
    schedule: &NoiseSchedule,
    t: usize,
    x: &TokenSeq,
    h: usize,
    y: Token,
    mechanism: Mechanism,
) -> Result<f64> {
    schedule.check_step(t)?;
    concrete_score_at_level(dist, schedule.sigma(t), x, h, y, mechanism)
}

pub fn concrete_score_at_level(
    dist: &ExplicitDistribution,
    sigma: f64,
    x: &TokenSeq,
    h: usize,
    y: Token,
    mechanism: Mechanism,
) -> Result<f64> {
    check_position(x, h)?;
    let q = require_support(dist, sigma, x, mechanism)?;
    let edited = x.with_edit(h, y);
    check_state(dist, &edited, mechanism)?;
    Ok(marginal_unchecked(dist, sigma, &edited, mechanism) / q)
}

/// Exact clean-token posterior at noise level `sigma`.
pub fn posterior_at_level(
    dist: &ExplicitDistribution,
    sigma: f64,
    x: &TokenSeq,
    mechanism: Mechanism,
) -> Result<PosteriorTable> {
    check_state(dist, x, mechanism)?;
    let k = dist.vocab();
    let logs: Vec<Option<f64>> = dist
        .iter()
        .map(|(x0, p)| {
            x0.iter().zip(x.iter()).try_fold(p.ln(), |acc, (&a, &b)| {
                let q = forward_marginal(mechanism, sigma, &[a], &[b], k);
                (q > 0.0).then(|| acc + q.ln())
            })
        })
        .collect();
    let top = logs
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return invalid(format!("state {x} has zero probability at sigma {sigma}"));
    }
    let mut positions = vec![vec![0.0; k]; x.len()];
    let mut total = 0.0;
    for (x0, l) in dist.support().iter().zip(&logs) {
        if let Some(l) = l {
            let w = (l - top).exp();
            total += w;
            for (h, &v) in x0.iter().enumerate() {
                positions[h][v as usize - 1] += w;
            }
        }
    }
    for row in &mut positions {
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(PosteriorTable { positions })
}

/// [`posterior_at_level`], except that an absorbing state with no
/// consistent support string conditions on the support strings that
/// disagree with its unmasked tokens least often. Factorized reverse steps
/// can reach such states by unmasking several positions at once.
pub fn posterior_or_nearest(
    dist: &ExplicitDistribution,
    sigma: f64,
    x: &TokenSeq,
    mechanism: Mechanism,
) -> Result<PosteriorTable> {
    check_state(dist, x, mechanism)?;
    if mechanism == Mechanism::Uniform || marginal_unchecked(dist, sigma, x, mechanism) > 0.0 {
        return posterior_at_level(dist, sigma, x, mechanism);
    }
    let mismatches = |z: &TokenSeq| {
        z.iter()
            .zip(x.iter())
            .filter(|(&a, &b)| b != MASK && a != b)
            .count()
    };
    let best = dist
        .support()
        .iter()
        .map(mismatches)
        .min()
        .expect("nonempty support");
    let mut positions = vec![vec![0.0; dist.vocab()]; x.len()];
    let mut total = 0.0;
    for (z, p) in dist.iter().filter(|(z, _)| mismatches(z) == best) {
        total += p;
        for (h, &v) in z.iter().enumerate() {
            positions[h][v as usize - 1] += p;
        }
    }
    for row in &mut positions {
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(PosteriorTable { positions })
}

pub fn posterior_exact(
    dist: &ExplicitDistribution,
    schedule: &NoiseSchedule,
    t: usize,
    x: &TokenSeq,
    mechanism: Mechanism,
) -> Result<PosteriorTable> {
    schedule.check_step(t)?;
    posterior_at_level(dist, schedule.sigma(t), x, mechanism)
}

/// Bayes kernel given the clean token: `q(x_{t-1}^h = a | x_t^h, x_0^h = v)`.
fn conditional_reverse(
    mechanism: Mechanism,
    schedule: &NoiseSchedule,
    t: usize,
    xh: Token,
    v: Token,
    k: usize,
) -> Vec<f64> {
    let (sp, beta, s) = (schedule.sigma(t - 1), schedule.beta(t), schedule.sigma(t));
    let denom = token_transition(mechanism, s, v, xh, k);
    let mut out = vec![0.0; k + 1];
    if denom <= 0.0 {
        return out;
    }
    for a in alphabet(k, mechanism) {
        out[a as usize] = token_transition(mechanism, sp, v, a, k)
            * token_transition(mechanism, beta, a, xh, k)
            / denom;
    }
    out
}

fn point_mass(k: usize, token: Token) -> Vec<f64> {
    let mut out = vec![0.0; k + 1];
    out[token as usize] = 1.0;
    out
}

/// Reverse vector at one position from a clean-token posterior.
pub fn kernel_from_posterior_at(
    post: &[f64],
    xh: Token,
    t: usize,
    schedule: &NoiseSchedule,
    mechanism: Mechanism,
    param: Parameterization,
) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    let k = post.len();
    if param == Parameterization::Subs && mechanism != Mechanism::Absorbing {
        return invalid("the SUBS parameterization requires absorbing corruption");
    }
    if mechanism == Mechanism::Absorbing && xh != MASK {
        return Ok(point_mass(k, xh));
    }
    let (sp, s) = (schedule.sigma(t - 1), schedule.sigma(t));
    Ok(match param {
        Parameterization::Bayes => {
            let mut out = vec![0.0; k + 1];
            for (i, &w) in post.iter().enumerate() {
                if w > 0.0 {
                    let r = conditional_reverse(mechanism, schedule, t, xh, i as Token + 1, k);
                    out.iter_mut().zip(r).for_each(|(o, r)| *o += w * r);
                }
            }
            out
        }
        Parameterization::D3pm => {
            let beta = schedule.beta(t);
            let mut out = vec![0.0; k + 1];
            let total: f64 = post.iter().sum();
            for a in alphabet(k, mechanism) {
                // post pushed through `sigma_{t-1}` of corruption, evaluated at `a`
                let pushed = match (mechanism, a) {
                    (Mechanism::Absorbing, MASK) => sp * total,
                    (Mechanism::Absorbing, _) => (1.0 - sp) * post[a as usize - 1],
                    (Mechanism::Uniform, _) => {
                        (1.0 - sp) * post[a as usize - 1] + sp / k as f64 * total
                    }
                };
                out[a as usize] = pushed * token_transition(mechanism, beta, a, xh, k);
            }
            let z: f64 = out.iter().sum();
            if !(z > 0.0) {
                return invalid("D3PM kernel has zero normalizer");
            }
            out.iter_mut().for_each(|v| *v /= z);
            out
        }
        Parameterization::Subs => {
            let mut out = vec![0.0; k + 1];
            out[MASK as usize] = sp / s;
            for (i, &w) in post.iter().enumerate() {
                out[i + 1] = (s - sp) / s * w;
            }
            out
        }
    })
}

/// Reverse vectors at every position of `x`.
pub fn kernel_from_posterior(
    posterior: &PosteriorTable,
    x: &TokenSeq,
    t: usize,
    schedule: &NoiseSchedule,
    mechanism: Mechanism,
    param: Parameterization,
) -> Result<Vec<Vec<f64>>> {
    if posterior.positions.len() != x.len() {
        return invalid("posterior table and state lengths differ");
    }
    posterior
        .positions
        .iter()
        .zip(x.iter())
        .map(|(p, &xh)| kernel_from_posterior_at(p, xh, t, schedule, mechanism, param))
        .collect()
}

/// Unmasking scores `((1 - sigma) / sigma) * posterior`.
pub fn induced_score(posterior: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return invalid(format!("induced score needs sigma in (0, 1), got {sigma}"));
    }
    let c = (1.0 - sigma) / sigma;
    Ok(posterior.iter().map(|p| c * p).collect())
}

/// Exact data posterior as a [`Denoiser`].
#[derive(Clone, Debug)]
pub struct ExactDenoiser<'a> {
    pub dist: &'a ExplicitDistribution,
    pub mechanism: Mechanism,
}

impl Denoiser for ExactDenoiser<'_> {
    fn vocab(&self) -> usize {
        self.dist.vocab()
    }

    fn clean_posterior(&self, x: &TokenSeq, h: usize, sigma: f64) -> Result<Vec<f64>> {
        check_position(x, h)?;
        Ok(posterior_at_level(self.dist, sigma, x, self.mechanism)?
            .positions
            .swap_remove(h))
    }
}

/// Predicts the uniform law over clean tokens at every position.
#[derive(Clone, Copy, Debug)]
pub struct UniformDenoiser {
    pub k: usize,
}

impl Denoiser for UniformDenoiser {
    fn vocab(&self) -> usize {
        self.k
    }

    fn clean_posterior(&self, _x: &TokenSeq, _h: usize, _sigma: f64) -> Result<Vec<f64>> {
        Ok(vec![1.0 / self.k as f64; self.k])
    }
}

/// Exact reverse kernel computed through the exact posterior; this is the
/// fast route used by samplers. Unreachable absorbing states fall back to
/// [`posterior_or_nearest`].
#[derive(Clone, Debug)]
pub struct ExactKernel<'a> {
    pub dist: &'a ExplicitDistribution,
    pub mechanism: Mechanism,
}

impl ReverseKernel for ExactKernel<'_> {
    fn vocab(&self) -> usize {
        self.dist.vocab()
    }

    fn mechanism(&self) -> Mechanism {
        self.mechanism
    }

    fn kernel(
        &self,
        x: &TokenSeq,
        h: usize,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<Vec<f64>> {
        schedule.check_step(t)?;
        check_position(x, h)?;
        let post = posterior_or_nearest(self.dist, schedule.sigma(t), x, self.mechanism)?;
        kernel_from_posterior_at(
            post.position(h),
            x[h],
            t,
            schedule,
            self.mechanism,
            Parameterization::Bayes,
        )
    }

    fn kernels(&self, x: &TokenSeq, t: usize, schedule: &NoiseSchedule) -> Result<Vec<Vec<f64>>> {
        schedule.check_step(t)?;
        let post = posterior_or_nearest(self.dist, schedule.sigma(t), x, self.mechanism)?;
        kernel_from_posterior(
            &post,
            x,
            t,
            schedule,
            self.mechanism,
            Parameterization::Bayes,
        )
    }
}

/// Reverse kernel of a learned denoiser.
#[derive(Clone, Debug)]
pub struct ModelKernel<D> {
    pub denoiser: D,
    pub mechanism: Mechanism,
    pub param: Parameterization,
}

impl<D: Denoiser> ModelKernel<D> {
    pub fn new(denoiser: D, mechanism: Mechanism) -> Self {
        ModelKernel {
            denoiser,
            mechanism,
            param: Parameterization::default_for(mechanism),
        }
    }
}

impl<D: Denoiser> ReverseKernel for ModelKernel<D> {
    fn vocab(&self) -> usize {
        self.denoiser.vocab()
    }

    fn mechanism(&self) -> Mechanism {
        self.mechanism
    }

    fn kernel(
        &self,
        x: &TokenSeq,
        h: usize,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<Vec<f64>> {
        schedule.check_step(t)?;
        check_position(x, h)?;
        if self.mechanism == Mechanism::Absorbing && x[h] != MASK {
            return Ok(point_mass(self.vocab(), x[h]));
        }
        let post = self.denoiser.clean_posterior(x, h, schedule.sigma(t))?;
        kernel_from_posterior_at(&post, x[h], t, schedule, self.mechanism, self.param)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizerKind {
    PerBetaOverK,
    PerBeta,
}

impl From<Mechanism> for NormalizerKind {
    fn from(m: Mechanism) -> Self {
        match m {
            Mechanism::Uniform => NormalizerKind::PerBetaOverK,
            Mechanism::Absorbing => NormalizerKind::PerBeta,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub h: usize,
    pub y: Token,
    pub score: f64,
    pub delta_d: Option<i8>,
}

/// Normalized scores of all admissible single-token edits of one state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub state: TokenSeq,
    pub sigma: f64,
    pub t: usize,
    pub normalizer_kind: NormalizerKind,
    pub entries: Vec<ScoreEntry>,
}

/// Admissible edits: any clean replacement under uniform corruption, any
/// unmasking under absorbing corruption.
pub fn candidate_edits(x: &TokenSeq, k: usize, mechanism: Mechanism) -> Vec<(usize, Token)> {
    let mut out = Vec::new();
    for (h, &xh) in x.iter().enumerate() {
        if mechanism == Mechanism::Absorbing && xh != MASK {
            continue;
        }
        for y in 1..=k as Token {
            if y != xh {
                out.push((h, y));
            }
        }
    }
    out
}

impl ScoreTable {
    /// Scores every candidate edit of `x` under `kernel`, classifying edits
    /// against `oracle` when given.
    pub fn build(
        kernel: &(impl ReverseKernel + ?Sized),
        x: &TokenSeq,
        t: usize,
        schedule: &NoiseSchedule,
        oracle: Option<&dyn SupportOracle>,
    ) -> Result<ScoreTable> {
        let (k, mechanism) = (kernel.vocab(), kernel.mechanism());
        let rate = mechanism.proposal_rate(schedule.beta(t), k);
        let mut entries = Vec::new();
        let mut cached: Option<(usize, Vec<f64>)> = None;
        let base = oracle.map(|o| o.distance(x)).transpose()?;
        for (h, y) in candidate_edits(x, k, mechanism) {
            if cached.as_ref().map_or(true, |(ch, _)| *ch != h) {
                cached = Some((h, kernel.kernel(x, h, t, schedule)?));
            }
            let row = &cached.as_ref().expect("kernel cached").1;
            let delta_d = match (oracle, base) {
                (Some(o), Some(b)) => {
                    Some((o.distance(&x.with_edit(h, y))? as i64 - b as i64) as i8)
                }
                _ => None,
            };
            entries.push(ScoreEntry {
                h,
                y,
                score: row[y as usize] / rate,
                delta_d,
            });
        }
        Ok(ScoreTable {
            state: x.clone(),
            sigma: schedule.sigma(t),
            t,
            normalizer_kind: mechanism.into(),
            entries,
        })
    }

    /// CSV with header `h,y,score,delta_d`; positions are 0-based.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("h,y,score,delta_d\n");
        for e in &self.entries {
            let d = e.delta_d.map(|d| d.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{:e},{}", e.h, e.y, e.score, d);
        }
        out
    }
}

/// A loss value that may be infinite because the model gave zero mass to a
/// realized target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub infinite: bool,
}

impl LossValue {
    fn from_sum(value: f64) -> Self {
        LossValue {
            value,
            infinite: value.is_infinite(),
        }
    }
}

/// `(sigma_t - sigma_{t-1}) / sigma_t`.
pub fn masked_ce_weight(schedule: &NoiseSchedule, t: usize) -> f64 {
    (schedule.sigma(t) - schedule.sigma(t - 1)) / schedule.sigma(t)
}

fn neg_log(p: f64) -> f64 {
    if p > 0.0 {
        -p.ln()
    } else {
        f64::INFINITY
    }
}

/// Weighted masked cross-entropy averaged over `(x_0, x_t, t)` triples.
pub fn weighted_masked_ce(
    model: &(impl Denoiser + ?Sized),
    batch: &[(TokenSeq, TokenSeq, usize)],
    schedule: &NoiseSchedule,
) -> Result<LossValue> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let mut total = 0.0;
    for (x0, xt, t) in batch {
        schedule.check_step(*t)?;
        if x0.len() != xt.len() {
            return invalid("clean and corrupted lengths differ");
        }
        let w = masked_ce_weight(schedule, *t);
        for h in (0..xt.len()).filter(|&h| xt[h] == MASK) {
            let post = model.clean_posterior(xt, h, schedule.sigma(*t))?;
            total += w * neg_log(post[x0[h] as usize - 1]);
        }
    }
    Ok(LossValue::from_sum(total / batch.len() as f64))
}

/// Every absorbing corruption of `x0` with its probability at level `sigma`.
fn mask_patterns(x0: &TokenSeq, sigma: f64) -> Vec<(TokenSeq, f64)> {
    let n = x0.len();
    (0u64..1 << n)
        .map(|bits| {
            let mut x = x0.clone();
            let mut p = 1.0;
            for h in 0..n {
                if bits >> h & 1 == 1 {
                    x.set(h, MASK);
                    p *= sigma;
                } else {
                    p *= 1.0 - sigma;
                }
            }
            (x, p)
        })
        .collect()
}

/// Exact expectation of the weighted masked cross-entropy summed over
/// `steps`, enumerating data and mask patterns.
pub fn weighted_masked_ce_exact(
    model: &(impl Denoiser + ?Sized),
    dist: &ExplicitDistribution,
    schedule: &NoiseSchedule,
    steps: &[usize],
) -> Result<LossValue> {
    let mut total = 0.0;
    for &t in steps {
        schedule.check_step(t)?;
        let (w, sigma) = (masked_ce_weight(schedule, t), schedule.sigma(t));
        for (x0, p0) in dist.iter() {
            for (xt, p) in mask_patterns(x0, sigma) {
                for h in (0..xt.len()).filter(|&h| xt[h] == MASK) {
                    let post = model.clean_posterior(&xt, h, sigma)?;
                    total += p0 * p * w * neg_log(post[x0[h] as usize - 1]);
                }
            }
        }
    }
    Ok(LossValue::from_sum(total))
}

/// Exact denoising score-entropy loss of the induced score, summed over
/// `steps`, with discrete forward rate `(sigma_t - sigma_{t-1}) / (1 - sigma_t)`.
pub fn score_entropy_exact(
    model: &(impl Denoiser + ?Sized),
    dist: &ExplicitDistribution,
    schedule: &NoiseSchedule,
    steps: &[usize],
) -> Result<LossValue> {
    let phi = |a: f64| if a > 0.0 { a * a.ln() - a } else { 0.0 };
    let mut total = 0.0;
    for &t in steps {
        schedule.check_step(t)?;
        let sigma = schedule.sigma(t);
        if sigma >= 1.0 {
            return invalid(format!("score entropy undefined at sigma_t = 1 (t = {t})"));
        }
        let rate = (sigma - schedule.sigma(t - 1)) / (1.0 - sigma);
        let c = (1.0 - sigma) / sigma;
        for (x0, p0) in dist.iter() {
            for (xt, p) in mask_patterns(x0, sigma) {
                for h in (0..xt.len()).filter(|&h| xt[h] == MASK) {
                    let s_model = induced_score(&model.clean_posterior(&xt, h, sigma)?, sigma)?;
                    let mut term = 0.0;
                    for (i, &s) in s_model.iter().enumerate() {
                        let target = if i + 1 == x0[h] as usize { c } else { 0.0 };
                        let cross = if target > 0.0 { target * s.ln() } else { 0.0 };
                        term += s - cross + phi(target);
                    }
                    total += p0 * p * rate * term;
                }
            }
        }
    }
    Ok(LossValue::from_sum(total))
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| {
            if b > 0.0 {
                a * (a / b).ln()
            } else {
                f64::INFINITY
            }
        })
        .sum()
}

/// Denoising term `L_t`: expected KL from the clean-conditioned reverse
/// kernel to `model`, summed over positions.
pub fn denoising_kl_term(
    model: &(impl ReverseKernel + ?Sized),
    dist: &ExplicitDistribution,
    schedule: &NoiseSchedule,
    t: usize,
    mechanism: Mechanism,
) -> Result<LossValue> {
    schedule.check_step(t)?;
    let k = dist.vocab();
    check_enumeration(k, dist.len(), mechanism)?;
    let sigma = schedule.sigma(t);
    let mut total = 0.0;
    for xt in all_states(k, dist.len(), mechanism) {
        let q_t = marginal_unchecked(dist, sigma, &xt, mechanism);
        if q_t <= 0.0 {
            continue;
        }
        let rows: Vec<Vec<f64>> = (0..xt.len())
            .map(|h| model.kernel(&xt, h, t, schedule))
            .collect::<Result<_>>()?;
        for (x0, p0) in dist.iter() {
            let w = p0 * forward_marginal(mechanism, sigma, x0, &xt, k);
            if w <= 0.0 {
                continue;
            }
            for (h, row) in rows.iter().enumerate() {
                let target = conditional_reverse(mechanism, schedule, t, xt[h], x0[h], k);
                total += w * kl(&target, row);
            }
        }
    }
    Ok(LossValue::from_sum(total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_schedule, ScheduleKind};
    use approx::assert_abs_diff_eq;

    fn single() -> ExplicitDistribution {
        ExplicitDistribution::new(2, 1, vec![TokenSeq::new(vec![1])], vec![1.0]).unwrap()
    }

    fn pair() -> ExplicitDistribution {
        ExplicitDistribution::new(
            2,
            2,
            vec![TokenSeq::new(vec![1, 1]), TokenSeq::new(vec![2, 2])],
            vec![0.75, 0.25],
        )
        .unwrap()
    }

    fn seq(v: &[Token]) -> TokenSeq {
        TokenSeq::from(v)
    }

    #[test]
    fn single_token_closed_form() {
        let s = make_schedule(ScheduleKind::LinearCumulative, 400).unwrap();
        let t = s.time_index_for_sigma(0.1).unwrap();
        let k = reverse_token_kernel_exact(&single(), &s, t, &seq(&[2]), 0, Mechanism::Uniform)
            .unwrap();
        let expect = (1.0 - s.sigma(t - 1) / 2.0) * (s.beta(t) / 2.0) / (s.sigma(t) / 2.0);
        assert_abs_diff_eq!(k[1], expect, epsilon = 1e-14);
        assert_abs_diff_eq!(k.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let score =
            normalized_score(&single(), &s, t, &seq(&[2]), 0, 1, Mechanism::Uniform).unwrap();
        assert!((score * s.sigma(t) / 2.0 - 1.0).abs() < 0.06, "{score}");
    }

    #[test]
    fn absorbing_single_token() {
        let s = make_schedule(ScheduleKind::LinearCumulative, 50).unwrap();
        for t in 1..=50 {
            let k = reverse_token_kernel_exact(
                &single(),
                &s,
                t,
                &seq(&[MASK]),
                0,
                Mechanism::Absorbing,
            )
            .unwrap();
            assert_eq!(k[2], 0.0);
            assert_abs_diff_eq!(k[1], 1.0 - k[0], epsilon = 1e-12);
        }
    }

    #[test]
    fn routes_agree() {
        let d = pair();
        let s = make_schedule(ScheduleKind::Cosine, 12).unwrap();
        for mech in [Mechanism::Uniform, Mechanism::Absorbing] {
            let kernel = ExactKernel {
                dist: &d,
                mechanism: mech,
            };
            for x in all_states(2, 2, mech) {
                for t in 1..=12 {
                    if marginal_unchecked(&d, s.sigma(t), &x, mech) == 0.0 {
                        assert!(reverse_token_kernel_exact(&d, &s, t, &x, 0, mech).is_err());
                        continue;
                    }
                    for h in 0..2 {
                        let a = reverse_token_kernel_exact(&d, &s, t, &x, h, mech).unwrap();
                        let b = reverse_token_kernel_naive(&d, &s, t, &x, h, mech).unwrap();
                        let c = kernel.kernel(&x, h, t, &s).unwrap();
                        for i in 0..3 {
                            assert_abs_diff_eq!(a[i], b[i], epsilon = 1e-10);
                            assert_abs_diff_eq!(a[i], c[i], epsilon = 1e-10);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn concrete_score_examples() {
        let s = NoiseSchedule::from_betas(vec![0.2]).unwrap();
        let c = concrete_score(&single(), &s, 1, &seq(&[2]), 0, 1, Mechanism::Uniform).unwrap();
        assert_abs_diff_eq!(c, 9.0, epsilon = 1e-12);
        let c = concrete_score(&single(), &s, 1, &seq(&[2]), 0, 2, Mechanism::Uniform).unwrap();
        assert_eq!(c, 1.0);
    }

    #[test]
    fn posterior_examples() {
        let d = pair();
        let p = posterior_at_level(&d, 0.3, &seq(&[MASK, 1]), Mechanism::Absorbing).unwrap();
        assert_eq!(p.position(0), &[1.0, 0.0]);
        let p = posterior_at_level(&d, 0.3, &seq(&[2, 2]), Mechanism::Absorbing).unwrap();
        assert_eq!(p.positions, vec![vec![0.0, 1.0], vec![0.0, 1.0]]);
        let p = posterior_at_level(&d, 0.999, &seq(&[1, 2]), Mechanism::Uniform).unwrap();
        assert_abs_diff_eq!(p.position(0)[0], 0.75, epsilon = 2e-3);
        assert!(posterior_at_level(&d, 0.3, &seq(&[1, 2]), Mechanism::Absorbing).is_err());
    }

    #[test]
    fn subs_stay_mass() {
        let s2 = NoiseSchedule::from_betas(vec![0.25, 1.0 / 3.0]).unwrap();
        assert_abs_diff_eq!(s2.sigma(1), 0.5 * s2.sigma(2), epsilon = 1e-15);
        let k = kernel_from_posterior_at(
            &[0.3, 0.7],
            MASK,
            2,
            &s2,
            Mechanism::Absorbing,
            Parameterization::Subs,
        )
        .unwrap();
        assert_abs_diff_eq!(k[0], 0.5, epsilon = 1e-15);
        assert!(kernel_from_posterior_at(
            &[0.3, 0.7],
            1,
            2,
            &s2,
            Mechanism::Uniform,
            Parameterization::Subs
        )
        .is_err());
    }

    #[test]
    fn induced_score_normalization() {
        assert_eq!(induced_score(&[0.25, 0.75], 0.5).unwrap(), vec![0.25, 0.75]);
        let v = induced_score(&[0.1, 0.2, 0.7], 0.2).unwrap();
        assert_abs_diff_eq!(v.iter().sum::<f64>(), 4.0, epsilon = 1e-12);
        assert!(induced_score(&[1.0], 1.0).is_err());
    }

    #[test]
    fn ce_examples() {
        let s = make_schedule(ScheduleKind::LinearCumulative, 4).unwrap();
        let det = ExplicitDistribution::new(3, 2, vec![seq(&[1, 2])], vec![1.0]).unwrap();
        let oracle = ExactDenoiser {
            dist: &det,
            mechanism: Mechanism::Absorbing,
        };
        let batch = vec![
            (seq(&[1, 2]), seq(&[MASK, 2]), 2),
            (seq(&[1, 2]), seq(&[MASK, MASK]), 3),
        ];
        assert_eq!(weighted_masked_ce(&oracle, &batch, &s).unwrap().value, 0.0);
        let uni = UniformDenoiser { k: 3 };
        let one = vec![(seq(&[1, 2]), seq(&[MASK, 2]), 2)];
        let w = masked_ce_weight(&s, 2);
        assert_abs_diff_eq!(
            weighted_masked_ce(&uni, &one, &s).unwrap().value,
            w * 3f64.ln(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn kl_term_zero_for_deterministic_data() {
        let det = ExplicitDistribution::new(2, 2, vec![seq(&[1, 2])], vec![1.0]).unwrap();
        let s = make_schedule(ScheduleKind::LinearCumulative, 5).unwrap();
        for mech in [Mechanism::Uniform, Mechanism::Absorbing] {
            let exact = ExactKernel {
                dist: &det,
                mechanism: mech,
            };
            for t in 1..=5 {
                let l = denoising_kl_term(&exact, &det, &s, t, mech).unwrap();
                assert!(l.value.abs() < 1e-12, "{mech} t={t}: {}", l.value);
            }
        }
    }

    #[test]
    fn score_table_csv() {
        let d = pair();
        let s = make_schedule(ScheduleKind::LinearCumulative, 10).unwrap();
        let kernel = ExactKernel {
            dist: &d,
            mechanism: Mechanism::Uniform,
        };
        let table = ScoreTable::build(&kernel, &seq(&[1, 2]), 3, &s, Some(&d)).unwrap();
        assert_eq!(table.entries.len(), 2);
        assert_eq!(table.normalizer_kind, NormalizerKind::PerBetaOverK);
        let csv = table.to_csv();
        assert!(csv.starts_with("h,y,score,delta_d\n"));
        assert_eq!(csv.lines().count(), 3);
        assert!(table.entries.iter().all(|e| e.delta_d == Some(-1)));
    }
}
