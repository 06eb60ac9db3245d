//! Ancestral sampling and the two-phase projection samplers.
//!
//! The projection samplers run ancestral steps down to the step `t*` whose
//! noise level is closest to `phase2_sigma`, then apply single-token edits
//! at that fixed step while the edit's scaled score `sigma * k(y) / beta`
//! exceeds the threshold. Under uniform corruption this is `(sigma/K)` times
//! the normalized score; under absorbing corruption it is `sigma` times it.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Mechanism, Token, TokenSeq, MASK};
use crate::error::{invalid, LabError, Result};
use crate::reverse::{candidate_edits, ReverseKernel};
use crate::schedule::NoiseSchedule;
use crate::seed::{stream_rng, Stream};
use crate::support::SupportOracle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Ancestral,
    Threshold,
    Hardmax,
}

impl SamplerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerMode::Ancestral => "ancestral",
            SamplerMode::Threshold => "threshold",
            SamplerMode::Hardmax => "hardmax",
        }
    }
}

impl FromStr for SamplerMode {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ancestral" => Ok(SamplerMode::Ancestral),
            "threshold" => Ok(SamplerMode::Threshold),
            "hardmax" | "hard_max" => Ok(SamplerMode::Hardmax),
            other => invalid(format!("unknown sampler mode `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub phase2_sigma: f64,
    pub tau: f64,
    /// Defaults to `H * K` when unset.
    pub max_phase2_steps: Option<usize>,
}

impl SamplerConfig {
    pub fn new(mode: SamplerMode) -> Self {
        SamplerConfig {
            mode,
            phase2_sigma: 0.1,
            tau: 0.05,
            max_phase2_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(LabError::Config {
                field: field.into(),
                message: message.into(),
            })
        };
        if !(self.tau > 0.0) {
            return bad("tau", "must be positive");
        }
        if !(self.phase2_sigma > 0.0 && self.phase2_sigma < 1.0) {
            return bad("phase2_sigma", "must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample: TokenSeq,
    /// State when phase 2 began; equal to `sample` for ancestral runs.
    pub phase1: TokenSeq,
    pub edits: Vec<(usize, Token)>,
    /// Masks left after the reverse steps and filled by argmax.
    pub filled: usize,
    pub truncated: bool,
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<Token> {
    let total: f64 = probs.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(LabError::InvalidState("reverse kernel has no mass".into()));
    }
    let mut u = rng.gen::<f64>() * total;
    let mut last = None;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            if u < p {
                return Ok(i as Token);
            }
            u -= p;
            last = Some(i as Token);
        }
    }
    Ok(last.expect("positive total"))
}

fn initial_state<R: Rng + ?Sized>(
    mechanism: Mechanism,
    k: usize,
    h: usize,
    rng: &mut R,
) -> TokenSeq {
    match mechanism {
        Mechanism::Uniform => {
            TokenSeq::new((0..h).map(|_| rng.gen_range(1..=k as Token)).collect())
        }
        Mechanism::Absorbing => TokenSeq::masked(h),
    }
}

/// Reverse steps `from, from-1, ..., to+1` applied to `x`.
fn reverse_steps<K: ReverseKernel + ?Sized, R: Rng + ?Sized>(
    kernel: &K,
    schedule: &NoiseSchedule,
    mut x: TokenSeq,
    from: usize,
    to: usize,
    rng: &mut R,
) -> Result<TokenSeq> {
    for t in (to + 1..=from).rev() {
        let ks = kernel.kernels(&x, t, schedule)?;
        let next: Vec<Token> = ks.iter().map(|k| draw(k, rng)).collect::<Result<_>>()?;
        x = TokenSeq::new(next);
    }
    Ok(x)
}

/// Replaces every remaining mask by the most likely clean token of the
/// last reverse step, ties to the smaller id.
fn fill_masks<K: ReverseKernel + ?Sized>(
    kernel: &K,
    schedule: &NoiseSchedule,
    x: &TokenSeq,
) -> Result<(TokenSeq, usize)> {
    let masked: Vec<usize> = (0..x.len()).filter(|&h| x[h] == MASK).collect();
    let mut out = x.clone();
    for &h in &masked {
        let k = kernel.kernel(x, h, 1, schedule)?;
        let mut best = 1;
        for y in 2..k.len() {
            if k[y] > k[best] {
                best = y;
            }
        }
        out.set(h, best as Token);
    }
    Ok((out, masked.len()))
}

/// Scaled scores `sigma_t k(x, h)[y] / beta_t` of all admissible edits.
pub fn scaled_scores<K: ReverseKernel + ?Sized>(
    kernel: &K,
    schedule: &NoiseSchedule,
    t: usize,
    x: &TokenSeq,
) -> Result<Vec<((usize, Token), f64)>> {
    let ks = kernel.kernels(x, t, schedule)?;
    let c = schedule.sigma(t) / schedule.beta(t);
    Ok(candidate_edits(x, kernel.vocab(), kernel.mechanism())
        .into_iter()
        .map(|(h, y)| ((h, y), c * ks[h][y as usize]))
        .collect())
}

/// Step at which phase 2 runs.
pub fn phase2_step(schedule: &NoiseSchedule, sigma: f64) -> Result<usize> {
    Ok(schedule.time_index_for_sigma(sigma)?.max(1))
}

/// Draws one sample in the configured mode.
pub fn sample_one<K: ReverseKernel + ?Sized, R: Rng + ?Sized>(
    kernel: &K,
    schedule: &NoiseSchedule,
    h: usize,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleOutcome> {
    config.validate()?;
    let (k, mech) = (kernel.vocab(), kernel.mechanism());
    let x_t = initial_state(mech, k, h, rng);
    let t_star = match config.mode {
        SamplerMode::Ancestral => 0,
        _ => phase2_step(schedule, config.phase2_sigma)?,
    };
    let phase1 = reverse_steps(kernel, schedule, x_t, schedule.steps(), t_star, rng)?;
    let mut x = phase1.clone();
    let mut edits = Vec::new();
    let mut truncated = false;
    if config.mode != SamplerMode::Ancestral {
        let limit = config.max_phase2_steps.unwrap_or(h * k);
        loop {
            let above: Vec<((usize, Token), f64)> = scaled_scores(kernel, schedule, t_star, &x)?
                .into_iter()
                .filter(|&(_, s)| s > config.tau)
                .collect();
            let pick = match config.mode {
                SamplerMode::Threshold => above.choose(rng).map(|e| e.0),
                // candidate edits come in (h, y) order, so the first maximum wins ties
                _ => above
                    .iter()
                    .fold(None, |best: Option<((usize, Token), f64)>, &e| match best {
                        Some(b) if b.1 >= e.1 => Some(b),
                        _ => Some(e),
                    })
                    .map(|e| e.0),
            };
            let Some((ph, py)) = pick else { break };
            if edits.len() == limit {
                truncated = true;
                break;
            }
            x.set(ph, py);
            edits.push((ph, py));
        }
    }
    let (sample, filled) = if mech == Mechanism::Absorbing {
        fill_masks(kernel, schedule, &x)?
    } else {
        (x, 0)
    };
    Ok(SampleOutcome {
        sample,
        phase1,
        edits,
        filled,
        truncated,
    })
}

pub fn ancestral_sample<K: ReverseKernel + ?Sized, R: Rng + ?Sized>(
    kernel: &K,
    schedule: &NoiseSchedule,
    h: usize,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleOutcome> {
    if config.mode != SamplerMode::Ancestral {
        return invalid("ancestral_sample needs mode = ancestral");
    }
    sample_one(kernel, schedule, h, config, rng)
}

pub fn threshold_sample<K: ReverseKernel + ?Sized, R: Rng + ?Sized>(
    kernel: &K,
    schedule: &NoiseSchedule,
    h: usize,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleOutcome> {
    if config.mode != SamplerMode::Threshold {
        return invalid("threshold_sample needs mode = threshold");
    }
    sample_one(kernel, schedule, h, config, rng)
}

pub fn hardmax_sample<K: ReverseKernel + ?Sized, R: Rng + ?Sized>(
    kernel: &K,
    schedule: &NoiseSchedule,
    h: usize,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleOutcome> {
    if config.mode != SamplerMode::Hardmax {
        return invalid("hardmax_sample needs mode = hardmax");
    }
    sample_one(kernel, schedule, h, config, rng)
}

/// `n` independent chains; chain `i` uses substream `i` of the sample
/// stream, so two modes run with one seed are paired chain by chain.
pub fn sample_many<K: ReverseKernel + Sync + ?Sized>(
    kernel: &K,
    schedule: &NoiseSchedule,
    h: usize,
    config: &SamplerConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<SampleOutcome>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            sample_one(
                kernel,
                schedule,
                h,
                config,
                &mut stream_rng(seed, Stream::Sample, i as u64),
            )
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub n: usize,
    pub frac_in_support: f64,
    pub mean_distance: f64,
    pub truncated: usize,
}

pub fn evaluate_samples(
    samples: &[SampleOutcome],
    oracle: &(impl SupportOracle + ?Sized),
) -> Result<SampleSummary> {
    if samples.is_empty() {
        return invalid("no samples to evaluate");
    }
    let d = distances(samples, oracle)?;
    let n = samples.len();
    Ok(SampleSummary {
        n,
        frac_in_support: d.iter().filter(|&&d| d == 0).count() as f64 / n as f64,
        mean_distance: d.iter().sum::<usize>() as f64 / n as f64,
        truncated: samples.iter().filter(|s| s.truncated).count(),
    })
}

fn distances(
    samples: &[SampleOutcome],
    oracle: &(impl SupportOracle + ?Sized),
) -> Result<Vec<usize>> {
    samples.iter().map(|s| oracle.distance(&s.sample)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub win: f64,
    pub draw: f64,
    pub loss: f64,
}

/// Paired comparison by distance to the support; `a` wins when closer.
pub fn compare_samplers(
    a: &[SampleOutcome],
    b: &[SampleOutcome],
    oracle: &(impl SupportOracle + ?Sized),
) -> Result<Comparison> {
    if a.len() != b.len() {
        return invalid(format!(
            "paired comparison of {} and {} samples",
            a.len(),
            b.len()
        ));
    }
    if a.is_empty() {
        return invalid("no samples to compare");
    }
    let (da, db) = (distances(a, oracle)?, distances(b, oracle)?);
    let n = a.len() as f64;
    let count = |f: &dyn Fn(usize, usize) -> bool| {
        da.iter().zip(&db).filter(|(x, y)| f(**x, **y)).count() as f64 / n
    };
    Ok(Comparison {
        win: count(&|x, y| x < y),
        draw: count(&|x, y| x == y),
        loss: count(&|x, y| x > y),
    })
}

/// One row per sample: `sequence,in_support,distance`.
pub fn samples_to_csv(
    samples: &[SampleOutcome],
    oracle: &(impl SupportOracle + ?Sized),
) -> Result<String> {
    let mut out = String::from("sequence,in_support,distance\n");
    for s in samples {
        let d = oracle.distance(&s.sample)?;
        let _ = writeln!(out, "{},{},{}", s.sample, d == 0, d);
    }
    Ok(out)
}
