//! The oscillating random-walk language over `[K]^H`.
//!
//! A string starts at a uniform token and moves down, stays or moves up by
//! one at each step, with step probabilities that oscillate in the current
//! token. Moves past `1` or `K` are clamped, which merges their mass into
//! the stay move.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{ExplicitDistribution, Token, TokenSeq, MASK};
use crate::error::{invalid, LabError, Result};
use crate::seed::{stream_rng, Stream};
use crate::support::{ProjectionResult, SupportOracle};

/// Default cap on `K * 3^(H-1)` for support enumeration.
pub const ENUMERATION_LIMIT: u64 = 1_000_000;

/// Walk weight constants, indexed `[up, stay, down]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkParams {
    pub amplitudes: [f64; 3],
    pub frequencies: [f64; 3],
    pub phases: [f64; 3],
    pub exponent_scale: f64,
}

impl Default for WalkParams {
    fn default() -> Self {
        WalkParams {
            amplitudes: [0.45, 0.2, 0.35],
            frequencies: [0.61, 0.37, 0.53],
            phases: [1.37, 0.11, -0.29],
            exponent_scale: 1.0,
        }
    }
}

/// Clamped step probabilities out of one token.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepProbs {
    pub down: f64,
    pub stay: f64,
    pub up: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLanguage", into = "RawLanguage")]
pub struct LanguageSpec {
    k: usize,
    h: usize,
    params: WalkParams,
    steps: Vec<StepProbs>,
}

#[derive(Serialize, Deserialize)]
struct RawLanguage {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(default)]
    params: WalkParams,
}

impl TryFrom<RawLanguage> for LanguageSpec {
    type Error = LabError;

    fn try_from(raw: RawLanguage) -> Result<Self> {
        LanguageSpec::with_params(raw.k, raw.h, raw.params)
    }
}

impl From<LanguageSpec> for RawLanguage {
    fn from(l: LanguageSpec) -> Self {
        RawLanguage {
            k: l.k,
            h: l.h,
            params: l.params,
        }
    }
}

impl LanguageSpec {
    pub fn new(k: usize, h: usize) -> Result<Self> {
        Self::with_params(k, h, WalkParams::default())
    }

    pub fn with_params(k: usize, h: usize, params: WalkParams) -> Result<Self> {
        if k < 2 || h < 2 {
            return invalid("walk language needs K >= 2 and H >= 2");
        }
        if k >= Token::MAX as usize {
            return invalid("vocabulary too large for the token type");
        }
        if params
            .amplitudes
            .iter()
            .any(|&a| !(a > 0.0 && a.is_finite()))
            || !params.exponent_scale.is_finite()
        {
            return invalid("walk amplitudes must be positive and finite");
        }
        let steps = (1..=k).map(|v| clamped_steps(&params, v, k)).collect();
        Ok(LanguageSpec {
            k,
            h,
            params,
            steps,
        })
    }

    pub fn vocab(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.h
    }

    pub fn params(&self) -> &WalkParams {
        &self.params
    }

    /// Clamped `(down, stay, up)` probabilities out of token `v`.
    pub fn transition_probs(&self, v: Token) -> Result<StepProbs> {
        self.check_token(v)?;
        Ok(self.steps[v as usize - 1])
    }

    /// `P(w | v)` under the clamped walk.
    pub fn transition(&self, v: Token, w: Token) -> f64 {
        let s = &self.steps[v as usize - 1];
        match w as i64 - v as i64 {
            -1 => s.down,
            0 => s.stay,
            1 => s.up,
            _ => 0.0,
        }
    }

    fn check_token(&self, v: Token) -> Result<()> {
        if v == MASK || v as usize > self.k {
            return invalid(format!("token {v} outside 1..={}", self.k));
        }
        Ok(())
    }

    /// `p_data(seq)`: uniform start times the step probabilities.
    pub fn prob(&self, seq: &[Token]) -> f64 {
        if seq.len() != self.h || seq.iter().any(|&t| t == MASK || t as usize > self.k) {
            return 0.0;
        }
        seq.windows(2)
            .fold(1.0 / self.k as f64, |p, w| p * self.transition(w[0], w[1]))
    }

    pub fn sample_sequence<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenSeq {
        let mut out = Vec::with_capacity(self.h);
        let mut v = rng.gen_range(1..=self.k as Token);
        out.push(v);
        for _ in 1..self.h {
            let s = self.steps[v as usize - 1];
            let u: f64 = rng.gen();
            if u < s.down {
                v -= 1;
            } else if u >= s.down + s.stay {
                v += 1;
            }
            out.push(v);
        }
        TokenSeq::new(out)
    }

    /// `count` sequences, sequence `i` drawn from data substream `i`.
    pub fn sample_corpus(&self, count: usize, seed: u64) -> Vec<TokenSeq> {
        (0..count)
            .into_par_iter()
            .map(|i| self.sample_sequence(&mut stream_rng(seed, Stream::Data, i as u64)))
            .collect()
    }

    /// Exact conditional of a center token between clean neighbours `left`
    /// and `right`; `None` when no center connects them.
    pub fn exact_center_conditional(&self, left: Token, right: Token) -> Result<Option<Vec<f64>>> {
        self.check_token(left)?;
        self.check_token(right)?;
        Ok(self.token_conditional(Some(left), Some(right)))
    }

    /// Conditional of one token given optional clean neighbours. A missing
    /// left neighbour means the uniform start law.
    pub fn token_conditional(&self, left: Option<Token>, right: Option<Token>) -> Option<Vec<f64>> {
        let mut w: Vec<f64> = (1..=self.k as Token)
            .map(|a| {
                let from_left = left.map_or(1.0 / self.k as f64, |l| self.transition(l, a));
                let to_right = right.map_or(1.0, |r| self.transition(a, r));
                from_left * to_right
            })
            .collect();
        let z: f64 = w.iter().sum();
        if z <= 0.0 {
            return None;
        }
        w.iter_mut().for_each(|x| *x /= z);
        Some(w)
    }

    pub fn enumeration_size(&self) -> u64 {
        3u64.checked_pow(self.h as u32 - 1)
            .and_then(|p| p.checked_mul(self.k as u64))
            .unwrap_or(u64::MAX)
    }

    /// The full support with probabilities; refuses when
    /// `K * 3^(H-1) > limit`.
    pub fn to_explicit(&self, limit: u64) -> Result<ExplicitDistribution> {
        if self.enumeration_size() > limit {
            return Err(LabError::Capacity(format!(
                "walk support with K={} H={} exceeds enumeration limit {limit}",
                self.k, self.h
            )));
        }
        let mut support = Vec::new();
        let mut prob = Vec::new();
        let mut buf = Vec::with_capacity(self.h);
        for v in 1..=self.k as Token {
            buf.push(v);
            self.extend(&mut buf, 1.0 / self.k as f64, &mut support, &mut prob);
            buf.pop();
        }
        // rounding in the products can leave the total a few ulps from 1
        ExplicitDistribution::from_weights(self.k, self.h, support, prob)
    }

    fn extend(
        &self,
        buf: &mut Vec<Token>,
        p: f64,
        support: &mut Vec<TokenSeq>,
        prob: &mut Vec<f64>,
    ) {
        if buf.len() == self.h {
            support.push(TokenSeq::from(buf.as_slice()));
            prob.push(p);
            return;
        }
        let v = *buf.last().expect("nonempty prefix");
        let lo = if v > 1 { v - 1 } else { v };
        let hi = if (v as usize) < self.k { v + 1 } else { v };
        for w in lo..=hi {
            let pw = self.transition(v, w);
            if pw > 0.0 {
                buf.push(w);
                self.extend(buf, p * pw, support, prob);
                buf.pop();
            }
        }
    }

    /// Per-position minimal mismatch cost over walk strings ending in each token.
    fn distance_table(&self, seq: &[Token]) -> Vec<Vec<usize>> {
        let k = self.k;
        let miss = |h: usize, v: usize| usize::from(seq[h] as usize != v);
        let mut table = Vec::with_capacity(self.h);
        table.push((1..=k).map(|v| miss(0, v)).collect::<Vec<_>>());
        for h in 1..self.h {
            let prev = &table[h - 1];
            let row = (1..=k)
                .map(|v| {
                    let lo = v.saturating_sub(1).max(1);
                    let hi = (v + 1).min(k);
                    (lo..=hi)
                        .map(|u| prev[u - 1])
                        .min()
                        .expect("nonempty range")
                        + miss(h, v)
                })
                .collect();
            table.push(row);
        }
        table
    }
}

fn clamped_steps(p: &WalkParams, v: usize, k: usize) -> StepProbs {
    let x = (v - 1) as f64;
    let s = p.exponent_scale;
    let up = p.amplitudes[0] * (s * (p.frequencies[0] * x + p.phases[0]).sin()).exp();
    let stay = p.amplitudes[1] * (s * (p.frequencies[1] * x + p.phases[1]).sin()).exp();
    let down = p.amplitudes[2] * (s * (p.frequencies[2] * x + p.phases[2]).cos()).exp();
    let z = up + stay + down;
    let (mut up, mut stay, mut down) = (up / z, stay / z, down / z);
    if v == 1 {
        stay += down;
        down = 0.0;
    }
    if v == k {
        stay += up;
        up = 0.0;
    }
    StepProbs { down, stay, up }
}

impl SupportOracle for LanguageSpec {
    fn vocab(&self) -> usize {
        self.k
    }

    fn seq_len(&self) -> usize {
        self.h
    }

    fn contains_clean(&self, seq: &[Token]) -> bool {
        seq.len() == self.h
            && seq.iter().all(|&t| t != MASK && t as usize <= self.k)
            && seq
                .windows(2)
                .all(|w| (w[0] as i64 - w[1] as i64).abs() <= 1)
    }

    fn distance(&self, seq: &[Token]) -> Result<usize> {
        let table = self.distance_table(seq);
        Ok(*table[self.h - 1].iter().min().expect("K >= 2"))
    }

    /// Exact forward pass over (position, token, mismatches) that sums the
    /// probability and count of walk strings at the minimal distance.
    fn projection(&self, seq: &[Token]) -> Result<ProjectionResult> {
        let distance = SupportOracle::distance(self, seq)?;
        let (k, width) = (self.k, distance + 1);
        let idx = |v: usize, e: usize| (v - 1) * width + e;
        let mut mass = vec![0.0f64; k * width];
        let mut count = vec![0u64; k * width];
        for v in 1..=k {
            let e = usize::from(seq[0] as usize != v);
            if e <= distance {
                mass[idx(v, e)] = 1.0 / k as f64;
                count[idx(v, e)] = 1;
            }
        }
        for h in 1..self.h {
            let mut next_mass = vec![0.0f64; k * width];
            let mut next_count = vec![0u64; k * width];
            for v in 1..=k {
                let miss = usize::from(seq[h] as usize != v);
                let lo = v.saturating_sub(1).max(1);
                let hi = (v + 1).min(k);
                for u in lo..=hi {
                    let p = self.transition(u as Token, v as Token);
                    for e in 0..width - miss {
                        let (m, c) = (mass[idx(u, e)], count[idx(u, e)]);
                        if c > 0 {
                            next_mass[idx(v, e + miss)] += m * p;
                            next_count[idx(v, e + miss)] =
                                next_count[idx(v, e + miss)].saturating_add(c);
                        }
                    }
                }
            }
            mass = next_mass;
            count = next_count;
        }
        let at_distance = |v: usize| idx(v, distance);
        Ok(ProjectionResult {
            distance,
            mass: (1..=k).map(|v| mass[at_distance(v)]).sum(),
            witness_count: (1..=k).fold(0u64, |acc, v| acc.saturating_add(count[at_distance(v)])),
        })
    }
}

/// Sidecar metadata of a corpus file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusMeta {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "H")]
    pub h: usize,
    pub seed: u64,
    pub count: usize,
}

/// One sequence per line, tokens separated by single spaces.
pub fn write_corpus(path: &Path, corpus: &[TokenSeq]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in corpus {
        writeln!(w, "{s}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<TokenSeq>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(line.parse()?);
    }
    Ok(out)
}
