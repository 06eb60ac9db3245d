//! Sequences, corruption mechanisms and explicit data distributions.
//!
//! Clean tokens are `1..=K`; the mask sentinel is [`MASK`] (`0`). Positions
//! are 0-based throughout the crate.

use std::collections::HashMap;
use std::fmt;
use std::ops::Deref;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};

pub type Token = u16;

/// Absorbing-state sentinel, outside the clean vocabulary.
pub const MASK: Token = 0;

pub const NORMALIZATION_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Uniform,
    Absorbing,
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Uniform => "uniform",
            Mechanism::Absorbing => "absorbing",
        }
    }

    /// Baseline forward proposal rate for one single-token edit.
    pub fn proposal_rate(self, beta: f64, k: usize) -> f64 {
        match self {
            Mechanism::Uniform => beta / k as f64,
            Mechanism::Absorbing => beta,
        }
    }

    /// Factor in front of the normalized score used by the projection
    /// samplers: `sigma / K` for uniform, `sigma` for absorbing.
    pub fn scale(self, sigma: f64, k: usize) -> f64 {
        match self {
            Mechanism::Uniform => sigma / k as f64,
            Mechanism::Absorbing => sigma,
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mechanism {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Mechanism::Uniform),
            "absorbing" | "mask" | "masking" => Ok(Mechanism::Absorbing),
            other => invalid(format!("unknown mechanism `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<Token>);

impl TokenSeq {
    pub fn new(tokens: Vec<Token>) -> Self {
        TokenSeq(tokens)
    }

    pub fn masked(len: usize) -> Self {
        TokenSeq(vec![MASK; len])
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<Token> {
        self.0
    }

    pub fn set(&mut self, h: usize, y: Token) {
        self.0[h] = y;
    }

    /// `x^{h -> y}`: copy with position `h` replaced by `y`.
    pub fn with_edit(&self, h: usize, y: Token) -> TokenSeq {
        let mut out = self.clone();
        out.0[h] = y;
        out
    }

    pub fn is_clean(&self) -> bool {
        !self.0.contains(&MASK)
    }

    pub fn mask_count(&self) -> usize {
        self.0.iter().filter(|&&t| t == MASK).count()
    }

    /// Checks length, vocabulary range and mask admissibility.
    pub fn validate(&self, k: usize, h: usize, mechanism: Option<Mechanism>) -> Result<()> {
        if self.0.len() != h {
            return invalid(format!(
                "sequence has length {}, expected {h}",
                self.0.len()
            ));
        }
        for &t in &self.0 {
            if t == MASK {
                if mechanism != Some(Mechanism::Absorbing) {
                    return invalid("mask token outside an absorbing context");
                }
            } else if t as usize > k {
                return invalid(format!("token {t} outside vocabulary 1..={k}"));
            }
        }
        Ok(())
    }
}

impl Deref for TokenSeq {
    type Target = [Token];

    fn deref(&self) -> &[Token] {
        &self.0
    }
}

impl From<Vec<Token>> for TokenSeq {
    fn from(v: Vec<Token>) -> Self {
        TokenSeq(v)
    }
}

impl From<&[Token]> for TokenSeq {
    fn from(v: &[Token]) -> Self {
        TokenSeq(v.to_vec())
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, &t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            if t == MASK {
                f.write_str("m")?;
            } else {
                write!(f, "{t}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for TokenSeq {
    type Err = LabError;

    /// Whitespace- or comma-separated tokens; `m` denotes the mask.
    fn from_str(s: &str) -> Result<Self> {
        s.split(|c: char| c.is_whitespace() || c == ',')
            .filter(|p| !p.is_empty())
            .map(|p| match p {
                "m" | "M" => Ok(MASK),
                _ => p
                    .parse::<Token>()
                    .map_err(|_| LabError::InvalidArgument(format!("bad token `{p}`"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(TokenSeq)
    }
}

/// Mixed-radix enumeration of all sequences of length `len` whose entries
/// range over `alphabet`.
pub(crate) fn for_each_sequence(len: usize, alphabet: &[Token], mut f: impl FnMut(&[Token])) {
    if alphabet.is_empty() {
        return;
    }
    let mut idx = vec![0usize; len];
    let mut buf: Vec<Token> = vec![alphabet[0]; len];
    loop {
        f(&buf);
        let mut pos = len;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < alphabet.len() {
                buf[pos] = alphabet[idx[pos]];
                break;
            }
            idx[pos] = 0;
            buf[pos] = alphabet[0];
        }
    }
}

pub(crate) fn clean_alphabet(k: usize) -> Vec<Token> {
    (1..=k as Token).collect()
}

/// All states a mechanism can produce over `[K]^H`, with masks under
/// absorbing corruption.
pub fn all_states(k: usize, h: usize, mechanism: Mechanism) -> Vec<TokenSeq> {
    let mut alphabet = clean_alphabet(k);
    if mechanism == Mechanism::Absorbing {
        alphabet.insert(0, MASK);
    }
    let mut out = Vec::new();
    for_each_sequence(h, &alphabet, |s| out.push(TokenSeq::from(s)));
    out
}

/// Data distribution given by an enumerated support.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution", into = "RawDistribution")]
pub struct ExplicitDistribution {
    k: usize,
    h: usize,
    support: Vec<TokenSeq>,
    prob: Vec<f64>,
    index: HashMap<TokenSeq, usize>,
}

#[derive(Serialize, Deserialize)]
struct RawDistribution {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "H")]
    h: usize,
    support: Vec<TokenSeq>,
    prob: Vec<f64>,
}

impl TryFrom<RawDistribution> for ExplicitDistribution {
    type Error = LabError;

    fn try_from(raw: RawDistribution) -> Result<Self> {
        ExplicitDistribution::new(raw.k, raw.h, raw.support, raw.prob)
    }
}

impl From<ExplicitDistribution> for RawDistribution {
    fn from(d: ExplicitDistribution) -> Self {
        RawDistribution {
            k: d.k,
            h: d.h,
            support: d.support,
            prob: d.prob,
        }
    }
}

impl PartialEq for ExplicitDistribution {
    fn eq(&self, other: &Self) -> bool {
        self.k == other.k
            && self.h == other.h
            && self.support == other.support
            && self.prob == other.prob
    }
}

impl ExplicitDistribution {
    pub fn new(k: usize, h: usize, support: Vec<TokenSeq>, prob: Vec<f64>) -> Result<Self> {
        if k == 0 || h == 0 {
            return invalid("K and H must be positive");
        }
        if k >= Token::MAX as usize {
            return invalid("vocabulary too large for the token type");
        }
        if support.is_empty() {
            return Err(LabError::InvalidState("empty support".into()));
        }
        if support.len() != prob.len() {
            return invalid("support and prob lengths differ");
        }
        let mut index = HashMap::with_capacity(support.len());
        for (i, s) in support.iter().enumerate() {
            s.validate(k, h, None)?;
            if index.insert(s.clone(), i).is_some() {
                return invalid(format!("duplicate support entry {s}"));
            }
        }
        if prob.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return invalid("probabilities must be strictly positive and finite");
        }
        let total: f64 = prob.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return invalid(format!("probabilities sum to {total}, not 1"));
        }
        Ok(ExplicitDistribution {
            k,
            h,
            support,
            prob,
            index,
        })
    }

    /// Builds a distribution from positive weights, normalizing them.
    pub fn from_weights(
        k: usize,
        h: usize,
        support: Vec<TokenSeq>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return invalid("weights must have positive total");
        }
        let prob = weights.into_iter().map(|w| w / total).collect();
        Self::new(k, h, support, prob)
    }

    pub fn vocab(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.h
    }

    pub fn support(&self) -> &[TokenSeq] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.prob
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TokenSeq, f64)> {
        self.support.iter().zip(self.prob.iter().copied())
    }

    pub fn prob_of(&self, seq: &TokenSeq) -> f64 {
        self.index.get(seq).map_or(0.0, |&i| self.prob[i])
    }

    pub fn contains(&self, seq: &TokenSeq) -> bool {
        self.index.contains_key(seq)
    }

    /// Draws one support element by inverse-CDF sampling.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenSeq {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (s, p) in self.iter() {
            acc += p;
            if u < acc {
                return s.clone();
            }
        }
        self.support.last().cloned().expect("nonempty support")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
