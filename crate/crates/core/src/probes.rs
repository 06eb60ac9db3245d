//! Support and frequency probes of a clean-token predictor.
//!
//! Every probe reduces to tie-aware pairwise comparisons of model scores, so
//! values depend only on how the model ranks tokens. A tie counts one half.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Mechanism, Token, TokenSeq, MASK};
use crate::error::{invalid, LabError, Result};
use crate::language::LanguageSpec;
use crate::reverse::Denoiser;
use crate::seed::{stream_rng, Stream};

/// Substream offset that keeps validation draws apart from training draws.
pub const VALIDATION_OFFSET: u64 = 1 << 40;

/// `1` if `a > b`, `1/2` on a tie, else `0`.
pub fn psi(a: f64, b: f64) -> f64 {
    if a > b {
        1.0
    } else if a == b {
        0.5
    } else {
        0.0
    }
}

/// Index of the largest entry among `ids`, ties to the smaller id.
fn argmax_by(ids: &[Token], score: impl Fn(Token) -> f64) -> Option<Token> {
    let mut best: Option<(Token, f64)> = None;
    for &a in ids {
        let s = score(a);
        if best.map_or(true, |(b, bs)| s > bs || (s == bs && a < b)) {
            best = Some((a, s));
        }
    }
    best.map(|(a, _)| a)
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Exact clean-neighbour conditional of the walk language as a predictor.
/// Masked neighbours, and positions past either end, are treated as unknown.
#[derive(Clone, Debug)]
pub struct WalkOracle<'a> {
    pub lang: &'a LanguageSpec,
}

impl Denoiser for WalkOracle<'_> {
    fn vocab(&self) -> usize {
        self.lang.vocab()
    }

    fn clean_posterior(&self, x: &TokenSeq, h: usize, _sigma: f64) -> Result<Vec<f64>> {
        if h >= x.len() {
            return invalid(format!("position {h} out of range for length {}", x.len()));
        }
        let known = |t: Option<&Token>| t.copied().filter(|&t| t != MASK);
        let left = if h == 0 { None } else { known(x.get(h - 1)) };
        let post = self.lang.token_conditional(left, known(x.get(h + 1)));
        Ok(post.unwrap_or_else(|| vec![1.0 / self.lang.vocab() as f64; self.lang.vocab()]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirectProbeConfig {
    /// Noise level handed to the model; `None` means `1/H`.
    pub sigma: Option<f64>,
    pub n_samples: usize,
    pub uniform_corruptions: usize,
}

impl Default for DirectProbeConfig {
    fn default() -> Self {
        DirectProbeConfig {
            sigma: None,
            n_samples: 1000,
            uniform_corruptions: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectProbeResult {
    pub support: f64,
    pub top1: f64,
    pub pairwise: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyProbe {
    pub top1: f64,
    pub pairwise: f64,
}

struct ItemScores {
    support: Option<f64>,
    top1: f64,
    pairwise: Option<f64>,
}

fn score_against(post: &[f64], q: &[f64], k: usize) -> ItemScores {
    let valid: Vec<Token> = (1..=k as Token)
        .filter(|&a| q[a as usize - 1] > 0.0)
        .collect();
    let invalid_: Vec<Token> = (1..=k as Token)
        .filter(|&a| q[a as usize - 1] <= 0.0)
        .collect();
    let s = |a: Token| post[a as usize - 1];
    let support = mean(
        valid
            .iter()
            .flat_map(|&a| invalid_.iter().map(move |&b| psi(s(a), s(b)))),
    );
    let top1 = f64::from(u8::from(
        argmax_by(&valid, s) == argmax_by(&valid, |a| q[a as usize - 1]),
    ));
    let pairwise = mean(valid.iter().flat_map(|&a| {
        valid
            .iter()
            .filter(move |&&b| q[a as usize - 1] > q[b as usize - 1])
            .map(move |&b| psi(s(a), s(b)))
    }));
    ItemScores {
        support,
        top1,
        pairwise,
    }
}

/// Held-out strings with one interior position each, fixed by `seed`.
pub fn validation_items(
    lang: &LanguageSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<(TokenSeq, usize)>> {
    if lang.len() < 3 {
        return invalid("direct probes need strings of length at least 3");
    }
    Ok((0..n as u64)
        .map(|i| {
            let s =
                lang.sample_sequence(&mut stream_rng(seed, Stream::Data, VALIDATION_OFFSET + i));
            let h = stream_rng(seed, Stream::Corrupt, VALIDATION_OFFSET + i)
                .gen_range(1..lang.len() - 1);
            (s, h)
        })
        .collect())
}

/// Direct support and frequency probes. Each validation string has one
/// interior position corrupted (masked, or replaced by each of several
/// uniform draws) and the model's scores there are compared with the exact
/// center conditional given the clean neighbours.
pub fn direct_probes<D: Denoiser + Sync>(
    model: &D,
    lang: &LanguageSpec,
    mechanism: Mechanism,
    config: &DirectProbeConfig,
    seed: u64,
) -> Result<DirectProbeResult> {
    let k = lang.vocab();
    if model.vocab() != k {
        return invalid("model and language vocabularies differ");
    }
    let sigma = config.sigma.unwrap_or(1.0 / lang.len() as f64);
    let items = validation_items(lang, config.n_samples, seed)?;
    let scored: Vec<ItemScores> = items
        .par_iter()
        .enumerate()
        .map(|(i, (s, h))| {
            let q = lang
                .exact_center_conditional(s[h - 1], s[h + 1])?
                .expect("validation strings are in the support");
            let noisy: Vec<Token> = match mechanism {
                Mechanism::Absorbing => vec![MASK],
                Mechanism::Uniform => {
                    let mut rng =
                        stream_rng(seed, Stream::ProbeNegatives, VALIDATION_OFFSET + i as u64);
                    (0..config.uniform_corruptions.max(1))
                        .map(|_| rng.gen_range(1..=k as Token))
                        .collect()
                }
            };
            let per: Vec<ItemScores> = noisy
                .iter()
                .map(|&c| {
                    Ok(score_against(
                        &model.clean_posterior(&s.with_edit(*h, c), *h, sigma)?,
                        &q,
                        k,
                    ))
                })
                .collect::<Result<_>>()?;
            Ok(ItemScores {
                support: mean(per.iter().filter_map(|p| p.support)),
                top1: mean(per.iter().map(|p| p.top1)).unwrap_or(0.0),
                pairwise: mean(per.iter().filter_map(|p| p.pairwise)),
            })
        })
        .collect::<Result<_>>()?;
    Ok(DirectProbeResult {
        support: mean(scored.iter().filter_map(|s| s.support)).unwrap_or(0.5),
        top1: mean(scored.iter().map(|s| s.top1)).unwrap_or(0.0),
        pairwise: mean(scored.iter().filter_map(|s| s.pairwise)).unwrap_or(0.5),
    })
}

pub fn direct_support_probe<D: Denoiser + Sync>(
    model: &D,
    lang: &LanguageSpec,
    mechanism: Mechanism,
    config: &DirectProbeConfig,
    seed: u64,
) -> Result<f64> {
    Ok(direct_probes(model, lang, mechanism, config, seed)?.support)
}

pub fn direct_frequency_probes<D: Denoiser + Sync>(
    model: &D,
    lang: &LanguageSpec,
    mechanism: Mechanism,
    config: &DirectProbeConfig,
    seed: u64,
) -> Result<FrequencyProbe> {
    let r = direct_probes(model, lang, mechanism, config, seed)?;
    Ok(FrequencyProbe {
        top1: r.top1,
        pairwise: r.pairwise,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankParams {
    pub min_count: u64,
    pub max_contexts: usize,
    pub candidate_cap: usize,
}

impl Default for BankParams {
    fn default() -> Self {
        BankParams {
            min_count: 8,
            max_contexts: 8192,
            candidate_cap: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankContext {
    pub left: Token,
    pub right: Token,
    /// Center counts, most frequent first, ties by token id.
    pub candidates: Vec<(Token, u64)>,
}

impl BankContext {
    pub fn contains(&self, a: Token) -> bool {
        self.candidates.iter().any(|&(c, _)| c == a)
    }

    /// Most frequent center, ties to the smaller id.
    pub fn mode(&self) -> Option<Token> {
        self.candidates.first().map(|&(c, _)| c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextBank {
    #[serde(rename = "K")]
    pub k: usize,
    pub params: BankParams,
    pub contexts: Vec<BankContext>,
    /// `g(a)`: counts of center `a` summed over retained candidate lists.
    pub global: Vec<u64>,
    /// Set when the corpus held no triples at all.
    pub empty: bool,
}

/// Scans every `(x[h-1], x[h], x[h+1])` triple of `corpus`.
pub fn build_context_bank(
    corpus: &[TokenSeq],
    k: usize,
    params: BankParams,
) -> Result<ContextBank> {
    let mut raw: BTreeMap<(Token, Token), Vec<u64>> = BTreeMap::new();
    for s in corpus {
        s.validate(k, s.len(), Some(Mechanism::Uniform))?;
        for w in s.windows(3) {
            raw.entry((w[0], w[2])).or_insert_with(|| vec![0; k])[w[1] as usize - 1] += 1;
        }
    }
    let empty = raw.is_empty();
    let mut kept: Vec<((Token, Token), u64, Vec<u64>)> = raw
        .into_iter()
        .map(|(key, c)| (key, c.iter().sum(), c))
        .filter(|(_, total, _)| *total >= params.min_count)
        .collect();
    if kept.len() > params.max_contexts {
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        kept.truncate(params.max_contexts);
        kept.sort_by_key(|e| e.0);
    }
    let mut global = vec![0; k];
    let contexts = kept
        .into_iter()
        .map(|((left, right), _, counts)| {
            let mut candidates: Vec<(Token, u64)> = counts
                .iter()
                .enumerate()
                .filter(|(_, &n)| n > 0)
                .map(|(i, &n)| (i as Token + 1, n))
                .collect();
            candidates.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            candidates.truncate(params.candidate_cap);
            for &(c, n) in &candidates {
                global[c as usize - 1] += n;
            }
            BankContext {
                left,
                right,
                candidates,
            }
        })
        .collect();
    Ok(ContextBank {
        k,
        params,
        contexts,
        global,
        empty,
    })
}

impl ContextBank {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    fn log_g(&self, a: Token) -> f64 {
        (self.global[a as usize - 1] as f64).ln_1p()
    }

    /// Negatives for `targets`, drawn from tokens outside `exclude`.
    fn negatives(
        &self,
        index: usize,
        targets: &[Token],
        exclude: &dyn Fn(Token) -> bool,
        strategy: NegativeStrategy,
        n: usize,
        seed: u64,
    ) -> Vec<Token> {
        let eligible: Vec<Token> = (1..=self.k as Token).filter(|&b| !exclude(b)).collect();
        if eligible.len() <= n {
            return eligible;
        }
        let mut out = match strategy {
            NegativeStrategy::FreqMatched => {
                let mut left = eligible;
                let mut out = Vec::with_capacity(n);
                'fill: loop {
                    for &a in targets {
                        if out.len() == n || left.is_empty() {
                            break 'fill;
                        }
                        let la = self.log_g(a);
                        let (i, _) = left
                            .iter()
                            .enumerate()
                            .min_by(|x, y| {
                                (self.log_g(*x.1) - la)
                                    .abs()
                                    .total_cmp(&(self.log_g(*y.1) - la).abs())
                            })
                            .expect("nonempty");
                        out.push(left.remove(i));
                    }
                    if targets.is_empty() {
                        break;
                    }
                }
                out
            }
            NegativeStrategy::Uniform => {
                let mut rng = stream_rng(seed, Stream::ProbeNegatives, index as u64);
                eligible.choose_multiple(&mut rng, n).copied().collect()
            }
            NegativeStrategy::Frequent => {
                let mut e = eligible;
                e.sort_by(|a, b| {
                    self.global[*b as usize - 1]
                        .cmp(&self.global[*a as usize - 1])
                        .then(a.cmp(b))
                });
                e.truncate(n);
                e
            }
        };
        out.sort_unstable();
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    FreqMatched,
    Uniform,
    Frequent,
}

impl NegativeStrategy {
    pub const ALL: [NegativeStrategy; 3] = [
        NegativeStrategy::FreqMatched,
        NegativeStrategy::Uniform,
        NegativeStrategy::Frequent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NegativeStrategy::FreqMatched => "freq_matched",
            NegativeStrategy::Uniform => "uniform",
            NegativeStrategy::Frequent => "frequent",
        }
    }
}

impl FromStr for NegativeStrategy {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freq_matched" | "freq-matched" => Ok(NegativeStrategy::FreqMatched),
            "uniform" => Ok(NegativeStrategy::Uniform),
            "frequent" => Ok(NegativeStrategy::Frequent),
            other => invalid(format!("unknown negative strategy `{other}`")),
        }
    }
}

/// Scores center tokens for a `(left, right)` context by embedding the
/// three-token window at an interior offset of a fixed template string.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowScorer {
    pub template: TokenSeq,
    pub offset: usize,
    pub mechanism: Mechanism,
    pub sigma: f64,
}

impl WindowScorer {
    pub fn new(template: TokenSeq, mechanism: Mechanism, sigma: f64) -> Result<Self> {
        if template.len() < 3 {
            return invalid("window template needs length at least 3");
        }
        let offset = (template.len() / 2).clamp(1, template.len() - 2);
        Ok(WindowScorer {
            template,
            offset,
            mechanism,
            sigma,
        })
    }

    /// Template is the first held-out string of the walk language.
    pub fn for_language(lang: &LanguageSpec, mechanism: Mechanism, seed: u64) -> Result<Self> {
        let template = lang.sample_sequence(&mut stream_rng(seed, Stream::Data, VALIDATION_OFFSET));
        WindowScorer::new(template, mechanism, 1.0 / lang.len() as f64)
    }

    /// Center scores, indexed `a - 1`. Under uniform corruption the scores
    /// are averaged over every possible corrupted center token.
    pub fn scores<D: Denoiser + ?Sized>(
        &self,
        model: &D,
        left: Token,
        right: Token,
    ) -> Result<Vec<f64>> {
        let k = model.vocab();
        let mut x = self.template.clone();
        x.set(self.offset - 1, left);
        x.set(self.offset + 1, right);
        let centers: Vec<Token> = match self.mechanism {
            Mechanism::Absorbing => vec![MASK],
            Mechanism::Uniform => (1..=k as Token).collect(),
        };
        let mut acc = vec![0.0; k];
        for c in &centers {
            x.set(self.offset, *c);
            let p = model.clean_posterior(&x, self.offset, self.sigma)?;
            acc.iter_mut().zip(p).for_each(|(a, p)| *a += p);
        }
        acc.iter_mut().for_each(|a| *a /= centers.len() as f64);
        Ok(acc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportProbe {
    pub accuracy: f64,
    /// Contexts with fewer eligible negatives than requested.
    pub short_contexts: usize,
}

fn support_accuracy(
    bank: &ContextBank,
    index: usize,
    scores: &[f64],
    targets: &[Token],
    exclude: &dyn Fn(Token) -> bool,
    strategy: NegativeStrategy,
    n_neg: usize,
    seed: u64,
) -> (Option<f64>, bool) {
    let neg = bank.negatives(index, targets, exclude, strategy, n_neg, seed);
    let short = neg.len() < n_neg;
    let s = |a: Token| scores[a as usize - 1];
    (
        mean(
            targets
                .iter()
                .flat_map(|&a| neg.iter().map(move |&b| psi(s(a), s(b)))),
        ),
        short,
    )
}

/// Candidate-versus-negative accuracy averaged over bank contexts.
pub fn indirect_support_probe<D: Denoiser + Sync>(
    model: &D,
    bank: &ContextBank,
    scorer: &WindowScorer,
    strategy: NegativeStrategy,
    n_neg: usize,
    seed: u64,
) -> Result<SupportProbe> {
    let rows: Vec<(Option<f64>, bool)> = bank
        .contexts
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let scores = scorer.scores(model, c.left, c.right)?;
            let targets: Vec<Token> = c.candidates.iter().map(|&(a, _)| a).collect();
            Ok(support_accuracy(
                bank,
                i,
                &scores,
                &targets,
                &|b| c.contains(b),
                strategy,
                n_neg,
                seed,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(SupportProbe {
        accuracy: mean(rows.iter().filter_map(|r| r.0)).unwrap_or(0.5),
        short_contexts: rows.iter().filter(|r| r.1).count(),
    })
}

/// Pairwise ranking of candidates by empirical count, and agreement of the
/// model's top candidate with the empirical mode.
pub fn indirect_frequency_probes<D: Denoiser + Sync>(
    model: &D,
    bank: &ContextBank,
    scorer: &WindowScorer,
) -> Result<FrequencyProbe> {
    let rows: Vec<(f64, Option<f64>)> = bank
        .contexts
        .par_iter()
        .map(|c| {
            let scores = scorer.scores(model, c.left, c.right)?;
            let s = |a: Token| scores[a as usize - 1];
            let ids: Vec<Token> = c.candidates.iter().map(|&(a, _)| a).collect();
            let top1 = f64::from(u8::from(argmax_by(&ids, s) == c.mode()));
            let pairwise = mean(c.candidates.iter().flat_map(|&(a, na)| {
                c.candidates
                    .iter()
                    .filter(move |&&(_, nb)| na > nb)
                    .map(move |&(b, _)| psi(s(a), s(b)))
            }));
            Ok((top1, pairwise))
        })
        .collect::<Result<_>>()?;
    Ok(FrequencyProbe {
        top1: mean(rows.iter().map(|r| r.0)).unwrap_or(0.0),
        pairwise: mean(rows.iter().filter_map(|r| r.1)).unwrap_or(0.5),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleBankProbe {
    pub support_direct: f64,
    pub pairwise_direct: f64,
}

/// The bank probes with the exact conditional support and law of each
/// context in place of the empirical candidate lists and counts.
pub fn synthetic_oracle_probes<D: Denoiser + Sync>(
    model: &D,
    lang: &LanguageSpec,
    bank: &ContextBank,
    scorer: &WindowScorer,
    n_neg: usize,
    seed: u64,
) -> Result<OracleBankProbe> {
    let rows: Vec<(Option<f64>, Option<f64>)> = bank
        .contexts
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let Some(q) = lang.exact_center_conditional(c.left, c.right)? else {
                return Ok((None, None));
            };
            let scores = scorer.scores(model, c.left, c.right)?;
            let support: Vec<Token> = (1..=lang.vocab() as Token)
                .filter(|&a| q[a as usize - 1] > 0.0)
                .collect();
            let exclude = |b: Token| q[b as usize - 1] > 0.0;
            let (sup, _) = support_accuracy(
                bank,
                i,
                &scores,
                &support,
                &exclude,
                NegativeStrategy::FreqMatched,
                n_neg,
                seed,
            );
            let s = |a: Token| scores[a as usize - 1];
            let q = &q;
            let pw = mean(support.iter().flat_map(|&a| {
                support
                    .iter()
                    .filter(move |&&b| q[a as usize - 1] > q[b as usize - 1])
                    .map(move |&b| psi(s(a), s(b)))
            }));
            Ok((sup, pw))
        })
        .collect::<Result<_>>()?;
    Ok(OracleBankProbe {
        support_direct: mean(rows.iter().filter_map(|r| r.0)).unwrap_or(0.5),
        pairwise_direct: mean(rows.iter().filter_map(|r| r.1)).unwrap_or(0.5),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCurve {
    pub metric: String,
    pub checkpoints: Vec<u64>,
    pub values: Vec<f64>,
}

impl ProbeCurve {
    pub fn new(metric: impl Into<String>, checkpoints: Vec<u64>, values: Vec<f64>) -> Result<Self> {
        if checkpoints.len() != values.len() {
            return invalid("probe curve lengths differ");
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return invalid("probe values must lie in [0, 1]");
        }
        Ok(ProbeCurve {
            metric: metric.into(),
            checkpoints,
            values,
        })
    }
}

/// First checkpoint where the curve reaches `M_0 + q (max M - M_0)`.
pub fn transition_time(curve: &ProbeCurve, q: f64) -> Result<u64> {
    let (Some(&m0), Some(&first)) = (curve.values.first(), curve.checkpoints.first()) else {
        return invalid("transition time of an empty curve");
    };
    let peak = curve
        .values
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if peak <= m0 {
        return Ok(first);
    }
    let level = m0 + q * (peak - m0);
    Ok(curve
        .checkpoints
        .iter()
        .zip(&curve.values)
        .find(|(_, &v)| v >= level)
        .map(|(&c, _)| c)
        .expect("the peak reaches any level up to itself"))
}

/// `tokens_seen` followed by one column per curve.
pub fn curves_to_csv(curves: &[ProbeCurve]) -> Result<String> {
    let Some(first) = curves.first() else {
        return invalid("no curves to write");
    };
    if curves.iter().any(|c| c.checkpoints != first.checkpoints) {
        return invalid("curves have different checkpoint grids");
    }
    let mut out = String::from("tokens_seen");
    for c in curves {
        out.push(',');
        out.push_str(&c.metric);
    }
    out.push('\n');
    for (i, t) in first.checkpoints.iter().enumerate() {
        let _ = write!(out, "{t}");
        for c in curves {
            let _ = write!(out, ",{:.6}", c.values[i]);
        }
        out.push('\n');
    }
    Ok(out)
}
