//! A count-based clean-token denoiser keyed on a three-token window.
//!
//! The key for position `h` of a noisy string is `(left, right, own, bucket)`
//! where `left`/`right` are the (possibly corrupted) neighbours, or
//! [`BOUNDARY`] past either end, `own` is the noisy token at `h` and
//! `bucket` is a coarse noise level. Unseen keys back off to
//! `(left, right, bucket)`, then `(left, right)`, then the uniform law.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corruption::corrupt_to_level;
use crate::domain::{Mechanism, Token, TokenSeq, MASK};
use crate::error::{invalid, LabError, Result};
use crate::instance::Instance;
use crate::reverse::Denoiser;
use crate::schedule::NoiseSchedule;
use crate::seed::{stream_rng, Stream};
use crate::support::SupportOracle;

/// Neighbour marker outside the string.
pub const BOUNDARY: Token = Token::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    /// Training strings drawn in total.
    pub samples: usize,
    /// Sample counts at which checkpoints are frozen.
    pub checkpoint_grid: Vec<usize>,
    pub lambda: f64,
    pub noise_buckets: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            samples: 4096,
            checkpoint_grid: default_grid(4096),
            lambda: 0.1,
            noise_buckets: 4,
        }
    }
}

/// Roughly geometric grid `1, 2, 3, 4, 6, 8, 11, 16, ...` up to `samples`.
pub fn default_grid(samples: usize) -> Vec<usize> {
    let mut grid = Vec::new();
    let mut x = 1.0_f64;
    while (x.round() as usize) < samples {
        let v = x.round() as usize;
        if grid.last() != Some(&v) {
            grid.push(v);
        }
        x *= std::f64::consts::SQRT_2;
    }
    grid.push(samples);
    grid
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(LabError::Config {
                field: field.into(),
                message: message.into(),
            })
        };
        if self.checkpoint_grid.is_empty() {
            return invalid("empty checkpoint grid");
        }
        if self.checkpoint_grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad("checkpoint_grid", "must be strictly increasing");
        }
        if *self.checkpoint_grid.last().unwrap() > self.samples {
            return bad("checkpoint_grid", "entries must not exceed samples");
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be positive");
        }
        if self.noise_buckets == 0 || self.noise_buckets > 255 {
            return bad("noise_buckets", "must lie in 1..=255");
        }
        Ok(())
    }
}

type FullKey = (Token, Token, Token, u8);
type BucketKey = (Token, Token, u8);
type PairKey = (Token, Token);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "RawTabular", try_from = "RawTabular")]
pub struct TabularDenoiser {
    k: usize,
    mechanism: Mechanism,
    lambda: f64,
    buckets: usize,
    tokens_seen: u64,
    full: BTreeMap<FullKey, Vec<u64>>,
    no_own: BTreeMap<BucketKey, Vec<u64>>,
    pair: BTreeMap<PairKey, Vec<u64>>,
}

#[derive(Serialize, Deserialize)]
struct RawTabular {
    #[serde(rename = "K")]
    k: usize,
    mechanism: Mechanism,
    lambda: f64,
    buckets: usize,
    tokens_seen: u64,
    /// `[left, right, own, bucket, counts...]`, boundary written as -1.
    full: Vec<Vec<i64>>,
}

fn encode(t: Token) -> i64 {
    if t == BOUNDARY {
        -1
    } else {
        i64::from(t)
    }
}

fn decode(v: i64) -> Result<Token> {
    if v == -1 {
        return Ok(BOUNDARY);
    }
    Token::try_from(v)
        .map_err(|_| LabError::InvalidArgument(format!("bad token {v} in checkpoint")))
}

impl From<TabularDenoiser> for RawTabular {
    fn from(m: TabularDenoiser) -> Self {
        let full = m
            .full
            .iter()
            .map(|(&(l, r, o, b), c)| {
                let mut row = vec![encode(l), encode(r), encode(o), i64::from(b)];
                row.extend(c.iter().map(|&n| n as i64));
                row
            })
            .collect();
        RawTabular {
            k: m.k,
            mechanism: m.mechanism,
            lambda: m.lambda,
            buckets: m.buckets,
            tokens_seen: m.tokens_seen,
            full,
        }
    }
}

impl TryFrom<RawTabular> for TabularDenoiser {
    type Error = LabError;

    fn try_from(raw: RawTabular) -> Result<Self> {
        let mut m = TabularDenoiser::new(raw.k, raw.mechanism, raw.lambda, raw.buckets)?;
        m.tokens_seen = raw.tokens_seen;
        for row in raw.full {
            if row.len() != 4 + raw.k || row[4..].iter().any(|&c| c < 0) {
                return invalid("malformed checkpoint row");
            }
            let bucket =
                u8::try_from(row[3]).map_err(|_| LabError::InvalidArgument("bad bucket".into()))?;
            let key = (decode(row[0])?, decode(row[1])?, decode(row[2])?, bucket);
            let counts: Vec<u64> = row[4..].iter().map(|&c| c as u64).collect();
            m.add_counts(key, &counts);
        }
        Ok(m)
    }
}

fn add_into(slot: &mut Vec<u64>, counts: &[u64]) {
    slot.iter_mut().zip(counts).for_each(|(s, c)| *s += c);
}

impl TabularDenoiser {
    pub fn new(k: usize, mechanism: Mechanism, lambda: f64, buckets: usize) -> Result<Self> {
        if k < 2 || k >= BOUNDARY as usize {
            return invalid(format!("vocabulary size {k} out of range"));
        }
        if !(lambda > 0.0) {
            return invalid("smoothing constant must be positive");
        }
        if buckets == 0 || buckets > 255 {
            return invalid("bucket count must lie in 1..=255");
        }
        Ok(TabularDenoiser {
            k,
            mechanism,
            lambda,
            buckets,
            tokens_seen: 0,
            full: BTreeMap::new(),
            no_own: BTreeMap::new(),
            pair: BTreeMap::new(),
        })
    }

    pub fn mechanism(&self) -> Mechanism {
        self.mechanism
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn tokens_seen(&self) -> u64 {
        self.tokens_seen
    }

    /// Number of distinct full keys observed.
    pub fn context_count(&self) -> usize {
        self.full.len()
    }

    pub fn bucket(&self, sigma: f64) -> u8 {
        let b = (sigma * self.buckets as f64).floor().max(0.0) as usize;
        b.min(self.buckets - 1) as u8
    }

    fn key(&self, x: &[Token], h: usize, sigma: f64) -> FullKey {
        let left = if h == 0 { BOUNDARY } else { x[h - 1] };
        let right = x.get(h + 1).copied().unwrap_or(BOUNDARY);
        (left, right, x[h], self.bucket(sigma))
    }

    fn add_counts(&mut self, (l, r, o, b): FullKey, counts: &[u64]) {
        let k = self.k;
        add_into(
            self.full.entry((l, r, o, b)).or_insert_with(|| vec![0; k]),
            counts,
        );
        add_into(
            self.no_own.entry((l, r, b)).or_insert_with(|| vec![0; k]),
            counts,
        );
        add_into(
            self.pair.entry((l, r)).or_insert_with(|| vec![0; k]),
            counts,
        );
    }

    /// Records one (noisy context, clean token) observation.
    pub fn observe(&mut self, x: &[Token], h: usize, sigma: f64, clean: Token) {
        let key = self.key(x, h, sigma);
        let mut one = vec![0; self.k];
        one[clean as usize - 1] = 1;
        self.add_counts(key, &one);
    }

    /// Counts used for position `h`, after backoff; `None` means uniform.
    fn counts_for(&self, x: &[Token], h: usize, sigma: f64) -> Option<&[u64]> {
        let (l, r, o, b) = self.key(x, h, sigma);
        [
            self.full.get(&(l, r, o, b)),
            self.no_own.get(&(l, r, b)),
            self.pair.get(&(l, r)),
        ]
        .into_iter()
        .flatten()
        .find(|c| c.iter().any(|&n| n > 0))
        .map(Vec::as_slice)
    }

    /// Smoothed clean-token conditional `(count + lambda) / (total + lambda K)`.
    pub fn model_posterior(&self, x: &TokenSeq, h: usize, sigma: f64) -> Result<Vec<f64>> {
        if h >= x.len() {
            return invalid(format!("position {h} out of range for length {}", x.len()));
        }
        let k = self.k;
        Ok(match self.counts_for(x, h, sigma) {
            None => vec![1.0 / k as f64; k],
            Some(c) => {
                let z = c.iter().sum::<u64>() as f64 + self.lambda * k as f64;
                c.iter().map(|&n| (n as f64 + self.lambda) / z).collect()
            }
        })
    }
}

impl Denoiser for TabularDenoiser {
    fn vocab(&self) -> usize {
        self.k
    }

    fn clean_posterior(&self, x: &TokenSeq, h: usize, sigma: f64) -> Result<Vec<f64>> {
        self.model_posterior(x, h, sigma)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub tokens_seen: u64,
    pub samples: usize,
    pub model: TabularDenoiser,
}

/// Trains on `config.samples` strings, freezing a copy of the model at every
/// grid point. Sample `i` uses substream `i` of the data, train and corrupt
/// streams, so a shorter run is a prefix of a longer one.
///
/// Under absorbing corruption only masked positions are recorded; under
/// uniform corruption every position is.
pub fn train_stream(
    source: &Instance,
    mechanism: Mechanism,
    schedule: &NoiseSchedule,
    config: &LearnerConfig,
    seed: u64,
) -> Result<Vec<Checkpoint>> {
    config.validate()?;
    let (k, h) = (source.vocab(), source.seq_len());
    let mut model = TabularDenoiser::new(k, mechanism, config.lambda, config.noise_buckets)?;
    let mut out = Vec::with_capacity(config.checkpoint_grid.len());
    let mut grid = config.checkpoint_grid.iter().peekable();
    let freeze = |model: &TabularDenoiser, done: usize, out: &mut Vec<Checkpoint>| {
        out.push(Checkpoint {
            tokens_seen: (done * h) as u64,
            samples: done,
            model: model.clone(),
        });
    };
    if grid.peek() == Some(&&0) {
        freeze(&model, 0, &mut out);
        grid.next();
    }
    for i in 0..config.samples {
        let x0 = source.draw(&mut stream_rng(seed, Stream::Data, i as u64));
        let t = stream_rng(seed, Stream::Train, i as u64).gen_range(1..=schedule.steps());
        let sigma = schedule.sigma(t);
        let xt = corrupt_to_level(
            &x0,
            sigma,
            mechanism,
            k,
            &mut stream_rng(seed, Stream::Corrupt, i as u64),
        );
        for pos in 0..h {
            if mechanism == Mechanism::Uniform || xt[pos] == MASK {
                model.observe(&xt, pos, sigma, x0[pos]);
            }
        }
        model.tokens_seen += h as u64;
        if grid.peek() == Some(&&(i + 1)) {
            freeze(&model, i + 1, &mut out);
            grid.next();
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub seed: u64,
    pub config: LearnerConfig,
    pub tokens_seen: Vec<u64>,
    pub files: Vec<String>,
}

/// Writes one JSON file per checkpoint plus `manifest.json`.
pub fn save_checkpoints(
    dir: &Path,
    seed: u64,
    config: &LearnerConfig,
    checkpoints: &[Checkpoint],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(checkpoints.len());
    for c in checkpoints {
        let name = format!("checkpoint_{:012}.json", c.tokens_seen);
        fs::write(dir.join(&name), serde_json::to_string(c)?)?;
        files.push(name);
    }
    let manifest = CheckpointManifest {
        seed,
        config: config.clone(),
        tokens_seen: checkpoints.iter().map(|c| c.tokens_seen).collect(),
        files,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_checkpoints(dir: &Path) -> Result<(CheckpointManifest, Vec<Checkpoint>)> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let checkpoints: Vec<Checkpoint> = manifest
        .files
        .iter()
        .map(|f| Ok(serde_json::from_str(&fs::read_to_string(dir.join(f))?)?))
        .collect::<Result<_>>()?;
    if checkpoints
        .windows(2)
        .any(|w| w[0].tokens_seen >= w[1].tokens_seen)
    {
        return Err(LabError::InvalidState(
            "checkpoints are not increasing in tokens_seen".into(),
        ));
    }
    Ok((manifest, checkpoints))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ExplicitDistribution;
    use crate::language::LanguageSpec;
    use crate::schedule::{make_schedule, ScheduleKind};

    fn cfg(samples: usize, grid: Vec<usize>, lambda: f64) -> LearnerConfig {
        LearnerConfig {
            samples,
            checkpoint_grid: grid,
            lambda,
            noise_buckets: 4,
        }
    }

    #[test]
    fn grid_shape() {
        let g = default_grid(100);
        assert_eq!(&g[..6], &[1, 2, 3, 4, 6, 8]);
        assert_eq!(*g.last().unwrap(), 100);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_samples_gives_uniform() {
        let lang = LanguageSpec::new(5, 4).unwrap();
        let s = make_schedule(ScheduleKind::LinearCumulative, 10).unwrap();
        let cps = train_stream(
            &lang.clone().into(),
            Mechanism::Absorbing,
            &s,
            &cfg(0, vec![0], 1.0),
            1,
        )
        .unwrap();
        let p = cps[0]
            .model
            .model_posterior(&TokenSeq::new(vec![1, MASK, 2, 2]), 1, 0.3)
            .unwrap();
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert!(train_stream(
            &Instance::Walk(lang),
            Mechanism::Absorbing,
            &s,
            &cfg(5, vec![], 1.0),
            1
        )
        .is_err());
    }

    #[test]
    fn counting_and_backoff() {
        let mut m = TabularDenoiser::new(4, Mechanism::Absorbing, 0.5, 4).unwrap();
        let x = TokenSeq::new(vec![2, MASK, 3]);
        for _ in 0..1000 {
            m.observe(&x, 1, 0.1, 3);
        }
        let p = m.model_posterior(&x, 1, 0.1).unwrap();
        assert!(p[2] >= 1000.0 / (1000.0 + 0.5 * 4.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // other own token and other bucket fall back to coarser keys
        let y = TokenSeq::new(vec![2, 1, 3]);
        assert_eq!(m.model_posterior(&y, 1, 0.9).unwrap(), p);
        let unseen = m
            .model_posterior(&TokenSeq::new(vec![4, MASK, 4]), 1, 0.1)
            .unwrap();
        assert_eq!(unseen, vec![0.25; 4]);
        let edge = m.model_posterior(&x, 0, 0.1).unwrap();
        assert_eq!(edge, vec![0.25; 4]);
    }

    #[test]
    fn large_lambda_is_uniform() {
        let lang = LanguageSpec::new(4, 4).unwrap();
        let s = make_schedule(ScheduleKind::LinearCumulative, 20).unwrap();
        let cps = train_stream(
            &lang.into(),
            Mechanism::Uniform,
            &s,
            &cfg(200, vec![200], 1e12),
            3,
        )
        .unwrap();
        let p = cps[0]
            .model
            .model_posterior(&TokenSeq::new(vec![1, 2, 2, 3]), 2, 0.1)
            .unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-8));
    }

    #[test]
    fn single_context_posterior_converges() {
        // H = 1 has one context per (own, bucket), so the family contains the
        // exact posterior, which here does not depend on the noise level.
        let d = ExplicitDistribution::new(
            3,
            1,
            vec![TokenSeq::new(vec![1]), TokenSeq::new(vec![3])],
            vec![0.7, 0.3],
        )
        .unwrap();
        let s = make_schedule(ScheduleKind::LinearCumulative, 50).unwrap();
        let grid = vec![100, 1000, 10_000, 40_000];
        let cps = train_stream(
            &d.into(),
            Mechanism::Absorbing,
            &s,
            &cfg(40_000, grid, 0.01),
            9,
        )
        .unwrap();
        let x = TokenSeq::new(vec![MASK]);
        let gaps: Vec<f64> = cps
            .iter()
            .map(|c| {
                let p = c.model.model_posterior(&x, 0, 0.7).unwrap();
                (p[0] - 0.7).abs().max(p[1].abs()).max((p[2] - 0.3).abs())
            })
            .collect();
        let last = *gaps.last().unwrap();
        // about a quarter of draws land in the bucket and most of those mask
        assert!(last < 2.0 / 5000f64.sqrt(), "{gaps:?}");
        assert!(gaps[3] <= gaps[0] + 2.0 / 25f64.sqrt());
    }

    #[test]
    fn training_is_deterministic_and_prefix_stable() {
        let lang: Instance = LanguageSpec::new(6, 5).unwrap().into();
        let s = make_schedule(ScheduleKind::Cosine, 30).unwrap();
        let a = train_stream(
            &lang,
            Mechanism::Uniform,
            &s,
            &cfg(300, vec![10, 300], 0.1),
            5,
        )
        .unwrap();
        let b = train_stream(
            &lang,
            Mechanism::Uniform,
            &s,
            &cfg(300, vec![10, 300], 0.1),
            5,
        )
        .unwrap();
        let c = train_stream(&lang, Mechanism::Uniform, &s, &cfg(10, vec![10], 0.1), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0], c[0]);
        assert_eq!(a[1].tokens_seen, 1500);
    }

    #[test]
    fn checkpoints_round_trip() {
        let lang: Instance = LanguageSpec::new(4, 4).unwrap().into();
        let s = make_schedule(ScheduleKind::LinearCumulative, 16).unwrap();
        let config = cfg(50, vec![5, 50], 0.2);
        let cps = train_stream(&lang, Mechanism::Absorbing, &s, &config, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoints(dir.path(), 2, &config, &cps).unwrap();
        let (manifest, loaded) = load_checkpoints(dir.path()).unwrap();
        assert_eq!(manifest.tokens_seen, vec![20, 200]);
        assert_eq!(loaded, cps);
    }
}
