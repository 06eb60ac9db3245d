//! Property tests of the invariants every module promises.

use dlmlab::corruption::{forward_token_prob, marginal_exact, ForwardKernelSpec};
use dlmlab::domain::all_states;
use dlmlab::learner::{train_stream, LearnerConfig};
use dlmlab::probes::{
    build_context_bank, direct_probes, indirect_frequency_probes, indirect_support_probe,
    BankParams, DirectProbeConfig, NegativeStrategy, WindowScorer,
};
use dlmlab::reverse::{
    kernel_from_posterior_at, posterior_exact, reverse_token_kernel_exact, Denoiser, ExactKernel,
    Parameterization, ReverseKernel, ScoreEntry, ScoreTable, UniformDenoiser,
};
use dlmlab::samplers::{sample_many, SamplerConfig, SamplerMode};
use dlmlab::support::{classify_edit, projection, SupportOracle};
use dlmlab::theory::distortion_factor;
use dlmlab::{
    make_schedule, ExplicitDistribution, Instance, LanguageSpec, Mechanism, ScheduleKind, Token,
    TokenSeq, MASK,
};
use proptest::prelude::*;

fn mechanism() -> impl Strategy<Value = Mechanism> {
    prop_oneof![Just(Mechanism::Uniform), Just(Mechanism::Absorbing)]
}

/// Random explicit distribution with `K <= 3`, `H <= 3`.
fn small_instance() -> impl Strategy<Value = ExplicitDistribution> {
    (2usize..=3, 1usize..=3).prop_flat_map(|(k, h)| {
        let n = k.pow(h as u32);
        (Just(k), Just(h), prop::collection::vec(0.0f64..1.0, n)).prop_map(|(k, h, w)| {
            let states = all_states(k, h, Mechanism::Uniform);
            let (mut support, mut weights) = (Vec::new(), Vec::new());
            for (s, &x) in states.iter().zip(&w) {
                if x > 0.6 {
                    support.push(s.clone());
                    weights.push(x);
                }
            }
            if support.is_empty() {
                support.push(states[0].clone());
                weights.push(1.0);
            }
            ExplicitDistribution::from_weights(k, h, support, weights).unwrap()
        })
    })
}

fn brute_distance(dist: &ExplicitDistribution, x: &[Token]) -> usize {
    dist.support()
        .iter()
        .map(|z| z.iter().zip(x).filter(|(a, b)| a != b).count())
        .min()
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn schedules_are_consistent(steps in 1usize..3000, cosine in any::<bool>()) {
        let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::LinearCumulative };
        let s = make_schedule(kind, steps).unwrap();
        let mut keep = 1.0;
        for t in 1..=steps {
            keep *= 1.0 - s.beta(t);
            prop_assert!((s.sigma(t) - (1.0 - keep)).abs() < 1e-12);
        }
        prop_assert!(s.consistency_error() < 1e-12);
    }

    #[test]
    fn distributions_are_normalized(dist in small_instance()) {
        prop_assert!((dist.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn edits_move_distance_by_at_most_one(dist in small_instance(), mech in mechanism(), pick in any::<prop::sample::Index>()) {
        let states = all_states(dist.vocab(), dist.len(), mech);
        let x = &states[pick.index(states.len())];
        prop_assert_eq!(dist.distance(x).unwrap(), brute_distance(&dist, x));
        prop_assert!(projection(x, &dist).unwrap().mass > 0.0);
        for h in 0..x.len() {
            if mech == Mechanism::Absorbing && x[h] != MASK {
                continue;
            }
            for y in 1..=dist.vocab() as Token {
                if y == x[h] {
                    continue;
                }
                let dd = classify_edit(x, h, y, &dist, mech).unwrap().delta_d;
                prop_assert!(dd.abs() <= 1);
                if mech == Mechanism::Absorbing {
                    prop_assert!(dd == -1 || dd == 0);
                }
            }
        }
    }

    #[test]
    fn walk_distance_matches_enumeration(k in 2usize..=6, h in 2usize..=5, seed in any::<u64>()) {
        let lang = LanguageSpec::new(k, h).unwrap();
        let dist = lang.to_explicit(1 << 20).unwrap();
        let states = all_states(k, h, Mechanism::Absorbing);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        for _ in 0..20 {
            let x = &states[rand::Rng::gen_range(&mut rng, 0..states.len())];
            prop_assert_eq!(lang.distance(x).unwrap(), brute_distance(&dist, x));
            let (a, b) = (lang.projection(x).unwrap(), dist.projection(x).unwrap());
            prop_assert!((a.mass - b.mass).abs() < 1e-12);
            prop_assert_eq!(a.witness_count, b.witness_count);
            if x.is_clean() {
                let pairwise = x.windows(2).all(|w| (w[0] as i64 - w[1] as i64).abs() <= 1);
                prop_assert_eq!(lang.contains_clean(x), pairwise);
            }
        }
    }

    #[test]
    fn forward_rows_are_stochastic(k in 2usize..=20, beta in 0.001f64..=1.0, mech in mechanism()) {
        let spec = ForwardKernelSpec::new(mech, beta).unwrap();
        let from: Vec<Token> = match mech {
            Mechanism::Uniform => (1..=k as Token).collect(),
            Mechanism::Absorbing => (0..=k as Token).collect(),
        };
        for &a in &from {
            let row: f64 = from.iter().map(|&b| forward_token_prob(spec, a, b, k).unwrap()).sum();
            prop_assert!((row - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn chapman_kolmogorov(dist in small_instance(), mech in mechanism(), steps in 2usize..30, t_frac in 0.0f64..1.0) {
        let s = make_schedule(ScheduleKind::LinearCumulative, steps).unwrap();
        let t = 2 + ((steps - 2) as f64 * t_frac) as usize;
        let spec = ForwardKernelSpec::new(mech, s.beta(t)).unwrap();
        let states = all_states(dist.vocab(), dist.len(), mech);
        for y in &states {
            let pushed: f64 = states
                .iter()
                .map(|x| {
                    let step: f64 = x.iter().zip(y.iter()).map(|(&a, &b)| forward_token_prob(spec, a, b, dist.vocab()).unwrap()).product();
                    marginal_exact(&dist, &s, t - 1, x, mech).unwrap() * step
                })
                .sum();
            prop_assert!((pushed - marginal_exact(&dist, &s, t, y, mech).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn reverse_kernels_are_stochastic_and_match_bayes(dist in small_instance(), mech in mechanism(), t in 1usize..=12, pick in any::<prop::sample::Index>()) {
        let s = make_schedule(ScheduleKind::LinearCumulative, 12).unwrap();
        let states: Vec<TokenSeq> = all_states(dist.vocab(), dist.len(), mech)
            .into_iter()
            .filter(|x| marginal_exact(&dist, &s, t, x, mech).unwrap() > 0.0)
            .collect();
        let x = &states[pick.index(states.len())];
        let post = posterior_exact(&dist, &s, t, x, mech).unwrap();
        for h in 0..x.len() {
            let exact = reverse_token_kernel_exact(&dist, &s, t, x, h, mech).unwrap();
            prop_assert!((exact.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            let bayes = kernel_from_posterior_at(post.position(h), x[h], t, &s, mech, Parameterization::Bayes).unwrap();
            for (a, b) in exact.iter().zip(&bayes) {
                prop_assert!((a - b).abs() < 1e-10);
            }
            if mech == Mechanism::Absorbing && x[h] == MASK {
                for y in 1..=dist.vocab() as Token {
                    if classify_edit(x, h, y, &dist, mech).unwrap().delta_d >= 0 {
                        prop_assert!(exact[y as usize] <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn absorbing_parameterizations_agree(k in 2usize..=8, raw in prop::collection::vec(0.001f64..1.0, 8), t in 1usize..=50) {
        let s = make_schedule(ScheduleKind::Cosine, 50).unwrap();
        let total: f64 = raw[..k].iter().sum();
        let post: Vec<f64> = raw[..k].iter().map(|w| w / total).collect();
        let kernels: Vec<Vec<f64>> = [Parameterization::Bayes, Parameterization::D3pm, Parameterization::Subs]
            .iter()
            .map(|&p| kernel_from_posterior_at(&post, MASK, t, &s, Mechanism::Absorbing, p).unwrap())
            .collect();
        for other in &kernels[1..] {
            for (a, b) in kernels[0].iter().zip(other) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distortion_is_symmetric_and_scales(scores in prop::collection::vec(0.01f64..100.0, 1..10), c in 0.01f64..100.0) {
        let table = |v: &[f64]| ScoreTable {
            state: TokenSeq::new(vec![1]),
            sigma: 0.1,
            t: 1,
            normalizer_kind: Mechanism::Uniform.into(),
            entries: v.iter().enumerate().map(|(i, &score)| ScoreEntry { h: 0, y: i as Token + 2, score, delta_d: None }).collect(),
        };
        let a = table(&scores);
        let b = table(&scores.iter().map(|s| s * c).collect::<Vec<_>>());
        let ab = distortion_factor(&a, &b).unwrap();
        prop_assert!((ab - distortion_factor(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ab - c.max(1.0 / c)).abs() < 1e-9 * ab);
    }

    #[test]
    fn absorbing_sampler_never_remasks(dist in small_instance(), seed in any::<u64>()) {
        let kernel = ExactKernel { dist: &dist, mechanism: Mechanism::Absorbing };
        let s = make_schedule(ScheduleKind::LinearCumulative, 10).unwrap();
        for mode in [SamplerMode::Ancestral, SamplerMode::Threshold] {
            let out = sample_many(&kernel, &s, dist.len(), &SamplerConfig::new(mode), 8, seed).unwrap();
            prop_assert_eq!(&out, &sample_many(&kernel, &s, dist.len(), &SamplerConfig::new(mode), 8, seed).unwrap());
            for o in &out {
                prop_assert!(o.sample.is_clean());
                for (a, b) in o.phase1.iter().zip(o.sample.iter()) {
                    prop_assert!(*a == MASK || a == b);
                }
                prop_assert_eq!(o.filled, o.phase1.mask_count() - o.edits.len());
            }
        }
    }
}

/// Wraps a model and applies `p -> p^3 + 2p` to every score.
struct Monotone<D>(D);

impl<D: Denoiser> Denoiser for Monotone<D> {
    fn vocab(&self) -> usize {
        self.0.vocab()
    }

    fn clean_posterior(&self, x: &TokenSeq, h: usize, sigma: f64) -> dlmlab::Result<Vec<f64>> {
        Ok(self
            .0
            .clean_posterior(x, h, sigma)?
            .into_iter()
            .map(|p| p * p * p + 2.0 * p)
            .collect())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    // Under uniform corruption the window scorer averages over center tokens,
    // which a nonlinear transform does not commute with, so the relabeling
    // property is stated for absorbing models.
    #[test]
    fn probes_depend_only_on_rankings(seed in 0u64..1000, samples in 1usize..200) {
        let lang = LanguageSpec::new(6, 6).unwrap();
        let inst = Instance::Walk(lang.clone());
        let s = make_schedule(ScheduleKind::LinearCumulative, 20).unwrap();
        let cfg = LearnerConfig { samples, checkpoint_grid: vec![samples], ..LearnerConfig::default() };
        let model = train_stream(&inst, Mechanism::Absorbing, &s, &cfg, seed).unwrap().pop().unwrap().model;
        let warped = Monotone(&model);
        let dcfg = DirectProbeConfig { n_samples: 60, ..DirectProbeConfig::default() };
        let a = direct_probes(&model, &lang, Mechanism::Absorbing, &dcfg, seed).unwrap();
        let b = direct_probes(&warped, &lang, Mechanism::Absorbing, &dcfg, seed).unwrap();
        prop_assert_eq!(&a, &b);
        for v in [a.support, a.top1, a.pairwise] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let bank = build_context_bank(&lang.sample_corpus(3000, 5), 6, BankParams::default()).unwrap();
        let scorer = WindowScorer::for_language(&lang, Mechanism::Absorbing, seed).unwrap();
        for strat in NegativeStrategy::ALL {
            let x = indirect_support_probe(&model, &bank, &scorer, strat, 3, seed).unwrap();
            let y = indirect_support_probe(&warped, &bank, &scorer, strat, 3, seed).unwrap();
            prop_assert_eq!(x, y);
        }
        prop_assert_eq!(
            indirect_frequency_probes(&model, &bank, &scorer).unwrap(),
            indirect_frequency_probes(&warped, &bank, &scorer).unwrap()
        );
    }
}

#[test]
fn uniform_model_scores_half_on_pairwise_probes() {
    let lang = LanguageSpec::new(8, 6).unwrap();
    let model = UniformDenoiser { k: 8 };
    for mech in [Mechanism::Uniform, Mechanism::Absorbing] {
        let cfg = DirectProbeConfig {
            n_samples: 100,
            ..DirectProbeConfig::default()
        };
        let r = direct_probes(&model, &lang, mech, &cfg, 1).unwrap();
        assert_eq!(r.pairwise, 0.5);
        let bank =
            build_context_bank(&lang.sample_corpus(5000, 2), 8, BankParams::default()).unwrap();
        let scorer = WindowScorer::for_language(&lang, mech, 1).unwrap();
        assert_eq!(
            indirect_frequency_probes(&model, &bank, &scorer)
                .unwrap()
                .pairwise,
            0.5
        );
    }
}

#[test]
fn walk_probabilities_sum_to_one() {
    for (k, h) in [(2, 8), (5, 5), (16, 4), (20, 4)] {
        let lang = LanguageSpec::new(k, h).unwrap();
        let dist = lang.to_explicit(20_000).unwrap();
        let total: f64 = all_states(k, h, Mechanism::Uniform)
            .iter()
            .map(|s| lang.prob(s))
            .sum();
        assert!((total - 1.0).abs() < 1e-12, "{k} {h} {total}");
        assert!(dist.support().iter().all(|s| lang.prob(s) > 0.0));
    }
}

#[test]
fn exact_kernel_routes_agree() {
    // the batched kernel of every position equals the per-position kernel
    let dist = ExplicitDistribution::new(
        3,
        3,
        vec![
            TokenSeq::new(vec![1, 2, 3]),
            TokenSeq::new(vec![2, 2, 2]),
            TokenSeq::new(vec![3, 1, 1]),
        ],
        vec![0.5, 0.3, 0.2],
    )
    .unwrap();
    let s = make_schedule(ScheduleKind::Cosine, 16).unwrap();
    for mech in [Mechanism::Uniform, Mechanism::Absorbing] {
        let kernel = ExactKernel {
            dist: &dist,
            mechanism: mech,
        };
        for x in all_states(3, 3, mech) {
            for t in [1, 5, 16] {
                if marginal_exact(&dist, &s, t, &x, mech).unwrap() == 0.0 {
                    continue;
                }
                let all = kernel.kernels(&x, t, &s).unwrap();
                for (h, row) in all.iter().enumerate() {
                    let one = reverse_token_kernel_exact(&dist, &s, t, &x, h, mech).unwrap();
                    for (a, b) in row.iter().zip(&one) {
                        assert!((a - b).abs() < 1e-10, "{x} {t} {h}");
                    }
                }
            }
        }
    }
}
