//! Experiment configs, suite orchestration and report aggregation.
//!
//! A config names one data instance and any subset of the check suites.
//! Running it writes every suite's CSV/JSON payloads plus `manifest.json`
//! and `summary.txt` into one output directory. Outputs carry no timestamps
//! or host details, so reruns are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{ExplicitDistribution, Mechanism};
use crate::error::{LabError, Result};
use crate::instance::Instance;
use crate::language::{LanguageSpec, WalkParams, ENUMERATION_LIMIT};
use crate::learner::{train_stream, LearnerConfig};
use crate::probes::{
    build_context_bank, curves_to_csv, direct_probes, indirect_frequency_probes,
    indirect_support_probe, synthetic_oracle_probes, transition_time, BankParams,
    DirectProbeConfig, NegativeStrategy, ProbeCurve, WindowScorer, VALIDATION_OFFSET,
};
use crate::reverse::ModelKernel;
use crate::samplers::{
    compare_samplers, evaluate_samples, sample_many, samples_to_csv, SamplerConfig, SamplerMode,
};
use crate::schedule::{make_schedule, NoiseSchedule, ScheduleKind, DEFAULT_FINENESS};
use crate::support::SupportOracle;
use crate::theory::{
    absorbing_parameterization_gap, default_edits, example_multiplicative_vs_tv,
    score_entropy_gaps, search_bayes_d3pm_gap, threshold_profile, verify_marginal_expansion,
    verify_rate_separation, RateTolerances, DEFAULT_SIGMA_GRID,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub instance: Instance,
    #[serde(default)]
    pub suites: Suites,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Suites {
    pub rate_separation: Option<RateSuite>,
    pub marginal_expansion: Option<MarginalSuite>,
    pub threshold: Option<ThresholdSuite>,
    pub example_b1: Option<ExampleB1Suite>,
    pub parameterization: Option<ParameterizationSuite>,
    pub prediction1: Option<Prediction1Suite>,
    pub prediction2: Option<Prediction2Suite>,
}

fn both() -> Vec<Mechanism> {
    vec![Mechanism::Uniform, Mechanism::Absorbing]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateSuite {
    pub mechanisms: Vec<Mechanism>,
    pub sigma_grid: Vec<f64>,
    pub fineness: f64,
    pub tolerances: RateTolerances,
}

impl Default for RateSuite {
    fn default() -> Self {
        RateSuite {
            mechanisms: both(),
            sigma_grid: DEFAULT_SIGMA_GRID.to_vec(),
            fineness: DEFAULT_FINENESS,
            tolerances: RateTolerances::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginalSuite {
    pub mechanisms: Vec<Mechanism>,
    pub sigma_grid: Vec<f64>,
    /// Largest allowed ratio of scaled error at the smallest level to that at
    /// the largest.
    pub max_growth: f64,
}

impl Default for MarginalSuite {
    fn default() -> Self {
        MarginalSuite {
            mechanisms: both(),
            sigma_grid: vec![0.1, 0.03, 0.01, 0.003, 0.001, 1e-4],
            max_growth: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdSuite {
    pub mechanisms: Vec<Mechanism>,
    pub sigma_grid: Vec<f64>,
    pub exponent: f64,
    /// Mechanisms whose accuracy gates the suite; others are reported only.
    pub gate: Vec<Mechanism>,
}

impl Default for ThresholdSuite {
    fn default() -> Self {
        ThresholdSuite {
            mechanisms: both(),
            sigma_grid: vec![0.01, 0.005, 0.002, 0.001],
            exponent: 0.3,
            gate: vec![Mechanism::Uniform],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExampleB1Suite {
    pub sigma: f64,
    pub alpha: f64,
    pub tv_target: f64,
    pub tv_tolerance: f64,
    pub kl_min: f64,
    pub sigma_sequence: Vec<f64>,
}

impl Default for ExampleB1Suite {
    fn default() -> Self {
        ExampleB1Suite {
            sigma: 1e-4,
            alpha: 0.25,
            tv_target: 0.44991,
            tv_tolerance: 1e-4,
            kl_min: 0.40,
            sigma_sequence: vec![1e-3, 1e-4, 1e-5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParameterizationSuite {
    pub states: usize,
    pub posteriors: usize,
    pub absorbing_tolerance: f64,
    pub min_uniform_gap: f64,
    pub loss_steps: usize,
    pub loss_weights: Vec<f64>,
    pub loss_tolerance: f64,
}

impl Default for ParameterizationSuite {
    fn default() -> Self {
        ParameterizationSuite {
            states: 10,
            posteriors: 100,
            absorbing_tolerance: 1e-12,
            min_uniform_gap: 1e-6,
            loss_steps: 8,
            loss_weights: vec![0.0, 0.1, 0.4, 0.9],
            loss_tolerance: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::LinearCumulative,
            steps: 100,
        }
    }
}

impl ScheduleConfig {
    fn build(&self, field: &str) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.steps).map_err(|e| cfg_err(field, e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    pub corpus_size: usize,
    pub corpus_seed: u64,
    pub params: BankParams,
    pub n_neg: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            corpus_size: 100_000,
            corpus_seed: 1_000_003,
            params: BankParams::default(),
            n_neg: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prediction1Suite {
    pub mechanisms: Vec<Mechanism>,
    pub schedule: ScheduleConfig,
    pub learner: LearnerConfig,
    pub direct: DirectProbeConfig,
    pub bank: BankConfig,
    pub q: f64,
    /// Seeds per mechanism that must show support no later than frequency.
    pub min_ordered: usize,
    pub indirect_tolerance: f64,
}

impl Default for Prediction1Suite {
    fn default() -> Self {
        Prediction1Suite {
            mechanisms: both(),
            schedule: ScheduleConfig::default(),
            learner: LearnerConfig::default(),
            direct: DirectProbeConfig::default(),
            bank: BankConfig::default(),
            q: 0.9,
            min_ordered: 4,
            indirect_tolerance: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prediction2Suite {
    pub schedule: ScheduleConfig,
    pub learner: LearnerConfig,
    pub phase2_sigma: f64,
    pub tau: f64,
    pub max_phase2_steps: Option<usize>,
    pub n_samples: usize,
    pub min_gap: f64,
    pub absorbing_tolerance: f64,
}

impl Default for Prediction2Suite {
    fn default() -> Self {
        Prediction2Suite {
            schedule: ScheduleConfig::default(),
            learner: LearnerConfig::default(),
            phase2_sigma: 0.1,
            tau: 0.05,
            max_phase2_steps: None,
            n_samples: 2000,
            min_gap: 0.05,
            absorbing_tolerance: 0.03,
        }
    }
}

fn cfg_err(field: &str, message: impl Into<String>) -> LabError {
    LabError::Config {
        field: field.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let c: ExperimentConfig =
            toml::from_str(s).map_err(|e| cfg_err("config", e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: ExperimentConfig =
            serde_json::from_str(s).map_err(|e| cfg_err("config", e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads TOML, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(cfg_err("name", "must be a nonempty file-name-safe string"));
        }
        if self.seeds.is_empty() {
            return Err(cfg_err("seeds", "must be nonempty"));
        }
        let s = &self.suites;
        let needs_table = s.rate_separation.is_some()
            || s.marginal_expansion.is_some()
            || s.threshold.is_some()
            || s.parameterization.is_some();
        if needs_table {
            self.explicit()
                .map_err(|e| cfg_err("instance", e.to_string()))?;
        }
        if let Some(r) = &s.rate_separation {
            if r.sigma_grid.len() < 3 || r.sigma_grid.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
                return Err(cfg_err(
                    "suites.rate_separation.sigma_grid",
                    "needs at least 3 levels in (0, 1)",
                ));
            }
            if !(r.fineness > 0.0) {
                return Err(cfg_err(
                    "suites.rate_separation.fineness",
                    "must be positive",
                ));
            }
        }
        if let Some(m) = &s.marginal_expansion {
            if m.sigma_grid.len() < 2 || m.sigma_grid.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
                return Err(cfg_err(
                    "suites.marginal_expansion.sigma_grid",
                    "needs at least 2 levels in (0, 1)",
                ));
            }
        }
        if let Some(t) = &s.threshold {
            if t.sigma_grid.is_empty() || t.sigma_grid.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
                return Err(cfg_err(
                    "suites.threshold.sigma_grid",
                    "needs levels in (0, 1)",
                ));
            }
        }
        for (field, p) in [(
            "suites.prediction1",
            s.prediction1.as_ref().map(|p| (&p.learner, &p.schedule)),
        )]
        .into_iter()
        .chain([(
            "suites.prediction2",
            s.prediction2.as_ref().map(|p| (&p.learner, &p.schedule)),
        )]) {
            if let Some((learner, schedule)) = p {
                if self.instance.as_walk().is_none() && field == "suites.prediction1" {
                    return Err(cfg_err(
                        "instance",
                        "the prediction1 suite needs a walk instance",
                    ));
                }
                learner
                    .validate()
                    .map_err(|e| cfg_err(&format!("{field}.learner"), e.to_string()))?;
                schedule.build(&format!("{field}.schedule"))?;
            }
        }
        if let Some(p) = &s.prediction1 {
            if !(p.q > 0.0 && p.q <= 1.0) {
                return Err(cfg_err("suites.prediction1.q", "must lie in (0, 1]"));
            }
        }
        if let Some(p) = &s.prediction2 {
            SamplerConfig {
                mode: SamplerMode::Threshold,
                phase2_sigma: p.phase2_sigma,
                tau: p.tau,
                max_phase2_steps: None,
            }
            .validate()
            .map_err(|e| cfg_err("suites.prediction2", e.to_string()))?;
            if p.n_samples == 0 {
                return Err(cfg_err("suites.prediction2.n_samples", "must be positive"));
            }
        }
        Ok(())
    }

    fn explicit(&self) -> Result<ExplicitDistribution> {
        match &self.instance {
            Instance::Explicit(d) => Ok(d.clone()),
            Instance::Walk(l) => l.to_explicit(ENUMERATION_LIMIT),
        }
    }
}

/// One numeric check. Non-gating checks are reported without affecting the
/// suite verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub target: String,
    pub passed: bool,
    pub gating: bool,
}

impl Check {
    fn new(name: impl Into<String>, value: f64, target: impl Into<String>, passed: bool) -> Self {
        Check {
            name: name.into(),
            value,
            target: target.into(),
            passed,
            gating: true,
        }
    }

    fn info(name: impl Into<String>, value: f64, target: impl Into<String>, passed: bool) -> Self {
        Check {
            gating: false,
            ..Check::new(name, value, target, passed)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub suite: String,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub files: Vec<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub walk: WalkParams,
    pub rate_tolerances: RateTolerances,
    pub bank: BankParams,
    pub fineness: f64,
    pub validation_offset: u64,
}

impl Default for Constants {
    fn default() -> Self {
        Constants {
            walk: WalkParams::default(),
            rate_tolerances: RateTolerances::default(),
            bank: BankParams::default(),
            fineness: DEFAULT_FINENESS,
            validation_offset: VALIDATION_OFFSET,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub constants: Constants,
    pub suites: Vec<SuiteOutcome>,
    pub passed: bool,
}

impl Manifest {
    /// `suite: check` labels of every failed gating check or suite error.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in &self.suites {
            if let Some(e) = &s.error {
                out.push(format!("{}: error: {e}", s.suite));
            }
            for c in s.checks.iter().filter(|c| c.gating && !c.passed) {
                out.push(format!(
                    "{}: {} = {} (target {})",
                    s.suite,
                    c.name,
                    fmt_num(c.value),
                    c.target
                ));
            }
        }
        out
    }
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 || (1e-3..1e4).contains(&v.abs()) {
        format!("{v:.6}")
    } else {
        format!("{v:.6e}")
    }
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl Writer<'_> {
    fn put(&mut self, name: String, contents: &str) -> Result<()> {
        fs::write(self.dir.join(&name), contents)?;
        self.files.push(name);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: String, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.put(name, &text)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.manifest.passed
    }
}

/// Loads, validates and runs a config. Nothing is written when the config
/// does not validate.
pub fn run_experiment(path: &Path, out: Option<&Path>) -> Result<RunOutcome> {
    let config = ExperimentConfig::load(path)?;
    run_config(&config, out)
}

pub fn run_config(config: &ExperimentConfig, out: Option<&Path>) -> Result<RunOutcome> {
    config.validate()?;
    let dir = match (out, &config.output_dir) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(d)) => d.clone(),
        (None, None) => PathBuf::from("out").join(&config.name),
    };
    fs::create_dir_all(&dir)?;
    let s = &config.suites;
    let mut suites = Vec::new();
    macro_rules! suite {
        ($field:ident, $name:literal, $f:ident) => {
            if let Some(cfg) = &s.$field {
                suites.push(run_suite($name, &dir, |w| $f(config, cfg, w)));
            }
        };
    }
    suite!(rate_separation, "rate_separation", rate_suite);
    suite!(marginal_expansion, "marginal_expansion", marginal_suite);
    suite!(threshold, "threshold", threshold_suite);
    suite!(example_b1, "example_b1", example_b1_suite);
    suite!(parameterization, "parameterization", parameterization_suite);
    suite!(prediction1, "prediction1", prediction1_suite);
    suite!(prediction2, "prediction2", prediction2_suite);
    let passed = suites.iter().all(|s| s.passed);
    let manifest = Manifest {
        name: config.name.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        constants: Constants::default(),
        suites,
        passed,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    fs::write(dir.join("summary.txt"), summary_text(&manifest))?;
    Ok(RunOutcome { dir, manifest })
}

fn run_suite(
    name: &str,
    dir: &Path,
    f: impl FnOnce(&mut Writer) -> Result<Vec<Check>>,
) -> SuiteOutcome {
    let mut w = Writer {
        dir,
        files: Vec::new(),
    };
    match f(&mut w) {
        Ok(checks) => SuiteOutcome {
            suite: name.into(),
            passed: checks.iter().all(|c| c.passed || !c.gating),
            checks,
            files: w.files,
            error: None,
        },
        Err(e) => SuiteOutcome {
            suite: name.into(),
            passed: false,
            checks: Vec::new(),
            files: w.files,
            error: Some(e.to_string()),
        },
    }
}

fn rate_suite(config: &ExperimentConfig, suite: &RateSuite, w: &mut Writer) -> Result<Vec<Check>> {
    let dist = config.explicit()?;
    let mut checks = Vec::new();
    for &mech in &suite.mechanisms {
        let edits = default_edits(&dist, mech);
        let report = verify_rate_separation(
            &dist,
            mech,
            &suite.sigma_grid,
            suite.fineness,
            &edits,
            suite.tolerances,
        )?;
        w.put(format!("rate_separation_{mech}.csv"), &report.to_csv())?;
        w.json(format!("rate_separation_{mech}.json"), &report)?;
        for dd in report.classes() {
            let class: Vec<_> = report.edits.iter().filter(|e| e.delta_d == dd).collect();
            let ok = class.iter().all(|e| e.passed());
            if class[0].fitted_exponent.is_none() {
                let mass = class.iter().map(|e| e.max_kernel_mass).fold(0.0, f64::max);
                checks.push(Check::new(
                    format!("{mech} delta_d={dd} max kernel mass"),
                    mass,
                    format!("<= {:e}", suite.tolerances.zero_mass),
                    ok,
                ));
            } else {
                let slope_err = class
                    .iter()
                    .map(|e| {
                        e.fitted_exponent
                            .map_or(f64::INFINITY, |s| (s - e.target_exponent).abs())
                    })
                    .fold(0.0, f64::max);
                let coef_err = class
                    .iter()
                    .map(|e| (e.fitted_coefficient / e.coefficient_target - 1.0).abs())
                    .fold(0.0, f64::max);
                checks.push(Check::new(
                    format!("{mech} delta_d={dd} max slope error"),
                    slope_err,
                    format!("<= {}", suite.tolerances.exponent),
                    class.iter().all(|e| e.exponent_ok),
                ));
                checks.push(Check::new(
                    format!("{mech} delta_d={dd} max coefficient relative error"),
                    coef_err,
                    format!("<= {}", suite.tolerances.coefficient_rel),
                    class.iter().all(|e| e.coefficient_ok),
                ));
            }
        }
    }
    Ok(checks)
}

fn marginal_suite(
    config: &ExperimentConfig,
    suite: &MarginalSuite,
    w: &mut Writer,
) -> Result<Vec<Check>> {
    let dist = config.explicit()?;
    let mut checks = Vec::new();
    for &mech in &suite.mechanisms {
        let report = verify_marginal_expansion(&dist, mech, &suite.sigma_grid)?;
        w.json(format!("marginal_expansion_{mech}.json"), &report)?;
        let growth = report.states.iter().map(|s| s.growth).fold(0.0, f64::max);
        let bounded = report.states.iter().all(|s| s.within_bound);
        checks.push(Check::new(
            format!("{mech} scaled error within bound"),
            f64::from(u8::from(bounded)),
            "1",
            bounded,
        ));
        checks.push(Check::new(
            format!("{mech} max growth"),
            growth,
            format!("<= {}", suite.max_growth),
            growth <= suite.max_growth,
        ));
    }
    Ok(checks)
}

fn threshold_suite(
    config: &ExperimentConfig,
    suite: &ThresholdSuite,
    w: &mut Writer,
) -> Result<Vec<Check>> {
    let dist = config.explicit()?;
    let mut checks = Vec::new();
    for &mech in &suite.mechanisms {
        let profile = threshold_profile(
            &dist,
            mech,
            &suite.sigma_grid,
            suite.exponent,
            config.seeds[0],
        )?;
        w.json(format!("threshold_{mech}.json"), &profile)?;
        let exact = profile.accuracy_exact.iter().copied().fold(1.0, f64::min);
        let perturbed = profile
            .accuracy_perturbed
            .iter()
            .copied()
            .fold(1.0, f64::min);
        let gating = suite.gate.contains(&mech);
        checks.push(Check {
            gating,
            ..Check::new(
                format!("{mech} min accuracy, exact scores"),
                exact,
                "1",
                exact == 1.0,
            )
        });
        checks.push(Check {
            gating,
            ..Check::new(
                format!("{mech} min accuracy, distorted scores"),
                perturbed,
                "1",
                perturbed == 1.0,
            )
        });
        checks.push(Check::info(
            format!("{mech} sigma* with distorted scores"),
            profile.sigma_star_perturbed.unwrap_or(0.0),
            "reported",
            true,
        ));
    }
    Ok(checks)
}

fn example_b1_suite(
    _config: &ExperimentConfig,
    suite: &ExampleB1Suite,
    w: &mut Writer,
) -> Result<Vec<Check>> {
    let main = example_multiplicative_vs_tv(suite.sigma, suite.alpha)?;
    let seq: Vec<_> = suite
        .sigma_sequence
        .iter()
        .map(|&s| example_multiplicative_vs_tv(s, suite.alpha))
        .collect::<Result<_>>()?;
    w.json(
        "example_b1.json".into(),
        &serde_json::json!({ "point": main, "sequence": seq }),
    )?;
    let expected = suite.sigma.powf(-suite.alpha);
    let mut order: Vec<_> = seq.clone();
    order.sort_by(|a, b| b.sigma.total_cmp(&a.sigma));
    let increasing =
        order.windows(2).all(|p| p[1].tv > p[0].tv) && order.iter().all(|e| e.tv < 0.5);
    Ok(vec![
        Check::new(
            "distortion",
            main.distortion,
            format!("{expected}"),
            (main.distortion - expected).abs() <= 1e-9 * expected,
        ),
        Check::new(
            "tv",
            main.tv,
            format!("{} +- {}", suite.tv_target, suite.tv_tolerance),
            (main.tv - suite.tv_target).abs() <= suite.tv_tolerance,
        ),
        Check::new(
            "kl(p||q)",
            main.kl_pq,
            format!(">= {}", suite.kl_min),
            main.kl_pq >= suite.kl_min,
        ),
        Check::new(
            "kl(q||p)",
            main.kl_qp,
            format!(">= {}", suite.kl_min),
            main.kl_qp >= suite.kl_min,
        ),
        Check::new(
            "tv increasing as sigma decreases",
            f64::from(u8::from(increasing)),
            "1",
            increasing,
        ),
    ])
}

fn parameterization_suite(
    config: &ExperimentConfig,
    suite: &ParameterizationSuite,
    w: &mut Writer,
) -> Result<Vec<Check>> {
    let dist = config.explicit()?;
    let absorbing = absorbing_parameterization_gap(
        dist.vocab(),
        dist.len(),
        suite.states,
        suite.posteriors,
        config.seeds[0],
    )?;
    let uniform = search_bayes_d3pm_gap(suite.min_uniform_gap)?;
    let gaps = score_entropy_gaps(&dist, suite.loss_steps, &suite.loss_weights)?;
    let spread = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - gaps.iter().copied().fold(f64::INFINITY, f64::min);
    w.json(
        "parameterization.json".into(),
        &serde_json::json!({ "absorbing_gap": absorbing, "uniform_counterexample": uniform, "loss_gaps": gaps }),
    )?;
    let ugap = uniform.as_ref().map_or(0.0, |u| u.gap);
    Ok(vec![
        Check::new(
            "absorbing bayes/d3pm/subs max gap",
            absorbing,
            format!("<= {:e}", suite.absorbing_tolerance),
            absorbing <= suite.absorbing_tolerance,
        ),
        Check::new(
            "uniform bayes/d3pm counterexample gap",
            ugap,
            format!("> {:e}", suite.min_uniform_gap),
            ugap > suite.min_uniform_gap,
        ),
        Check::new(
            "score entropy minus weighted ce spread",
            spread,
            format!("<= {:e}", suite.loss_tolerance),
            spread <= suite.loss_tolerance,
        ),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellTransitions {
    pub mechanism: Mechanism,
    pub seed: u64,
    pub direct_support: u64,
    pub direct_pairwise: u64,
    pub indirect_support: Vec<(NegativeStrategy, u64)>,
    pub indirect_pairwise: u64,
    pub oracle_support: u64,
    pub oracle_pairwise: u64,
    /// Mean absolute gap between the indirect and oracle pairwise curves.
    pub indirect_oracle_gap: f64,
}

/// Trains one (mechanism, seed) cell and probes every checkpoint.
pub fn prediction1_cell(
    lang: &LanguageSpec,
    mechanism: Mechanism,
    seed: u64,
    suite: &Prediction1Suite,
    bank: &crate::probes::ContextBank,
) -> Result<(Vec<ProbeCurve>, CellTransitions)> {
    let schedule = suite.schedule.build("schedule")?;
    let cps = train_stream(
        &Instance::Walk(lang.clone()),
        mechanism,
        &schedule,
        &suite.learner,
        seed,
    )?;
    let scorer = WindowScorer::for_language(lang, mechanism, seed)?;
    let ticks: Vec<u64> = cps.iter().map(|c| c.tokens_seen).collect();
    let mut cols: Vec<(String, Vec<f64>)> = [
        "direct_support",
        "direct_top1",
        "direct_pairwise",
        "indirect_support_freq_matched",
        "indirect_support_uniform",
        "indirect_support_frequent",
        "indirect_top1",
        "indirect_pairwise",
        "oracle_support",
        "oracle_pairwise",
    ]
    .iter()
    .map(|n| (n.to_string(), Vec::with_capacity(cps.len())))
    .collect();
    for c in &cps {
        let d = direct_probes(&c.model, lang, mechanism, &suite.direct, seed)?;
        let mut row = vec![d.support, d.top1, d.pairwise];
        for strat in NegativeStrategy::ALL {
            row.push(
                indirect_support_probe(&c.model, bank, &scorer, strat, suite.bank.n_neg, seed)?
                    .accuracy,
            );
        }
        let f = indirect_frequency_probes(&c.model, bank, &scorer)?;
        row.extend([f.top1, f.pairwise]);
        let o = synthetic_oracle_probes(&c.model, lang, bank, &scorer, suite.bank.n_neg, seed)?;
        row.extend([o.support_direct, o.pairwise_direct]);
        cols.iter_mut().zip(row).for_each(|(c, v)| c.1.push(v));
    }
    let curves: Vec<ProbeCurve> = cols
        .into_iter()
        .map(|(n, v)| ProbeCurve::new(n, ticks.clone(), v))
        .collect::<Result<_>>()?;
    let tau = |i: usize| transition_time(&curves[i], suite.q);
    let gap = curves[7]
        .values
        .iter()
        .zip(&curves[9].values)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / ticks.len() as f64;
    let cell = CellTransitions {
        mechanism,
        seed,
        direct_support: tau(0)?,
        direct_pairwise: tau(2)?,
        indirect_support: NegativeStrategy::ALL
            .iter()
            .enumerate()
            .map(|(i, &s)| Ok((s, tau(3 + i)?)))
            .collect::<Result<_>>()?,
        indirect_pairwise: tau(7)?,
        oracle_support: tau(8)?,
        oracle_pairwise: tau(9)?,
        indirect_oracle_gap: gap,
    };
    Ok((curves, cell))
}

fn prediction1_suite(
    config: &ExperimentConfig,
    suite: &Prediction1Suite,
    w: &mut Writer,
) -> Result<Vec<Check>> {
    let lang = config.instance.as_walk().expect("validated");
    let corpus = lang.sample_corpus(suite.bank.corpus_size, suite.bank.corpus_seed);
    let bank = build_context_bank(&corpus, lang.vocab(), suite.bank.params)?;
    w.put("context_bank.json".into(), &bank.to_json()?)?;
    let cells: Vec<(Mechanism, u64)> = suite
        .mechanisms
        .iter()
        .flat_map(|&m| config.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results: Vec<(Vec<ProbeCurve>, CellTransitions)> = cells
        .par_iter()
        .map(|&(m, s)| prediction1_cell(lang, m, s, suite, &bank))
        .collect::<Result<_>>()?;
    let mut checks = Vec::new();
    for (curves, cell) in &results {
        w.put(
            format!("prediction1_{}_seed{}.csv", cell.mechanism, cell.seed),
            &curves_to_csv(curves)?,
        )?;
    }
    let cells: Vec<&CellTransitions> = results.iter().map(|r| &r.1).collect();
    w.json("prediction1_transitions.json".into(), &cells)?;
    let grid = &results[0].0[0].checkpoints;
    let index = |t: u64| {
        grid.iter()
            .position(|&g| g == t)
            .expect("transition is a checkpoint") as i64
    };
    for &mech in &suite.mechanisms {
        let mine: Vec<&&CellTransitions> = cells.iter().filter(|c| c.mechanism == mech).collect();
        let ordered = mine
            .iter()
            .filter(|c| c.direct_support <= c.direct_pairwise)
            .count();
        let need = suite.min_ordered.min(mine.len());
        checks.push(Check::new(
            format!("{mech} seeds with support transition <= pairwise transition"),
            ordered as f64,
            format!(">= {need} of {}", mine.len()),
            ordered >= need,
        ));
        let gap = mine
            .iter()
            .map(|c| c.indirect_oracle_gap)
            .fold(0.0, f64::max);
        checks.push(Check::new(
            format!("{mech} indirect vs oracle pairwise mean abs gap"),
            gap,
            format!("<= {}", suite.indirect_tolerance),
            gap <= suite.indirect_tolerance,
        ));
        let spread = mine
            .iter()
            .map(|c| {
                let idx: Vec<i64> = c.indirect_support.iter().map(|&(_, t)| index(t)).collect();
                idx.iter().max().unwrap() - idx.iter().min().unwrap()
            })
            .max()
            .unwrap_or(0);
        checks.push(Check::info(
            format!("{mech} negative strategies transition spread (checkpoints)"),
            spread as f64,
            "<= 1",
            spread <= 1,
        ));
    }
    Ok(checks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerRow {
    pub mechanism: Mechanism,
    pub mode: SamplerMode,
    pub frac_in_support: f64,
    pub mean_distance: f64,
    pub truncated: usize,
    pub win_vs_ancestral: f64,
    pub draw_vs_ancestral: f64,
    pub loss_vs_ancestral: f64,
}

fn prediction2_suite(
    config: &ExperimentConfig,
    suite: &Prediction2Suite,
    w: &mut Writer,
) -> Result<Vec<Check>> {
    let inst = &config.instance;
    let schedule = suite.schedule.build("schedule")?;
    let seed = config.seeds[0];
    let h = inst.seq_len();
    let mut rows = Vec::new();
    let mut diffs = Vec::new();
    for mech in [Mechanism::Uniform, Mechanism::Absorbing] {
        let cps = train_stream(inst, mech, &schedule, &suite.learner, seed)?;
        let model = &cps.last().expect("nonempty grid").model;
        let kernel = ModelKernel::new(model, mech);
        let run = |mode| {
            let cfg = SamplerConfig {
                mode,
                phase2_sigma: suite.phase2_sigma,
                tau: suite.tau,
                max_phase2_steps: suite.max_phase2_steps,
            };
            sample_many(&kernel, &schedule, h, &cfg, suite.n_samples, seed)
        };
        let base = run(SamplerMode::Ancestral)?;
        let base_eval = evaluate_samples(&base, inst)?;
        for mode in [
            SamplerMode::Ancestral,
            SamplerMode::Threshold,
            SamplerMode::Hardmax,
        ] {
            let out = if mode == SamplerMode::Ancestral {
                base.clone()
            } else {
                run(mode)?
            };
            w.put(
                format!("samples_{mech}_{}.csv", mode.as_str()),
                &samples_to_csv(&out, inst)?,
            )?;
            let e = evaluate_samples(&out, inst)?;
            let c = compare_samplers(&out, &base, inst)?;
            if mode == SamplerMode::Threshold {
                diffs.push((mech, e.frac_in_support - base_eval.frac_in_support));
            }
            rows.push(SamplerRow {
                mechanism: mech,
                mode,
                frac_in_support: e.frac_in_support,
                mean_distance: e.mean_distance,
                truncated: e.truncated,
                win_vs_ancestral: c.win,
                draw_vs_ancestral: c.draw,
                loss_vs_ancestral: c.loss,
            });
        }
    }
    w.json("prediction2_summary.json".into(), &rows)?;
    let (du, da) = (diffs[0].1, diffs[1].1);
    let anc: Vec<f64> = rows
        .iter()
        .filter(|r| r.mode == SamplerMode::Ancestral)
        .map(|r| r.frac_in_support)
        .collect();
    Ok(vec![
        Check::new(
            "uniform gain minus absorbing gain",
            du - da,
            format!(">= {}", suite.min_gap),
            du - da >= suite.min_gap,
        ),
        Check::new(
            "absorbing gain",
            da,
            format!("within +- {}", suite.absorbing_tolerance),
            da.abs() <= suite.absorbing_tolerance,
        ),
        Check::info("uniform gain", du, "reported", true),
        Check::info(
            "uniform ancestral in-support fraction",
            anc[0],
            "reported",
            true,
        ),
        Check::info(
            "absorbing ancestral in-support fraction",
            anc[1],
            "reported",
            true,
        ),
    ])
}

pub fn summary_text(m: &Manifest) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "experiment {} (version {})", m.name, m.version);
    for s in &m.suites {
        let _ = writeln!(
            out,
            "[{}] {}",
            if s.passed { "PASS" } else { "FAIL" },
            s.suite
        );
        if let Some(e) = &s.error {
            let _ = writeln!(out, "    error: {e}");
        }
        for c in &s.checks {
            let tag = match (c.passed, c.gating) {
                (true, _) => "ok  ",
                (false, true) => "FAIL",
                (false, false) => "info",
            };
            let _ = writeln!(
                out,
                "    {tag} {} = {} (target {})",
                c.name,
                fmt_num(c.value),
                c.target
            );
        }
    }
    let failures = m.failures();
    let _ = writeln!(out, "{} failure(s)", failures.len());
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub passed: bool,
    pub suites: Vec<SuiteOutcome>,
    pub failures: Vec<String>,
}

/// Reads `manifest.json` from `dir`, writes `report.json` next to it and
/// returns the report with its text rendering.
pub fn report(dir: &Path) -> Result<(Report, String)> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(LabError::InvalidArgument(format!(
            "no manifest.json in {}",
            dir.display()
        )));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    let failures = manifest.failures();
    let r = Report {
        name: manifest.name.clone(),
        passed: failures.is_empty(),
        suites: manifest.suites.clone(),
        failures,
    };
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&r)?)?;
    Ok((r, summary_text(&manifest)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"
name = "tiny"
seeds = [3]

[instance]
type = "explicit"
K = 2
H = 2
support = [[1, 1], [2, 2]]
prob = [0.75, 0.25]

[suites.example_b1]
[suites.parameterization]
states = 2
posteriors = 5
loss_steps = 4
"#;

    #[test]
    fn toml_and_json_agree() {
        let a = ExperimentConfig::from_toml(TINY).unwrap();
        let b = ExperimentConfig::from_json(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.suites
                .parameterization
                .as_ref()
                .unwrap()
                .absorbing_tolerance,
            1e-12
        );
    }

    #[test]
    fn bad_configs_name_the_field() {
        let e =
            ExperimentConfig::from_toml(&TINY.replace("seeds = [3]", "seeds = []")).unwrap_err();
        assert!(e.to_string().contains("seeds"), "{e}");
        let e = ExperimentConfig::from_toml(&TINY.replace("states = 2", "statez = 2")).unwrap_err();
        assert!(e.to_string().contains("statez"), "{e}");
        let e = ExperimentConfig::from_toml(&TINY.replace("K = 2", "")).unwrap_err();
        assert!(e.to_string().contains('K'), "{e}");
        let walk =
            "name = \"w\"\n[instance]\ntype = \"walk\"\nK = 16\nH = 16\n[suites.rate_separation]\n";
        let e = ExperimentConfig::from_toml(walk).unwrap_err();
        assert!(e.to_string().contains("instance"), "{e}");
    }

    #[test]
    fn run_report_and_forced_failure() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_toml(TINY).unwrap();
        let run = run_config(&cfg, Some(dir.path())).unwrap();
        assert!(run.passed(), "{}", summary_text(&run.manifest));
        let (r, text) = report(dir.path()).unwrap();
        assert!(r.passed && r.failures.is_empty());
        assert!(text.contains("0 failure(s)"));
        assert!(dir.path().join("report.json").exists());

        let mut strict = cfg.clone();
        strict.suites.example_b1.as_mut().unwrap().kl_min = 10.0;
        let failing = tempfile::tempdir().unwrap();
        let run = run_config(&strict, Some(failing.path())).unwrap();
        assert!(!run.passed());
        let (r, _) = report(failing.path()).unwrap();
        assert_eq!(r.failures.len(), 2);
        assert!(
            r.failures[0].starts_with("example_b1: kl(p||q)"),
            "{:?}",
            r.failures
        );

        let empty = tempfile::tempdir().unwrap();
        assert!(report(empty.path()).is_err());
    }

    #[test]
    fn invalid_config_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        fs::write(
            &path,
            TINY.replace("prob = [0.75, 0.25]", "prob = [0.75, 0.5]"),
        )
        .unwrap();
        let out = dir.path().join("out");
        assert!(run_experiment(&path, Some(&out)).is_err());
        assert!(!out.exists());
    }
}
