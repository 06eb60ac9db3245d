use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dlmlab::experiment::{
    report, run_config, run_experiment, summary_text, ExampleB1Suite, ExperimentConfig, RateSuite,
    Suites, ThresholdSuite,
};
use dlmlab::language::{write_corpus, CorpusMeta, ENUMERATION_LIMIT};
use dlmlab::learner::{
    default_grid, load_checkpoints, save_checkpoints, train_stream, Checkpoint, LearnerConfig,
};
use dlmlab::probes::{
    build_context_bank, curves_to_csv, direct_probes, indirect_frequency_probes,
    indirect_support_probe, transition_time, BankParams, ContextBank, DirectProbeConfig,
    NegativeStrategy, ProbeCurve, WindowScorer,
};
use dlmlab::reverse::{Denoiser, ExactKernel, ModelKernel, ReverseKernel, ScoreTable};
use dlmlab::samplers::{evaluate_samples, sample_many, samples_to_csv, SamplerConfig, SamplerMode};
use dlmlab::schedule::DEFAULT_FINENESS;
use dlmlab::support::SupportOracle;
use dlmlab::theory::DEFAULT_SIGMA_GRID;
use dlmlab::{
    make_schedule, ExplicitDistribution, Instance, LabError, LanguageSpec, Mechanism,
    NoiseSchedule, Result, ScheduleKind, TokenSeq,
};

#[derive(Parser)]
#[command(
    name = "dlmlab",
    version,
    about = "Exact small-instance experiments for discrete diffusion"
)]
struct Cli {
    /// Master seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print a noise schedule as `t,beta,sigma` rows.
    Schedule(ScheduleArgs),
    /// Walk-language corpora.
    #[command(subcommand)]
    Lang(LangCmd),
    /// Normalized scores of every admissible one-token edit of a state.
    Kernel(KernelArgs),
    /// Run one theory check and write its artifacts.
    #[command(subcommand)]
    Verify(VerifyCmd),
    /// Train the count-based denoiser and save its checkpoints.
    Train(TrainArgs),
    /// Draw samples from a trained model or from the exact kernel.
    Sample(SampleArgs),
    /// Support and frequency probes over checkpoints.
    #[command(subcommand)]
    Probe(ProbeCmd),
    /// Summarize a run directory and flag failed checks.
    Report { dir: PathBuf },
    /// Run an experiment config (TOML or JSON).
    Run { config: PathBuf },
}

#[derive(Subcommand)]
enum LangCmd {
    /// Sample a corpus from the walk language, one string per line.
    Sample {
        #[command(flatten)]
        walk: WalkArgs,
        #[arg(long, default_value_t = 1000)]
        count: usize,
    },
}

#[derive(Subcommand)]
enum VerifyCmd {
    /// Fit small-noise rates of one-token edits.
    Rates {
        #[command(flatten)]
        instance: InstanceArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [Mechanism::Uniform, Mechanism::Absorbing])]
        mechanism: Vec<Mechanism>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SIGMA_GRID)]
        sigma_grid: Vec<f64>,
        #[arg(long, default_value_t = DEFAULT_FINENESS)]
        fineness: f64,
    },
    /// Threshold recovery of support-improving edits.
    Threshold {
        #[command(flatten)]
        instance: InstanceArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [Mechanism::Uniform, Mechanism::Absorbing])]
        mechanism: Vec<Mechanism>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.005, 0.002, 0.001])]
        sigma_grid: Vec<f64>,
        #[arg(long, default_value_t = 0.3)]
        exponent: f64,
    },
    /// Multiplicative distortion versus total variation on a two-point law.
    #[command(name = "example-b1")]
    ExampleB1 {
        #[arg(long, default_value_t = 1e-4)]
        sigma: f64,
        #[arg(long, default_value_t = 0.25)]
        alpha: f64,
    },
}

#[derive(Subcommand)]
enum ProbeCmd {
    /// Support and frequency probes on validation strings.
    Direct {
        #[command(flatten)]
        checkpoints: CheckpointArgs,
        #[command(flatten)]
        walk: WalkArgs,
        #[arg(long, default_value_t = 1000)]
        n_samples: usize,
        #[arg(long, default_value_t = 10)]
        uniform_corruptions: usize,
        /// Noise level handed to the model; defaults to 1/H.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value_t = 0.9)]
        q: f64,
    },
    /// Probes over a context bank of observed (left, right) windows.
    Indirect {
        #[command(flatten)]
        checkpoints: CheckpointArgs,
        #[command(flatten)]
        walk: WalkArgs,
        /// Bank JSON; built from a fresh corpus when absent.
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        corpus_size: usize,
        #[arg(long, default_value_t = 1_000_003)]
        corpus_seed: u64,
        #[arg(long, default_value_t = 8)]
        min_count: u64,
        #[arg(long, default_value_t = 8192)]
        max_contexts: usize,
        #[arg(long, default_value_t = 32)]
        candidate_cap: usize,
        #[arg(long, default_value = "freq_matched")]
        strategy: NegativeStrategy,
        #[arg(long, default_value_t = 128)]
        n_neg: usize,
        /// Also write the bank JSON here.
        #[arg(long)]
        save_bank: Option<PathBuf>,
        #[arg(long, default_value_t = 0.9)]
        q: f64,
    },
}

#[derive(Args, Clone)]
struct WalkArgs {
    #[arg(long = "vocab", short = 'K', default_value_t = 16)]
    k: usize,
    #[arg(long = "length", short = 'H', default_value_t = 16)]
    h: usize,
}

impl WalkArgs {
    fn lang(&self) -> Result<LanguageSpec> {
        LanguageSpec::new(self.k, self.h)
    }
}

#[derive(Args, Clone)]
struct InstanceArgs {
    /// Instance JSON (`{"type": "walk", ...}` or `{"type": "explicit", ...}`);
    /// the walk language of the given size when absent.
    #[arg(long)]
    instance: Option<PathBuf>,
    #[command(flatten)]
    walk: WalkArgs,
}

impl InstanceArgs {
    fn load(&self) -> Result<Instance> {
        match &self.instance {
            Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
            None => Ok(Instance::Walk(self.walk.lang()?)),
        }
    }

    fn explicit(&self) -> Result<ExplicitDistribution> {
        match self.load()? {
            Instance::Explicit(d) => Ok(d),
            Instance::Walk(l) => l.to_explicit(ENUMERATION_LIMIT),
        }
    }
}

#[derive(Args, Clone)]
struct ScheduleArgs {
    #[arg(long, default_value = "linear")]
    kind: ScheduleKind,
    #[arg(long, default_value_t = 100)]
    steps: usize,
}

impl ScheduleArgs {
    fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.steps)
    }
}

#[derive(Args, Clone)]
struct CheckpointArgs {
    /// Directory written by `train`.
    #[arg(long, default_value = "checkpoints")]
    checkpoints: PathBuf,
}

#[derive(Args)]
struct KernelArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    #[arg(long, default_value = "uniform")]
    mechanism: Mechanism,
    /// Noisy state, tokens separated by spaces or commas, `m` for the mask.
    #[arg(long)]
    state: TokenSeq,
    #[arg(long)]
    t: usize,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    #[arg(long, default_value = "uniform")]
    mechanism: Mechanism,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long, default_value_t = 4096)]
    samples: usize,
    /// Checkpoint sample counts; a roughly geometric grid when absent.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 4)]
    noise_buckets: usize,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    /// Use the last checkpoint in this directory.
    #[arg(long, conflicts_with = "exact")]
    checkpoints: Option<PathBuf>,
    /// Use the exact reverse kernel of the instance instead of a model.
    #[arg(long)]
    exact: bool,
    /// Mechanism of the exact kernel.
    #[arg(long, default_value = "uniform")]
    mechanism: Mechanism,
    #[arg(long, default_value = "ancestral")]
    mode: SamplerMode,
    #[arg(long, default_value_t = 0.1)]
    phase2_sigma: f64,
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
    #[arg(long)]
    max_phase2_steps: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// Writes to `--out` when given, stdout otherwise.
fn emit(out: Option<&Path>, contents: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(p, contents)?;
        }
        None => print!("{contents}"),
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<bool> {
    let out = cli.out.as_deref();
    match &cli.cmd {
        Cmd::Schedule(args) => {
            let s = args.build()?;
            let mut csv = String::from("t,beta,sigma\n");
            for t in 1..=s.steps() {
                csv.push_str(&format!("{t},{:e},{:e}\n", s.beta(t), s.sigma(t)));
            }
            emit(out, &csv)?;
        }
        Cmd::Lang(LangCmd::Sample { walk, count }) => {
            let lang = walk.lang()?;
            let corpus = lang.sample_corpus(*count, cli.seed);
            match out {
                Some(p) => {
                    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                        fs::create_dir_all(parent)?;
                    }
                    write_corpus(p, &corpus)?;
                    let meta = CorpusMeta {
                        k: walk.k,
                        h: walk.h,
                        seed: cli.seed,
                        count: *count,
                    };
                    let mut sidecar = p.as_os_str().to_owned();
                    sidecar.push(".meta.json");
                    fs::write(PathBuf::from(sidecar), serde_json::to_string_pretty(&meta)?)?;
                }
                None => corpus.iter().for_each(|s| println!("{s}")),
            }
        }
        Cmd::Kernel(args) => {
            let dist = args.instance.explicit()?;
            if args.state.len() != dist.len() {
                return Err(LabError::InvalidArgument(format!(
                    "state has length {}, instance strings have length {}",
                    args.state.len(),
                    dist.len()
                )));
            }
            let schedule = args.schedule.build()?;
            let kernel = ExactKernel {
                dist: &dist,
                mechanism: args.mechanism,
            };
            let table = ScoreTable::build(&kernel, &args.state, args.t, &schedule, Some(&dist))?;
            emit(out, &table.to_csv())?;
        }
        Cmd::Verify(v) => return verify(cli, v),
        Cmd::Train(args) => {
            let inst = args.instance.load()?;
            let config = LearnerConfig {
                samples: args.samples,
                checkpoint_grid: args
                    .grid
                    .clone()
                    .unwrap_or_else(|| default_grid(args.samples)),
                lambda: args.lambda,
                noise_buckets: args.noise_buckets,
            };
            let cps = train_stream(
                &inst,
                args.mechanism,
                &args.schedule.build()?,
                &config,
                cli.seed,
            )?;
            let dir = out.unwrap_or(Path::new("checkpoints"));
            save_checkpoints(dir, cli.seed, &config, &cps)?;
            eprintln!("wrote {} checkpoints to {}", cps.len(), dir.display());
        }
        Cmd::Sample(args) => return sample(cli, args),
        Cmd::Probe(p) => probe(cli, p)?,
        Cmd::Report { dir } => {
            let (r, text) = report(dir)?;
            print!("{text}");
            return Ok(r.passed);
        }
        Cmd::Run { config } => {
            let run = run_experiment(config, out)?;
            print!("{}", summary_text(&run.manifest));
            eprintln!("outputs in {}", run.dir.display());
            return Ok(run.passed());
        }
    }
    Ok(true)
}

fn verify(cli: &Cli, v: &VerifyCmd) -> Result<bool> {
    let (name, instance, suites) = match v {
        VerifyCmd::Rates {
            instance,
            mechanism,
            sigma_grid,
            fineness,
        } => (
            "verify-rates",
            Instance::Explicit(instance.explicit()?),
            Suites {
                rate_separation: Some(RateSuite {
                    mechanisms: mechanism.clone(),
                    sigma_grid: sigma_grid.clone(),
                    fineness: *fineness,
                    ..RateSuite::default()
                }),
                ..Suites::default()
            },
        ),
        VerifyCmd::Threshold {
            instance,
            mechanism,
            sigma_grid,
            exponent,
        } => (
            "verify-threshold",
            Instance::Explicit(instance.explicit()?),
            Suites {
                threshold: Some(ThresholdSuite {
                    mechanisms: mechanism.clone(),
                    sigma_grid: sigma_grid.clone(),
                    exponent: *exponent,
                    ..ThresholdSuite::default()
                }),
                ..Suites::default()
            },
        ),
        VerifyCmd::ExampleB1 { sigma, alpha } => (
            "verify-example-b1",
            Instance::Explicit(ExplicitDistribution::new(
                2,
                1,
                vec![TokenSeq::new(vec![1])],
                vec![1.0],
            )?),
            Suites {
                example_b1: Some(ExampleB1Suite {
                    sigma: *sigma,
                    alpha: *alpha,
                    ..ExampleB1Suite::default()
                }),
                ..Suites::default()
            },
        ),
    };
    let config = ExperimentConfig {
        name: name.into(),
        seeds: vec![cli.seed],
        output_dir: None,
        instance,
        suites,
    };
    let run = run_config(&config, cli.out.as_deref())?;
    print!("{}", summary_text(&run.manifest));
    eprintln!("outputs in {}", run.dir.display());
    Ok(run.passed())
}

fn last_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let (_, cps) = load_checkpoints(dir)?;
    cps.into_iter()
        .last()
        .ok_or_else(|| LabError::InvalidState(format!("no checkpoints in {}", dir.display())))
}

fn sample(cli: &Cli, args: &SampleArgs) -> Result<bool> {
    let schedule = args.schedule.build()?;
    let config = SamplerConfig {
        mode: args.mode,
        phase2_sigma: args.phase2_sigma,
        tau: args.tau,
        max_phase2_steps: args.max_phase2_steps,
    };
    let inst = args.instance.load()?;
    let h = inst.seq_len();
    let run = |kernel: &(dyn ReverseKernel + Sync)| {
        sample_many(kernel, &schedule, h, &config, args.n, cli.seed)
    };
    let samples = match (&args.checkpoints, args.exact) {
        (Some(dir), _) => {
            let cp = last_checkpoint(dir)?;
            if cp.model.vocab() != inst.vocab() {
                return Err(LabError::InvalidArgument(
                    "checkpoint vocabulary differs from the instance".into(),
                ));
            }
            run(&ModelKernel::new(&cp.model, cp.model.mechanism()))?
        }
        (None, true) => {
            let dist = args.instance.explicit()?;
            run(&ExactKernel {
                dist: &dist,
                mechanism: args.mechanism,
            })?
        }
        (None, false) => {
            return Err(LabError::InvalidArgument(
                "pass --checkpoints DIR or --exact".into(),
            ))
        }
    };
    emit(cli.out.as_deref(), &samples_to_csv(&samples, &inst)?)?;
    let s = evaluate_samples(&samples, &inst)?;
    eprintln!(
        "{} samples: in support {:.4}, mean distance {:.4}, truncated {}",
        s.n, s.frac_in_support, s.mean_distance, s.truncated
    );
    Ok(true)
}

fn probe(cli: &Cli, p: &ProbeCmd) -> Result<()> {
    let (checkpoints, walk, q) = match p {
        ProbeCmd::Direct {
            checkpoints,
            walk,
            q,
            ..
        }
        | ProbeCmd::Indirect {
            checkpoints,
            walk,
            q,
            ..
        } => (checkpoints, walk, *q),
    };
    let lang = walk.lang()?;
    let (_, cps) = load_checkpoints(&checkpoints.checkpoints)?;
    let Some(first) = cps.first() else {
        return Err(LabError::InvalidState(
            "checkpoint directory is empty".into(),
        ));
    };
    if first.model.vocab() != lang.vocab() {
        return Err(LabError::InvalidArgument(
            "checkpoint vocabulary differs from --vocab".into(),
        ));
    }
    let mechanism = first.model.mechanism();
    let ticks: Vec<u64> = cps.iter().map(|c| c.tokens_seen).collect();
    let (names, rows): (Vec<&str>, Vec<Vec<f64>>) = match p {
        ProbeCmd::Direct {
            n_samples,
            uniform_corruptions,
            sigma,
            ..
        } => {
            let cfg = DirectProbeConfig {
                sigma: *sigma,
                n_samples: *n_samples,
                uniform_corruptions: *uniform_corruptions,
            };
            let rows = cps
                .iter()
                .map(|c| {
                    let r = direct_probes(&c.model, &lang, mechanism, &cfg, cli.seed)?;
                    Ok(vec![r.support, r.top1, r.pairwise])
                })
                .collect::<Result<_>>()?;
            (
                vec!["direct_support", "direct_top1", "direct_pairwise"],
                rows,
            )
        }
        ProbeCmd::Indirect {
            bank,
            corpus_size,
            corpus_seed,
            min_count,
            max_contexts,
            candidate_cap,
            strategy,
            n_neg,
            save_bank,
            ..
        } => {
            let bank = match bank {
                Some(path) => ContextBank::from_json(&fs::read_to_string(path)?)?,
                None => {
                    let params = BankParams {
                        min_count: *min_count,
                        max_contexts: *max_contexts,
                        candidate_cap: *candidate_cap,
                    };
                    build_context_bank(
                        &lang.sample_corpus(*corpus_size, *corpus_seed),
                        lang.vocab(),
                        params,
                    )?
                }
            };
            if let Some(path) = save_bank {
                emit(Some(path), &bank.to_json()?)?;
            }
            let scorer = WindowScorer::for_language(&lang, mechanism, cli.seed)?;
            let rows = cps
                .iter()
                .map(|c| {
                    let s = indirect_support_probe(
                        &c.model, &bank, &scorer, *strategy, *n_neg, cli.seed,
                    )?;
                    let f = indirect_frequency_probes(&c.model, &bank, &scorer)?;
                    Ok(vec![s.accuracy, f.top1, f.pairwise])
                })
                .collect::<Result<_>>()?;
            (
                vec!["indirect_support", "indirect_top1", "indirect_pairwise"],
                rows,
            )
        }
    };
    let curves: Vec<ProbeCurve> = names
        .iter()
        .enumerate()
        .map(|(i, n)| ProbeCurve::new(*n, ticks.clone(), rows.iter().map(|r| r[i]).collect()))
        .collect::<Result<_>>()?;
    emit(cli.out.as_deref(), &curves_to_csv(&curves)?)?;
    for c in &curves {
        eprintln!("{}: tau_{q} = {} tokens", c.metric, transition_time(c, q)?);
    }
    Ok(())
}
