//! `fairexpo`: the experiment pipeline as subcommands.
//!
//! prepare -> logpolicy -> simulate -> noise-cal -> train / sweep -> eval, audit

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use fairexpo::dataset::Thresholds;
use fairexpo::policy::ScorerKind;
use fairexpo::trainer::Ablation;

use crate::config::{ModeName, PipelineConfig};

#[derive(Debug, Parser)]
#[command(name = "fairexpo", version, about = "Fair counterfactual learning-to-rank from simulated click logs")]
struct Cli {
    /// Pipeline config (JSON). Defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory the config's artifact paths resolve against. Paths given as
    /// flags are used as is.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the train/validation/test split from LETOR files or the generator.
    Prepare(PrepareArgs),
    /// Fit the logging policy on a fraction of the training queries.
    Logpolicy(ClickArgs),
    /// Simulate click logs for every split.
    Simulate(ClickArgs),
    /// Estimate the false-positive click rate with a planted irrelevant item.
    NoiseCal(ClickArgs),
    /// Train one policy at a fixed lambda.
    Train(TrainArgs),
    /// Train over the lambda grid and select a policy.
    Sweep(SweepArgs),
    /// Evaluate a policy on the test split with true relevances.
    Eval(EvalArgs),
    /// Compare disparity estimators on logged clicks against the truth.
    Audit(AuditArgs),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["synth", "letor", "letor_train"])))]
struct PrepareArgs {
    /// Generate synthetic data.
    #[arg(long)]
    synth: bool,
    /// One LETOR file; constructed queries are split in order.
    #[arg(long)]
    letor: Option<PathBuf>,
    #[arg(long, requires_all = ["letor_validation", "letor_test"])]
    letor_train: Option<PathBuf>,
    #[arg(long, requires = "letor_train")]
    letor_validation: Option<PathBuf>,
    #[arg(long, requires = "letor_train")]
    letor_test: Option<PathBuf>,
    /// 1-based LETOR feature id of the group attribute.
    #[arg(long)]
    attribute_id: Option<usize>,
    /// Group boundaries as training-split percentiles, e.g. `40` or `33,66`.
    #[arg(long, value_delimiter = ',', conflicts_with = "thresholds")]
    percentiles: Option<Vec<f64>>,
    /// Group boundaries as raw attribute values.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// Candidates per query.
    #[arg(long)]
    candidates: Option<usize>,
    /// Relevant candidates per query.
    #[arg(long)]
    relevant: Option<usize>,
    #[arg(long)]
    train_queries: Option<usize>,
    #[arg(long)]
    validation_queries: Option<usize>,
    #[arg(long)]
    test_queries: Option<usize>,
    /// Let one source query yield several constructed queries.
    #[arg(long)]
    reuse_sources: bool,
}

#[derive(Debug, Args)]
struct ClickArgs {
    /// Position-bias severity.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    eps_plus: Option<f64>,
    #[arg(long)]
    eps_minus: Option<f64>,
    /// Impressions per query (instead of a click budget).
    #[arg(long)]
    impressions: Option<usize>,
    /// Logged clicks per split.
    #[arg(long, conflicts_with = "impressions")]
    clicks: Option<usize>,
    #[arg(long)]
    log_fraction: Option<f64>,
    /// 1-based position of the planted item in `noise-cal`.
    #[arg(long)]
    planted_k: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AblationArg {
    FullIps,
    NoIps,
    UtilityIpsOnly,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelArg {
    Linear,
    Mlp,
}

#[derive(Debug, Args)]
struct TrainerArgs {
    #[arg(long)]
    delta: Option<f64>,
    /// Sampled rankings per query.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    /// Initial entropy-regularization weight.
    #[arg(long)]
    entropy_gamma: Option<f64>,
    /// Queries in the running disparity average.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    /// Zero the group-indicator inputs.
    #[arg(long)]
    group_blind: bool,
    /// False-positive rate for the noise-corrected disparity.
    #[arg(long)]
    eps_minus: Option<f64>,
    /// Train on true relevances (skyline).
    #[arg(long)]
    full_info: bool,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Hidden units of the mlp scorer.
    #[arg(long)]
    hidden: Option<usize>,
    /// Recompute propensities with this severity instead of the logged ones.
    #[arg(long)]
    propensity_eta: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    lambda: f64,
    /// Model path; defaults to `<models>/lambda=<lambda>.bin`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    trainer: TrainerArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[command(flatten)]
    trainer: TrainerArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Defaults to `<models>/selected.bin`.
    #[arg(long)]
    model_file: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeName>,
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Debug, Args)]
struct AuditArgs {
    /// Defaults to `<models>/selected.bin`.
    #[arg(long)]
    model_file: Option<PathBuf>,
    /// Click log to audit; defaults to `<logs>/test.jsonl`.
    #[arg(long)]
    logs: Option<PathBuf>,
    /// False-positive rate for the noise-corrected estimator.
    #[arg(long)]
    eps_minus: Option<f64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl PrepareArgs {
    fn apply(&self, c: &mut PipelineConfig) {
        let l = &mut c.dataset.letor;
        if self.attribute_id.is_some() {
            l.attribute_feature_id = self.attribute_id;
        }
        if let Some(p) = &self.percentiles {
            l.thresholds = Thresholds::Percentiles(p.clone());
        }
        if let Some(t) = &self.thresholds {
            l.thresholds = Thresholds::Values(t.clone());
        }
        set(&mut l.candidates, self.candidates);
        set(&mut l.relevant, self.relevant);
        set(&mut l.train_queries, self.train_queries);
        set(&mut l.validation_queries, self.validation_queries);
        set(&mut l.test_queries, self.test_queries);
        l.reuse_sources |= self.reuse_sources;
        let s = &mut c.dataset.synth;
        set(&mut s.items_per_query, self.candidates);
        set(&mut s.train_queries, self.train_queries);
        set(&mut s.validation_queries, self.validation_queries);
        set(&mut s.test_queries, self.test_queries);
    }
}

impl ClickArgs {
    fn apply(&self, c: &mut PipelineConfig) {
        let s = &mut c.clicksim;
        set(&mut s.eta, self.eta);
        set(&mut s.eps_plus, self.eps_plus);
        set(&mut s.eps_minus, self.eps_minus);
        if self.impressions.is_some() {
            s.impressions = self.impressions;
        }
        if let Some(n) = self.clicks {
            s.clicks = n;
            s.impressions = None;
        }
        set(&mut s.log_fraction, self.log_fraction);
        set(&mut s.planted_k, self.planted_k);
    }
}

impl TrainerArgs {
    fn apply(&self, c: &mut PipelineConfig) {
        let t = &mut c.trainer;
        if self.delta.is_some() {
            t.delta = self.delta;
        }
        set(&mut t.samples, self.samples);
        set(&mut t.learning_rate, self.lr);
        set(&mut t.l2_coeff, self.l2);
        set(&mut t.entropy_gamma_init, self.entropy_gamma);
        set(&mut t.running_window, self.window);
        set(&mut t.epochs, self.epochs);
        if let Some(a) = self.ablation {
            t.ablation = match a {
                AblationArg::FullIps => Ablation::FullIps,
                AblationArg::NoIps => Ablation::NoIps,
                AblationArg::UtilityIpsOnly => Ablation::UtilityIpsOnly,
            };
        }
        t.group_blind |= self.group_blind;
        if self.eps_minus.is_some() {
            t.noise_eps_minus = self.eps_minus;
        }
        t.full_info |= self.full_info;
        if let Some(m) = self.model {
            t.model = match m {
                ModelArg::Linear => ScorerKind::Linear,
                ModelArg::Mlp => ScorerKind::OneHidden,
            };
        }
        set(&mut t.hidden, self.hidden);
        if self.propensity_eta.is_some() {
            t.propensity_eta = self.propensity_eta;
        }
    }
}

impl EvalArgs {
    fn apply(&self, c: &mut PipelineConfig) {
        set(&mut c.eval.mode, self.mode);
        set(&mut c.eval.samples, self.samples);
    }
}

fn effective_config(cli: &Cli) -> Result<PipelineConfig, error::CliError> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    set(&mut config.seed, cli.seed);
    match &cli.command {
        Command::Prepare(a) => a.apply(&mut config),
        Command::Logpolicy(a) | Command::Simulate(a) | Command::NoiseCal(a) => a.apply(&mut config),
        Command::Train(a) => a.trainer.apply(&mut config),
        Command::Sweep(a) => {
            a.trainer.apply(&mut config);
            if let Some(g) = &a.lambda_grid {
                config.trainer.lambda_grid = g.clone();
            }
        }
        Command::Eval(a) => a.apply(&mut config),
        Command::Audit(_) => {}
    }
    config.trainer.seed = config.sub_seed("trainer");
    config.dataset.synth.seed = config.sub_seed("dataset");
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let config = effective_config(cli)?;
    let ctx = commands::Context::new(&cli.workdir, config);
    match &cli.command {
        Command::Prepare(a) => ctx.prepare(&commands::Source::from_args(a)),
        Command::Logpolicy(_) => ctx.logpolicy(),
        Command::Simulate(_) => ctx.simulate(),
        Command::NoiseCal(_) => ctx.noise_cal(),
        Command::Train(a) => ctx.train(a.lambda, a.out.as_deref()),
        Command::Sweep(_) => ctx.sweep(),
        Command::Eval(a) => ctx.eval(a.model_file.as_deref()),
        Command::Audit(a) => ctx.audit(a.model_file.as_deref(), a.logs.as_deref(), a.eps_minus),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(error::exit_code(&e))
        }
    }
}
