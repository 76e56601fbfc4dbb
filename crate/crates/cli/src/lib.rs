//! Command-line driver: synthetic data, refinement, training, evaluation,
//! gradient checks and timing.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

pub use config::ExperimentConfig;

/// Environment variable holding the default worker count.
pub const THREADS_ENV: &str = "MLLC_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<mllc_core::Error> for CliError {
    fn from(e: mllc_core::Error) -> Self {
        if e.is_invalid_input() {
            CliError::Invalid(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mllc", version, about = "Dual-graph pseudo-label correction experiments")]
pub struct Cli {
    /// Worker threads; 1 gives bit-exact reruns. Defaults to $MLLC_THREADS.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset bundle.
    Synth(Common),
    /// Refine given features and probabilities.
    Refine(RefineArgs),
    /// Train on a synthetic dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(Common),
    /// Time one refinement call.
    Bench(BenchArgs),
}

/// Config file plus flag overrides; flags win.
#[derive(Debug, Args, Default, Clone)]
pub struct Common {
    /// JSON config; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override any field, e.g. `--set train.refine.alpha=0.5`.
    #[arg(long = "set", value_parser = config::parse_assignment)]
    pub sets: Vec<(String, Value)>,
    /// Training and refinement seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset seed.
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Refinement rounds (K).
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Neighbours per node (k).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// clg_first, slg_first or simultaneous.
    #[arg(long)]
    pub order: Option<String>,
    /// Turn off confidence weighting of the class loss.
    #[arg(long)]
    pub no_dynamic_weight: bool,
    /// Use the fixed threshold sigma for every class.
    #[arg(long)]
    pub no_class_thresholds: bool,
    /// mllc, supervised_only or self_training.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda_unsup: Option<f64>,
    #[arg(long)]
    pub noise_rate: Option<f64>,
}

impl Common {
    fn flag_overrides(&self) -> Vec<(String, Value)> {
        let mut v: Vec<(String, Value)> = Vec::new();
        let mut put = |k: &str, x: Value| v.push((k.to_string(), x));
        if let Some(s) = self.seed {
            put("train.seed", s.into());
            put("train.refine.seed", s.into());
        }
        if let Some(s) = self.data_seed {
            put("synth.seed", s.into());
        }
        if let Some(r) = self.rounds {
            put("train.refine.rounds", r.into());
            put("bench.rounds", r.into());
        }
        if let Some(k) = self.k {
            put("train.refine.k", k.into());
            put("bench.k", k.into());
        }
        if let Some(a) = self.alpha {
            put("train.refine.alpha", a.into());
        }
        if let Some(s) = self.sigma {
            put("train.refine.sigma", s.into());
        }
        if let Some(o) = &self.order {
            put("train.refine.order", o.clone().into());
        }
        if self.no_dynamic_weight {
            put("train.loss.dynamic_weight", false.into());
        }
        if self.no_class_thresholds {
            put("train.refine.class_thresholds", false.into());
        }
        if let Some(m) = &self.mode {
            put("train.mode", m.clone().into());
        }
        if let Some(e) = self.epochs {
            put("train.epochs", e.into());
        }
        if let Some(l) = self.lambda_unsup {
            put("train.loss.lambda_unsup", l.into());
        }
        if let Some(r) = self.noise_rate {
            put("synth.noise_rate", r.into());
            put("harness.noise_rate", r.into());
        }
        if let Some(o) = &self.out {
            put("out_dir", o.to_string_lossy().into_owned().into());
        }
        v
    }

    /// Config file (or `base`) with `--set` and then named flags applied.
    pub fn resolve_from(&self, base: Option<Value>) -> Result<ExperimentConfig, CliError> {
        let cfg = match (&self.config, base) {
            (Some(p), _) => ExperimentConfig::load(p)?,
            (None, Some(v)) => ExperimentConfig::from_value(v)?,
            (None, None) => ExperimentConfig::default(),
        };
        let mut sets = self.sets.clone();
        sets.extend(self.flag_overrides());
        let cfg = cfg.with_overrides(&sets)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        self.resolve_from(None)
    }
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[command(flatten)]
    pub common: Common,
    /// N×m feature matrix.
    #[arg(long, required_unless_present = "harness")]
    pub features: Option<PathBuf>,
    /// N×C probability matrix.
    #[arg(long, required_unless_present = "harness")]
    pub probs: Option<PathBuf>,
    /// Segmentation-head probabilities for the mix gate; defaults to --probs.
    #[arg(long)]
    pub gate: Option<PathBuf>,
    /// Ground-truth labels for accuracy reporting.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Indices of known wrong labels.
    #[arg(long)]
    pub flips: Option<PathBuf>,
    /// Dataset bundle whose noisy harness supplies all inputs.
    #[arg(long, conflicts_with_all = ["features", "probs"])]
    pub harness: Option<PathBuf>,
    /// Use the teacher refinement layers of this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Train on this bundle instead of generating data.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Evaluate the student instead of the teacher.
    #[arg(long)]
    pub student: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub n: Option<usize>,
    /// Feature width.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
}

/// Worker count from the flag, then the environment; `None` leaves rayon's default.
pub fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(s) => Some(
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::Invalid(format!("{THREADS_ENV}={s:?} is not a thread count")))?,
            ),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(CliError::Invalid("thread count must be at least 1".into()));
    }
    Ok(n)
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = thread_count(cli.threads)? {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Synth(c) => commands::synth(&c),
        Command::Refine(a) => commands::refine(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(c) => commands::gradcheck(&c),
        Command::Bench(a) => commands::bench(&a),
    }
}
