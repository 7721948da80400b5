use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

mod commands;
mod config;

/// Runtime failures exit with 1, usage errors with 2.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<se3diff::Error> for Failure {
    fn from(e: se3diff::Error) -> Self {
        match e {
            se3diff::Error::BadParameter(m) => Failure::Usage(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "se3diff", version, about = "Equivariant diffusion policies on SE(3): data, training, evaluation and verification")]
struct Cli {
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// JSON object of command options; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a JSON-Lines demonstration dataset.
    Gen(GenFlags),
    /// Fit a frame-regressor checkpoint on the training split of a dataset.
    Train(TrainFlags),
    /// Roll out a checkpoint (or the oracle) on held-out poses.
    Eval(EvalFlags),
    #[command(subcommand)]
    Verify(VerifyCommand),
}

#[derive(Subcommand)]
enum VerifyCommand {
    /// Check that inferring on a moved cloud moves the output the same way.
    Equiv(EquivFlags),
    /// Exact marginal check of mixed p1/p2/p3 chains on finite groups.
    Markov(MarkovFlags),
    /// Invariant vs equivariant regression targets at equal budgets.
    Learnability(LearnFlags),
}

#[derive(Args, Serialize)]
pub struct GenFlags {
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub test_t: Option<usize>,
    #[arg(long)]
    pub test_np: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jitter: Option<f64>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct TrainFlags {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Number of diffusion steps.
    #[arg(long = "K")]
    #[serde(rename = "K")]
    pub k: Option<usize>,
    /// `linear` or `cosine`.
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub final_lr_fraction: Option<f64>,
    #[arg(long)]
    pub rotation_weight: Option<f64>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Vec<usize>,
    #[arg(long)]
    pub output_scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub probe_samples: Option<usize>,
    #[arg(long)]
    pub gradient_checks: Option<usize>,
}

#[derive(Args, Serialize)]
pub struct EvalFlags {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Use the ground-truth denoiser instead of a checkpoint.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub task: Option<String>,
    /// `T`, `NP`, or `both` for a paired run with the T − NP delta.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Number of evaluation seeds, starting at `--seed`.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub jitter: Option<f64>,
    /// Diffusion steps; defaults to the checkpoint's schedule, or 100 for the oracle.
    #[arg(long = "K")]
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct EquivFlags {
    /// Defaults to every task.
    #[arg(long)]
    pub task: Vec<String>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Checkpoint to check; a freshly initialized regressor otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long = "K")]
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jitter: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct MarkovFlags {
    /// `cyclic(m)`, `dihedral(m)` or `octahedral`; repeatable.
    #[arg(long)]
    pub group: Vec<String>,
    /// Chain length; repeatable.
    #[arg(long = "K")]
    #[serde(rename = "K")]
    pub k: Vec<usize>,
    /// Layout index, or `max` for K+1; repeatable.
    #[arg(long)]
    pub n: Vec<String>,
    /// Kernel draws per case.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Negative-control draws per case.
    #[arg(long)]
    pub controls: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Check the layout with an unconstrained p2 slot instead; expected to fail.
    #[arg(long)]
    pub negative_control: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct LearnFlags {
    #[arg(long)]
    pub task: Option<String>,
    /// Number of seeds, starting at `--seed`.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Chain length of the multi-step comparison; 0 skips it.
    #[arg(long)]
    pub chain_steps: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let file = config::load_config_file(cli.config.as_deref())?;
    match &cli.command {
        Command::Gen(f) => commands::gen(&config::resolve(commands::GenConfig::defaults(), &file, f)?),
        Command::Train(f) => commands::train(&config::resolve(commands::TrainConfig::defaults(), &file, f)?),
        Command::Eval(f) => commands::eval(&config::resolve(commands::EvalCmdConfig::defaults(), &file, f)?),
        Command::Verify(VerifyCommand::Equiv(f)) => commands::verify_equiv(&config::resolve(commands::EquivConfig::defaults(), &file, f)?),
        Command::Verify(VerifyCommand::Markov(f)) => commands::verify_markov(&config::resolve(commands::MarkovConfig::defaults(), &file, f)?),
        Command::Verify(VerifyCommand::Learnability(f)) => {
            commands::verify_learnability(&config::resolve(commands::LearnConfig::defaults(), &file, f)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ETSEED_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
