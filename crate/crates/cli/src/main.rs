//! `diffitm`: generate data, train and finetune the toy denoiser, and run
//! the matching, sweep and bias evaluations.
//!
//! Every flag can also be set through an environment variable named
//! `DIFFITM_` plus the flag name in upper case with dashes as underscores
//! (`--bank-size` is `DIFFITM_BANK_SIZE`). Flags win over the environment.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "diffitm", version, about = "Diffusion-based image-text matching lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: Global,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Root seed of the run.
    #[arg(long, global = true, env = "DIFFITM_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, env = "DIFFITM_OUT", default_value = "diffitm-out")]
    pub out: PathBuf,
    /// Worker threads (0 = one per core). Results do not depend on it.
    #[arg(long, global = true, env = "DIFFITM_THREADS", default_value_t = 0)]
    pub threads: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build the training dataset and the task suite.
    Generate(GenerateArgs),
    /// Train the denoiser on a dataset.
    Train(TrainArgs),
    /// Hard-negative finetuning of a trained checkpoint.
    Finetune(FinetuneArgs),
    /// Score a task suite with a checkpoint.
    Eval(EvalArgs),
    /// Accuracy as a function of noise-bank size.
    Sweep(SweepArgs),
    /// Association-bias effect sizes.
    Bias(BiasArgs),
    /// Combine eval results into comparison tables.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
pub struct GenerateArgs {
    #[arg(long, env = "DIFFITM_N_TRAIN", default_value_t = 5000)]
    pub n_train: usize,
    #[arg(long, env = "DIFFITM_N_VAL", default_value_t = 500)]
    pub n_val: usize,
    /// Candidates per task instance.
    #[arg(long, env = "DIFFITM_K", default_value_t = 4)]
    pub k: usize,
    /// Instances per subtask and direction.
    #[arg(long, env = "DIFFITM_N_PER_SUBTASK", default_value_t = 115)]
    pub n_per_subtask: usize,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long, env = "DIFFITM_DATASET")]
    pub dataset: PathBuf,
    #[arg(long, env = "DIFFITM_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, env = "DIFFITM_LR")]
    pub lr: Option<f64>,
    #[arg(long, env = "DIFFITM_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    /// Conditioning dropout probability.
    #[arg(long, env = "DIFFITM_P_UNCOND")]
    pub p_uncond: Option<f64>,
    /// `key = value` file of training settings; flags override it.
    #[arg(long, env = "DIFFITM_CONFIG")]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct FinetuneArgs {
    #[arg(long, env = "DIFFITM_DATASET")]
    pub dataset: PathBuf,
    /// Base checkpoint.
    #[arg(long, env = "DIFFITM_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Relative clip factor of the negative term.
    #[arg(long, env = "DIFFITM_LAMBDA", default_value_t = diffitm::hardneg::DEFAULT_LAMBDA, allow_hyphen_values = true)]
    pub lambda: f64,
    /// Drop the negative term.
    #[arg(long, env = "DIFFITM_NO_NEG")]
    pub no_neg: bool,
    /// Disable the clip on the negative term.
    #[arg(long, env = "DIFFITM_NO_CLIP")]
    pub no_clip: bool,
    #[arg(long, env = "DIFFITM_P_UNCOND")]
    pub p_uncond: Option<f64>,
    #[arg(long, env = "DIFFITM_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, env = "DIFFITM_LR")]
    pub lr: Option<f64>,
    /// Caption negatives per positive.
    #[arg(long, env = "DIFFITM_TEXT_NEGATIVES")]
    pub text_negatives: Option<usize>,
    /// Image negatives per positive (0 or 1).
    #[arg(long, env = "DIFFITM_IMAGE_NEGATIVES")]
    pub image_negatives: Option<usize>,
    /// `key = value` file of finetuning settings; flags override it.
    #[arg(long, env = "DIFFITM_CONFIG")]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long, env = "DIFFITM_SUITE")]
    pub suite: PathBuf,
    #[arg(long, env = "DIFFITM_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// text, image-naive, image-normalized or text-graynorm.
    #[arg(long, env = "DIFFITM_MODE", default_value = "image-normalized")]
    pub mode: String,
    #[arg(long, env = "DIFFITM_BANK_SIZE", default_value_t = 10)]
    pub bank_size: usize,
    #[arg(long, env = "DIFFITM_BANK_SEED", default_value_t = 0)]
    pub bank_seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[arg(long, env = "DIFFITM_SUITE")]
    pub suite: PathBuf,
    #[arg(long, env = "DIFFITM_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "DIFFITM_MODE", default_value = "image-normalized")]
    pub mode: String,
    /// Ascending bank sizes; all are prefixes of one bank.
    #[arg(long, env = "DIFFITM_SIZES", value_delimiter = ',', default_value = "1,5,10,25,50,100")]
    pub sizes: Vec<usize>,
    #[arg(long, env = "DIFFITM_BANK_SEED", default_value_t = 0)]
    pub bank_seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct BiasArgs {
    #[arg(long, env = "DIFFITM_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Bias suite JSON; the built-in color control suite when absent.
    #[arg(long, env = "DIFFITM_CONFIG")]
    pub config: Option<PathBuf>,
    /// Images per group of the built-in control suite.
    #[arg(long, env = "DIFFITM_PER_GROUP", default_value_t = 12)]
    pub per_group: usize,
    #[arg(long, env = "DIFFITM_BANK_SIZE")]
    pub bank_size: Option<usize>,
    #[arg(long, env = "DIFFITM_BANK_SEED")]
    pub bank_seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct ReportArgs {
    /// Eval output directories (or their `result.json` files).
    pub inputs: Vec<PathBuf>,
    /// Column labels, one per input; directory names by default.
    #[arg(long, value_delimiter = ',')]
    pub labels: Vec<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
