//! `gpn`: trains, evaluates and verifies Gaussian process neuron networks.
//!
//! Exit codes: 0 success, 1 verification failure or runtime error, 2 usage
//! or configuration error, 3 missing resource.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gpn_core::GpnError;

use crate::config::UsageError;

#[derive(Parser)]
#[command(name = "gpn", version, about = "Gaussian process neuron networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Flags override config-file keys.
#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// JSON run configuration, or the manifest of an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Layer sizes such as 16x30x15x26; for classification the last entry
    /// is the class count.
    #[arg(long)]
    pub arch: Option<String>,
    /// mean, meanvar or fullcov.
    #[arg(long)]
    pub mode: Option<String>,
    /// ml_regression, ml_classification, vb_regression or vb_classification.
    #[arg(long)]
    pub objective: Option<String>,
    /// none or layer.
    #[arg(long)]
    pub sharing: Option<String>,
    /// random, identity, tanh or relu.
    #[arg(long = "target-init")]
    pub target_init: Option<String>,
    /// toy, letter, adult, connect-4 or mnist.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long = "data-dir")]
    pub data_dir: Option<PathBuf>,
    #[arg(long = "max-iters")]
    pub max_iters: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write a checkpoint, the loss history and a manifest.
    Train(CommonArgs),
    /// Evaluate a checkpoint on one split of the configured data set.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the Monte-Carlo oracles, gradient checks and experiments.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// Restrict to some of: kernels, layers, gradients, clt, activation-fit.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
        /// Debugging aid: corrupt a closed form (omega-sign or lambda-sign).
        #[arg(long)]
        fault: Option<String>,
        /// Monte-Carlo draws per oracle (default 1000000).
        #[arg(long)]
        draws: Option<usize>,
        /// Random cases per oracle suite.
        #[arg(long)]
        cases: Option<usize>,
    },
    /// Train and score networks over several seeds.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of seeds, starting at --seed.
        #[arg(long)]
        seeds: Option<usize>,
        /// Also write the activation functions of every trained network.
        #[arg(long = "export-activations")]
        export_activations: bool,
    },
    /// Central-limit experiment: KS distance of layer-3 activations to a normal.
    Clt {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,3,10")]
        widths: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        draws: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Fit virtual observations to fixed activation functions.
    FitActivation {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long = "r-counts", value_delimiter = ',', default_value = "5,8")]
        r_counts: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "tanh,relu,identity")]
        functions: Vec<String>,
    },
    /// Write the activation function of every unit of a checkpoint as CSV.
    ExportActivations {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "-3,3", allow_hyphen_values = true)]
        range: Vec<f64>,
        #[arg(long, default_value_t = 101)]
        points: usize,
    },
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<GpnError>() {
            return match e {
                GpnError::DatasetMissing(_) => 3,
                GpnError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
                GpnError::BadShape(_) | GpnError::InvalidArgument(_) => 2,
                _ => 1,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return 3;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
