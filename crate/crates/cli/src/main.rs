//! `clue`: train models, search counterfactuals and run evaluation sweeps.
//!
//! Exit codes: 0 on success, 2 on usage errors (bad flags, unknown presets,
//! missing checkpoints), 1 on runtime failures with a JSON report on stderr.

mod commands;
mod config;
mod data;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

const AFTER_HELP: &str = "\
Configuration precedence: command-line flags > --config JSON file > preset defaults.
The config file may set dataset, data, scale, seed and out, and patch the
sections preset, clue, sensitivity, ufido and framework. Every CSV row carries
the config hash (SHA-256 of the resolved config without `out`) and the seed.
Relative output directories are placed under $CLUE_OUT_ROOT when it is set.";

#[derive(Parser, Debug)]
#[command(name = "clue", version, about = "Counterfactual explanations of BNN uncertainty", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset preset: lsat, compas, wine, credit or mnist.
    #[arg(long, global = true)]
    pub dataset: Option<String>,
    /// CSV file (tabular presets) or IDX directory (mnist).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub scale: Option<Scale>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Counterfactual distance weight (premultiplied by the input width).
    #[arg(long, global = true)]
    pub lambda_x: Option<f64>,
    /// Prediction distance weight.
    #[arg(long, global = true)]
    pub lambda_y: Option<f64>,
    /// Sensitivity step size.
    #[arg(long, global = true)]
    pub eta: Option<f64>,
    /// U-FIDO sparsity weight.
    #[arg(long, global = true)]
    pub lambda_b: Option<f64>,
    /// Uncertainty component that is explained.
    #[arg(long, global = true, value_enum)]
    pub uncertainty: Option<Kind>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Architectures and schedules as tabulated.
    Full,
    /// Narrower networks and shorter schedules.
    Desk,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Total,
    Aleatoric,
    Epistemic,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DgmKind {
    Vae,
    Vaeac,
    GroundTruth,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackArg {
    Aleatoric,
    Epistemic,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelevanceArg {
    L1,
    Logp,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConventionArg {
    Verbatim,
    PenalizeMasking,
}

#[derive(Args, Debug, Clone)]
pub struct ModelPaths {
    /// BNN checkpoint directory [default: <out>/bnn].
    #[arg(long)]
    pub bnn: Option<PathBuf>,
    /// VAE checkpoint directory [default: <out>/vae].
    #[arg(long)]
    pub vae: Option<PathBuf>,
    /// VAEAC checkpoint directory [default: <out>/vaeac].
    #[arg(long)]
    pub vaeac: Option<PathBuf>,
    /// Ground-truth checkpoint directory [default: <out>/ground_truth].
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Explain at most this many rejected test points.
    #[arg(long)]
    pub max_points: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the explained network and save it to <out>/bnn.
    TrainBnn {
        /// One MAP-trained network in place of the posterior ensemble.
        #[arg(long)]
        deterministic: bool,
        /// Epochs of MAP training.
        #[arg(long, default_value_t = 100)]
        epochs: usize,
    },
    /// Train a generative model and save it to <out>/<kind>.
    TrainDgm {
        #[arg(long, value_enum)]
        kind: DgmKind,
    },
    /// Predictive uncertainty decomposition of every test point.
    Uncertainty {
        #[command(flatten)]
        paths: ModelPaths,
    },
    /// Counterfactual latent explanations of the rejected test points.
    Clue {
        #[command(flatten)]
        paths: ModelPaths,
        /// Diverse explanations per point from perturbed initialisations.
        #[arg(long)]
        restarts: Option<usize>,
    },
    /// Uncertainty-gradient steps on the rejected test points.
    Sensitivity {
        #[command(flatten)]
        paths: ModelPaths,
    },
    /// Feature-replacement explanations of the rejected test points.
    Ufido {
        #[command(flatten)]
        paths: ModelPaths,
        #[arg(long, value_enum)]
        convention: Option<ConventionArg>,
    },
    /// Ground-truth evaluation sweep over hyperparameter grids.
    EvalFramework {
        #[command(flatten)]
        paths: ModelPaths,
        /// Methods to sweep; repeat or separate with commas.
        #[arg(long, value_delimiter = ',', default_values_t = vec!["clue".to_string()])]
        method: Vec<String>,
        /// Log grid `lo:hi:n`; one for all methods or one per method.
        #[arg(long)]
        grid: Vec<String>,
        /// Number of seeds, starting from --seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, value_enum, default_value = "epistemic")]
        track: TrackArg,
        #[arg(long, value_enum, default_value = "l1")]
        relevance: RelevanceArg,
    },
    /// Uncertainty reduction and nearest-neighbour distances on real test points.
    EvalReal {
        #[command(flatten)]
        paths: ModelPaths,
    },
    /// Ablation sweeps.
    Ablate {
        #[command(subcommand)]
        which: Ablation,
    },
    /// Uncertainty decomposition over a grid around the two-moons data.
    MoonsDemo {
        #[arg(long, default_value_t = 600)]
        n: usize,
        #[arg(long, default_value_t = 0.2)]
        noise: f64,
        /// Grid points per axis.
        #[arg(long, default_value_t = 60)]
        resolution: usize,
        /// SG-HMC burn-in epochs.
        #[arg(long, default_value_t = 150)]
        burn_in: usize,
    },
}

#[derive(Subcommand, Debug)]
pub enum Ablation {
    /// Encoder-mean versus latent-origin initialisation.
    InitStrategy {
        #[command(flatten)]
        paths: ModelPaths,
    },
    /// Uncertainty lost by autoencoding, across latent sizes.
    DgmCapacity {
        #[command(flatten)]
        paths: ModelPaths,
        #[arg(long, value_delimiter = ',', default_values_t = vec![2, 4, 8, 16])]
        latent: Vec<usize>,
    },
    /// Class changes and uncertainty reduction across λ_y.
    LambdaY {
        #[command(flatten)]
        paths: ModelPaths,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.5, 1.0, 2.0, 4.0, 8.0])]
        values: Vec<f64>,
    },
    /// Explanations of a MAP-trained network next to the ensemble.
    DeterministicNn {
        #[command(flatten)]
        paths: ModelPaths,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            match &e {
                CliError::Usage(msg) => {
                    eprintln!("error: {msg}\n\nFor more information, try '--help'.");
                }
                _ => eprintln!("{}", e.report()),
            }
            ExitCode::from(code)
        }
    }
}
