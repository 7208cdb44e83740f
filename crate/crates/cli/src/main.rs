//! `cafpn`: command-line front end for attention-fused pyramid classifiers.

mod commands;
mod settings;
mod train;

use std::path::Path;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cafpn_core::pyramid::{Fusion, Upsample};

/// Exit status for a completed command whose checks failed.
pub const EXIT_CHECK_FAILED: u8 = 1;
/// Exit status for usage errors, invalid configurations included.
pub const EXIT_USAGE: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "cafpn", version, about)]
struct Cli {
    /// Worker threads for convolution kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on an image directory.
    Train(train::TrainArgs),
    /// Top-1 accuracy of a checkpoint on a dataset split.
    Eval(commands::EvalArgs),
    /// Tile a dataset into non-overlapping square crops.
    CropTiny(commands::CropTinyArgs),
    /// Per-class and per-category image counts.
    Stats(commands::StatsArgs),
    /// Trace attention activations and SRR maps of a checkpoint.
    Inspect(commands::InspectArgs),
    /// Finite-difference gradient checks.
    Gradcheck(commands::GradcheckArgs),
    /// Parameter counts of a model configuration.
    Params(commands::ParamsArgs),
    /// Write a synthetic texture dataset.
    Synth(commands::SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Fpn,
    FpnCa,
    FpnSrr,
    FpnSrrCa,
}

impl From<ModelArg> for Fusion {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Fpn => Fusion::Plain,
            ModelArg::FpnCa => Fusion::Ca,
            ModelArg::FpnSrr => Fusion::Srr,
            ModelArg::FpnSrrCa => Fusion::SrrCa,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum UpsampleArg {
    Bilinear,
    Nearest,
    Deconv,
}

impl From<UpsampleArg> for Upsample {
    fn from(u: UpsampleArg) -> Self {
        match u {
            UpsampleArg::Bilinear => Upsample::Bilinear,
            UpsampleArg::Nearest => Upsample::Nearest,
            UpsampleArg::Deconv => Upsample::Deconv,
        }
    }
}

/// Architecture flags shared by `train` and `params`.
#[derive(Args, Debug, Clone)]
pub struct ArchArgs {
    #[arg(long, value_enum)]
    pub model: ModelArg,
    /// Backbone depth: 18 or 34 for 224-pixel inputs, 20 or 56 for 32-pixel.
    #[arg(long)]
    pub depth: usize,
    #[arg(long, value_enum)]
    pub upsample: Option<UpsampleArg>,
    /// Pyramid width C_d.
    #[arg(long)]
    pub width: Option<usize>,
    /// Attention reduction ratio t.
    #[arg(long)]
    pub reduction: Option<usize>,
}

/// Failure classes mapped onto exit statuses.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Check(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        use cafpn_core::Error as E;
        match e.downcast_ref::<E>() {
            Some(E::NonFiniteGradient { .. }) | Some(E::Tensor(_)) => Failure::Runtime(e),
            _ => Failure::Usage(e),
        }
    }
}

impl From<cafpn_core::Error> for Failure {
    fn from(e: cafpn_core::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

pub type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads {n}: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let result = match cli.command {
        Command::Train(a) => train::run(a, cli.threads),
        Command::Eval(a) => commands::eval(a),
        Command::CropTiny(a) => commands::crop_tiny(a),
        Command::Stats(a) => commands::stats(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Params(a) => commands::params(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
    }
}

/// Fails with a usage error unless `path` exists.
pub fn require_path(path: &Path, what: &str) -> CmdResult {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(anyhow::anyhow!("{what} `{}` does not exist", path.display())))
    }
}

impl From<cafpn_tensor::Error> for Failure {
    fn from(e: cafpn_tensor::Error) -> Self {
        Failure::Runtime(e.into())
    }
}
