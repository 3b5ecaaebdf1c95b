//! `nlmvs`: synthetic scenes, training, depth inference, fusion and
//! evaluation from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;
use nlmvs_core::MvsError;

#[derive(Debug, Parser)]
#[command(name = "nlmvs", version, about = "Multi-view stereo with streamed recurrent cost regularization")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Run configuration (TOML). Flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Scalar type for network evaluation.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Log more detail (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Log only warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Dynamic,
    Fixed,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene with ground-truth depths and cloud.
    GenScene(GenScene),
    /// Train the network on scene directories with ground truth.
    Train(Train),
    /// Estimate depth maps for one or all reference views.
    Infer(Infer),
    /// Fuse per-view depth maps into a colored point cloud.
    Fuse(Fuse),
    /// Compare a cloud with a scene's ground-truth cloud.
    Eval(Eval),
}

#[derive(Debug, Args)]
pub struct GenScene {
    /// Scene specification (TOML, the `[scene]` table layout).
    #[arg(long, value_name = "FILE")]
    pub spec: PathBuf,
    /// Output scene directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Texture seed, replacing `texture_seed` from the --spec file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Train {
    /// A scene directory, or a directory whose subdirectories are scenes.
    #[arg(long, value_name = "DIR")]
    pub scenes: PathBuf,
    /// Output checkpoint, rewritten after every epoch with `<out>.meta.toml`.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Continue from this checkpoint and its epoch count.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
    /// Loss log; defaults to `<out>.loss.csv`.
    #[arg(long, value_name = "FILE")]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Depth planes per training sample.
    #[arg(long)]
    pub planes: Option<usize>,
    /// Seed for parameter initialisation, crops and pass directions.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train the plain recurrent baseline without the non-local block state.
    #[arg(long)]
    pub ablate_nonlocal: bool,
}

#[derive(Debug, Args)]
pub struct Infer {
    #[arg(long, value_name = "DIR")]
    pub scene: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    /// Reference view; all views when absent.
    #[arg(long = "ref", value_name = "I")]
    pub reference: Option<usize>,
    /// Number of depth planes.
    #[arg(long = "planes", visible_alias = "D", value_name = "N")]
    pub planes: Option<usize>,
    /// Depth map file with `--ref`, otherwise a directory receiving
    /// `depth_XXX.nr2d` per view.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Fuse {
    #[arg(long, value_name = "DIR")]
    pub scene: PathBuf,
    /// Directory holding `depth_XXX.nr2d` for every view.
    #[arg(long, value_name = "DIR")]
    pub depths: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Probability threshold for fixed mode.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Output PLY.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Write an ASCII PLY instead of binary.
    #[arg(long)]
    pub ascii: bool,
    /// Fusion report (JSON); defaults to `<out>.report.json`.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long, value_name = "FILE")]
    pub cloud: PathBuf,
    /// Scene directory naming a ground-truth cloud.
    #[arg(long, value_name = "DIR")]
    pub gt: PathBuf,
    /// Distance cap; defaults to 20 plane spacings at the median
    /// ground-truth depth.
    #[arg(long)]
    pub cap: Option<f64>,
    /// Metrics report (JSON); printed to stdout when absent.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

fn exit_code(e: &MvsError) -> u8 {
    match e {
        _ if e.is_numerical() => 3,
        MvsError::Config(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match (cli.global.quiet, cli.global.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
