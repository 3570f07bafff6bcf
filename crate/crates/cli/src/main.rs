mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// Calibration of focused plenoptic cameras from micro-image observations.
#[derive(Debug, Parser)]
#[command(name = "plencal", version)]
struct Cli {
    /// Overrides the random seed of the dataset or the reconstruction.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its ground truth.
    Synth {
        /// Scene config JSON; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for dataset.json and groundtruth.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate a camera from a dataset.
    Calibrate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Full)]
        mode: Mode,
        /// Comma-separated intrinsics to hold constant (f_L, b_L0, B, c_x, c_y, k0, k1, k2, p0, p1).
        #[arg(long, value_delimiter = ',')]
        fix: Vec<String>,
        /// calibration.json with the f_L and B used in recalib mode.
        #[arg(long)]
        nominal: Option<PathBuf>,
        /// Output directory for calibration.json, trajectory.tum and report.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a calibration (and trajectory) with a reference.
    Eval {
        /// Estimated calibration.json.
        #[arg(long)]
        calibration: PathBuf,
        /// Reference calibration.json or groundtruth.json.
        #[arg(long)]
        reference: PathBuf,
        /// Estimated TUM trajectory.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Reference TUM trajectory, or groundtruth.json.
        #[arg(long)]
        gt_trajectory: Option<PathBuf>,
        /// Report JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Optional markdown table of the parameter deviations.
        #[arg(long)]
        markdown: Option<PathBuf>,
    },
    /// Produce point clouds, RGB-D frames or undistortion tables.
    Export {
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum)]
        what: Export,
        /// World-from-camera TUM trajectory; required for clouds.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Table spacing in pixels for undistort-map.
        #[arg(long, default_value_t = 8.0)]
        step: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Full,
    Recalib,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Export {
    Cloud,
    Rgbd,
    UndistortMap,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(t) = std::env::var("PLENCAL_THREADS") {
        match t.parse::<usize>() {
            Ok(n) if n > 0 => {
                plencal::par::init_threads(n);
            }
            _ => {
                eprintln!("error: PLENCAL_THREADS must be a positive integer, got {t:?}");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
