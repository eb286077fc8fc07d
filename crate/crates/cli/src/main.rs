//! `elastic-warp`: stitch image pairs, build synthetic suites and score them.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 stitching failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use elastic_warp::synth::SuiteOptions;
use elastic_warp::{Error, Result};

use commands::{Status, StitchArgs, SynthArgs};
use config::Config;

const THREADS_ENV: &str = "REWARP_THREADS";

#[derive(Parser)]
#[command(name = "elastic-warp", version, about = "Parallax-tolerant image stitching with an iterative elastic warp")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command. Flags override values from `--config`.
#[derive(Args, Debug, Default)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Global-stage iterations K [default: 6]; eval accepts a comma list.
    #[arg(long, value_name = "K")]
    iters_h: Option<String>,
    /// Local-stage iterations N [default: 3]; eval accepts a comma list.
    #[arg(long, value_name = "N")]
    iters_t: Option<String>,
    /// Sequence-loss weight [default: 0.85].
    #[arg(long)]
    alpha: Option<f64>,
    /// Control lattice side, edge ring included [default: 12].
    #[arg(long)]
    grid: Option<usize>,
    /// average or linear [default: linear].
    #[arg(long)]
    blend: Option<String>,
    /// Scale of local cost-volume proposals [default: 1.0].
    #[arg(long)]
    lambda_local: Option<f64>,
    /// Canvas area limit in reference areas [default: 16].
    #[arg(long)]
    area_cap: Option<f64>,
    /// Seed of every random choice [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output image (stitch, multistitch), directory (synth) or report (eval).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Write the per-iteration alignment trace as JSON.
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
    /// h or h+tps [default: h+tps] (eval).
    #[arg(long)]
    warp: Option<String>,
    /// Record wall time in the output.
    #[arg(long)]
    timing: bool,
    /// Print progress to stderr.
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

impl Common {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = Config::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let pairs = [
            ("iters_h", self.iters_h.clone()),
            ("iters_t", self.iters_t.clone()),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("grid", self.grid.map(|v| v.to_string())),
            ("blend", self.blend.clone()),
            ("lambda_local", self.lambda_local.map(|v| v.to_string())),
            ("area_cap", self.area_cap.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("warp", self.warp.clone()),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        if self.trace.is_some() {
            cfg.trace = self.trace.clone();
        }
        cfg.timing |= self.timing;
        cfg.verbosity = cfg.verbosity.max(self.verbose);
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Align TARGET to REFERENCE and write the blended canvas plus metrics JSON.
    Stitch {
        reference: PathBuf,
        target: PathBuf,
        /// Metrics JSON path [default: output image with a .json extension].
        #[arg(long, value_name = "PATH")]
        metrics: Option<PathBuf>,
        /// Also write the target resampled by the homography alone.
        #[arg(long, value_name = "PATH")]
        jt: Option<PathBuf>,
        /// Ground-truth homography (JSON 3x3, reference to target) for corner error.
        #[arg(long, value_name = "FILE")]
        gt_homography: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Align every target to REFERENCE and compose them on one canvas.
    Multistitch {
        reference: PathBuf,
        #[arg(required = true)]
        targets: Vec<PathBuf>,
        #[arg(long, value_name = "PATH")]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Render a synthetic suite (PNG pairs and manifest.json) into --out.
    Synth {
        /// Pairs per overlap bucket: low,mid,high.
        #[arg(long, value_delimiter = ',', default_value = "10,10,10")]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long, default_value_t = 256)]
        height: usize,
        /// Maximum projective corner motion in pixels.
        #[arg(long, default_value_t = 25.0)]
        max_corner_motion: f64,
        /// Omit the ground-truth spline perturbation.
        #[arg(long)]
        homography_only: bool,
        /// Off-plane sprites per scene.
        #[arg(long, default_value_t = 0)]
        layers: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Stitch every pair of a manifest and print or write the suite report.
    Eval {
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn run(cli: Cli) -> Result<Status> {
    init_threads()?;
    match cli.command {
        Command::Stitch { reference, target, metrics, jt, gt_homography, common } => {
            let cfg = common.resolve()?;
            commands::cmd_stitch(StitchArgs { reference, target, metrics, jt, gt_homography }, &cfg)
        }
        Command::Multistitch { reference, targets, metrics, common } => {
            let cfg = common.resolve()?;
            commands::cmd_multistitch(&reference, &targets, metrics, &cfg)
        }
        Command::Synth { counts, width, height, max_corner_motion, homography_only, layers, common } => {
            let cfg = common.resolve()?;
            let mut options = SuiteOptions { width, height, max_corner_motion, layers, ..Default::default() };
            if homography_only {
                options.tps_amplitude = None;
            }
            options.grid_n = cfg.align.grid_n;
            let counts: [usize; 3] = counts
                .try_into()
                .map_err(|_| Error::InvalidArgument("--counts takes three values: low,mid,high".into()))?;
            commands::cmd_synth(SynthArgs { counts, options }, &cfg)
        }
        Command::Eval { manifest, common } => {
            let cfg = common.resolve()?;
            commands::cmd_eval(&manifest, &cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Status::Success) => ExitCode::SUCCESS,
        Ok(Status::StitchFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
