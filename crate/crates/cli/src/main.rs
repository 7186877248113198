//! `splatseg`: lift, render, evaluate, pair, edit and export scene bundles.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error. Failures print one
//! JSON line `{"error": {"code": .., "exit": .., "message": ..}}` on stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "splatseg", version, about = "Segmentation lifting on pixel-aligned Gaussian scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SceneKind {
    /// Two labeled objects on a wall, two context views and one target.
    Wall,
    /// Two views whose per-view argmax disagrees on the object's query.
    Disagreement,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Mode {
    Context,
    Novel,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Perceptual {
    None,
    /// `1 - SSIM` as a stand-in for a learned perceptual metric.
    Ssim,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic scene bundle with known ground truth.
    Synth {
        #[arg(long, value_enum)]
        scene: SceneKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive label maps and the 3D segmentation field from a bundle.
    Lift {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tau_c: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        /// Skip multi-view mask aggregation.
        #[arg(long)]
        no_aggregate: bool,
    },
    /// Render RGB, depth and id maps into context, target or given cameras.
    Render {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Segmentation field written by `lift`; enables id maps.
        #[arg(long)]
        segmentation: Option<PathBuf>,
        /// JSON list of camera records to render instead of the context views.
        #[arg(long, conflicts_with = "targets")]
        cameras: Option<PathBuf>,
        /// Render the bundle's held-out target cameras.
        #[arg(long)]
        targets: bool,
        /// With --targets, also write a copy of the bundle carrying the renders.
        #[arg(long, requires = "targets")]
        bundle_out: Option<PathBuf>,
    },
    /// Evaluate a prediction bundle against a ground-truth bundle.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value = "context")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlap matrix of depth frames and band-sampled context pairs.
    Pair {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lo: Option<f64>,
        #[arg(long)]
        hi: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        tau_d: Option<f64>,
    },
    /// Apply an edit plan to a lifted scene.
    Edit {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        segmentation: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ply: Option<PathBuf>,
    },
    /// Training loss components for a bundle with ground truth.
    Loss {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "none")]
        perceptual: Perceptual,
    },
    /// Export the Gaussian field as a 3D Gaussian splatting PLY file.
    Export {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        ply: PathBuf,
    },
    /// Run every oracle comparison at a quick size.
    Selftest {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let failure = commands::Failure::usage(e.kind().to_string());
            eprintln!("{}", failure.json_line());
            return ExitCode::from(failure.exit);
        }
    };
    let result = match cli.cmd {
        Command::Synth { scene, out } => commands::synth(scene, &out),
        Command::Lift {
            bundle,
            out,
            tau_c,
            tau,
            no_aggregate,
        } => commands::lift(&bundle, &out, tau_c, tau, !no_aggregate),
        Command::Render {
            bundle,
            out,
            segmentation,
            cameras,
            targets,
            bundle_out,
        } => commands::render(&bundle, &out, segmentation.as_deref(), cameras.as_deref(), targets, bundle_out.as_deref()),
        Command::Metrics { pred, gt, mode, out } => commands::metrics(&pred, &gt, mode, &out),
        Command::Pair {
            bundle,
            out,
            lo,
            hi,
            seed,
            count,
            tau_d,
        } => commands::pair(&bundle, &out, lo, hi, seed, count, tau_d),
        Command::Edit {
            bundle,
            segmentation,
            plan,
            out,
            ply,
        } => commands::edit(&bundle, &segmentation, &plan, &out, ply.as_deref()),
        Command::Loss { bundle, out, perceptual } => commands::loss(&bundle, out.as_deref(), perceptual),
        Command::Export { bundle, ply } => commands::export(&bundle, &ply),
        Command::Selftest { seed } => commands::selftest(seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.json_line());
            ExitCode::from(f.exit)
        }
    }
}
