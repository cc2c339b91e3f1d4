//! `d2feat` command-line front end.
//!
//! Exit codes: 0 success, 1 test failure, 2 I/O error, 3 format or usage
//! error, 4 shape error.

mod commands;
mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use d2feat::convnet::Variant;

use crate::output::{CliError, ExitCode};

#[derive(Parser, Debug)]
#[command(name = "d2feat", version, about = "Dense describe-and-detect local features")]
struct Cli {
    /// Worker threads (defaults to all available cores).
    #[arg(long, global = true, env = "D2_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that runs the backbone.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Weight bank (`.d2wb`); the bundled tiny random bank when omitted.
    #[arg(long)]
    pub weights: Option<PathBuf>,

    /// Backbone variant: `test` (stride 4, dilated) or `train` (stride 8).
    #[arg(long, default_value = "test")]
    pub variant: Variant,

    /// Detect on the 0.5 / 1 / 2 image pyramid.
    #[arg(long)]
    pub multiscale: bool,

    /// Keep only the highest-scoring keypoints.
    #[arg(long)]
    pub max_keypoints: Option<usize>,

    /// Downscale inputs so the longer edge is at most this many pixels.
    #[arg(long)]
    pub max_edge: Option<usize>,

    /// Force the ReLU after the last conv on or off (default: weight metadata).
    #[arg(long)]
    pub final_relu: Option<bool>,

    /// Map feature cells to the centre of their pixel block.
    #[arg(long)]
    pub centered_cells: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract keypoints and descriptors from a PGM/PPM image.
    Extract {
        image: PathBuf,
        /// Output feature file (`.d2f`).
        #[arg(long)]
        out: PathBuf,
        /// Also write `x,y,scale,score` rows here.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Mutual nearest-neighbour matching of two feature files.
    Match {
        features_a: PathBuf,
        features_b: PathBuf,
        /// Ratio-test threshold; 1 keeps every mutual match.
        #[arg(long, default_value_t = 1.0)]
        ratio: f64,
        /// Output CSV (`index_a,index_b,distance,ratio`).
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean matching accuracy over image pairs with known homographies.
    EvalMma {
        /// Text file with `imageA imageB H-file` per line; paths relative to it.
        /// Images may also be pre-extracted `.d2f` files.
        #[arg(long)]
        pairs: PathBuf,
        /// Output CSV (`threshold,mma`).
        #[arg(long)]
        out: PathBuf,
        /// Ratio-test threshold applied before scoring.
        #[arg(long, default_value_t = 1.0)]
        ratio: f64,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Ratio-test histograms of correct and incorrect matches.
    RatioPdf {
        /// Same format as for `eval-mma`.
        #[arg(long)]
        pairs: PathBuf,
        /// Output CSV (`bin_low,bin_high,correct,incorrect`).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Ratio threshold for the filtered / lost statistics.
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Ground-truth correspondences from two posed depth maps.
    GenCorr {
        /// Depth map of image 1 (`.d2wb`, entry "data").
        #[arg(long)]
        depth1: PathBuf,
        /// Camera of image 1 (JSON: fx, fy, cx, cy, R, t).
        #[arg(long)]
        camera1: PathBuf,
        #[arg(long)]
        depth2: PathBuf,
        #[arg(long)]
        camera2: PathBuf,
        /// Relative depth-consistency tolerance.
        #[arg(long, default_value_t = d2feat::geometry::DEFAULT_DEPTH_TOLERANCE)]
        tolerance: f64,
        /// Pixels sampled for the overlap estimate.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV (`x1,y1,x2,y2`).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the training loss and verify its gradient.
    LossCheck(commands::LossCheckArgs),
    /// A few plain gradient-descent steps on a synthetic pair.
    LossDemo {
        #[arg(long, default_value_t = 16)]
        h: usize,
        #[arg(long, default_value_t = 16)]
        w: usize,
        #[arg(long, default_value_t = 8)]
        c: usize,
        #[arg(long, default_value_t = 8)]
        correspondences: usize,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the built-in oracle suites.
    Selftest {
        /// Directory with replacement fixtures (`<suite>.d2wb`).
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// Gradient-check probes per instance.
        #[arg(long, default_value_t = 64)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    match cli.command {
        Command::Extract { image, out, csv, model } => commands::extract(&image, &out, csv.as_deref(), &model),
        Command::Match { features_a, features_b, ratio, out } => {
            commands::match_files(&features_a, &features_b, ratio, &out)
        }
        Command::EvalMma { pairs, out, ratio, model } => commands::eval_mma(&pairs, &out, ratio, &model),
        Command::RatioPdf { pairs, out, bins, threshold, model } => {
            commands::ratio_pdf(&pairs, &out, bins, threshold, &model)
        }
        Command::GenCorr { depth1, camera1, depth2, camera2, tolerance, samples, seed, out } => {
            commands::gen_corr(&depth1, &camera1, &depth2, &camera2, tolerance, samples, seed, &out)
        }
        Command::LossCheck(args) => commands::loss_check(&args),
        Command::LossDemo { h, w, c, correspondences, steps, lr, seed } => {
            commands::loss_demo(h, w, c, correspondences, steps, lr, seed)
        }
        Command::Selftest { fixtures, probes, seed } => commands::selftest(fixtures.as_deref(), probes, seed),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { ExitCode::Format } else { ExitCode::Ok };
            let _ = e.print();
            std::process::exit(code as i32);
        }
    };
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    };
    std::process::exit(code as i32);
}
