//! Command-line front end: dataset generation, training, completion,
//! evaluation, the visibility sweep and the registration test.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use vpcnet::registration::RotationMetric;

use crate::commands::{Outcome, DEFAULT_RATIOS};
use crate::config::RunConfig;
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "vpcnet", version, about = "Vehicle point cloud completion")]
pub struct Cli {
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for the parallel stages.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory that receives the timestamped run directories.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RotMetricArg {
    /// Twice the geodesic angle, as the error formula is usually printed.
    Printed,
    Geodesic,
}

impl From<RotMetricArg> for RotationMetric {
    fn from(m: RotMetricArg) -> Self {
        match m {
            RotMetricArg::Printed => RotationMetric::Printed,
            RotMetricArg::Geodesic => RotationMetric::Geodesic,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render partial scans and sample complete clouds from a mesh directory.
    Datagen {
        meshes: PathBuf,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        n_gt: Option<usize>,
    },
    /// Train on a generated dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Complete one point cloud with a trained checkpoint.
    Complete {
        #[arg(long)]
        checkpoint: PathBuf,
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Refine the dense cloud alone instead of resampling it merged
        /// with the input.
        #[arg(long)]
        no_refiner_fps: bool,
    },
    /// Score predictions against ground truth, matched by relative path.
    Eval {
        pred: PathBuf,
        gt: PathBuf,
        /// Inputs the predictions were made from, for the overlap column.
        #[arg(long)]
        partial: Option<PathBuf>,
    },
    /// Completion quality as a function of the visible fraction.
    Robustness {
        #[arg(long)]
        checkpoint: PathBuf,
        mesh: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RATIOS)]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 4)]
        trials: usize,
    },
    /// ICP on partial and on completed pairs, with errors against the true motion.
    Register {
        partial: PathBuf,
        completed: PathBuf,
        #[arg(long, value_enum, default_value_t = RotMetricArg::Printed)]
        rot_metric: RotMetricArg,
    },
}

/// The configuration file (or defaults) with command-line overrides applied.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    match &cli.command {
        Command::Datagen { views, n_gt, .. } => {
            cfg.n_views = views.unwrap_or(cfg.n_views);
            cfg.n_gt = n_gt.unwrap_or(cfg.n_gt);
        }
        Command::Train { data, steps } => {
            if data.is_some() {
                cfg.data = data.clone();
            }
            cfg.steps = steps.unwrap_or(cfg.steps);
        }
        Command::Complete { no_refiner_fps, .. } if *no_refiner_fps => cfg.refiner_fps = false,
        _ => {}
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    if let Some(n) = cli.threads {
        // fails only if a pool already exists, in which case it is kept
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("thread pool already initialized");
        }
    }
    let cfg = effective_config(cli)?;
    match &cli.command {
        Command::Datagen { meshes, .. } => commands::datagen(&cfg, meshes),
        Command::Train { .. } => commands::train(&cfg),
        Command::Complete {
            checkpoint,
            input,
            output,
            no_refiner_fps,
        } => commands::complete(&cfg, checkpoint, input, output.as_deref(), *no_refiner_fps),
        Command::Eval { pred, gt, partial } => commands::eval(&cfg, pred, gt, partial.as_deref()),
        Command::Robustness {
            checkpoint,
            mesh,
            ratios,
            trials,
        } => commands::robustness(&cfg, checkpoint, mesh, ratios, *trials),
        Command::Register {
            partial,
            completed,
            rot_metric,
        } => commands::register(&cfg, partial, completed, (*rot_metric).into()),
    }
}

/// Parses `args`, runs the command, prints its summary and returns the exit
/// code: 0 on success, 2 for empty input, 1 for any other failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(out) => {
            println!("{}", out.summary);
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
