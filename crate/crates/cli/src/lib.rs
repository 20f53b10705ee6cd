//! Command-line driver: synthetic anatomy, lead fields, ground truth,
//! calibration runs and reports.

pub mod commands;
pub mod config;
pub mod failure;
pub mod report;
pub mod svg;

use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use eikonal_twin::feasible::ConstraintMode;
use eikonal_twin::leads::LeadLayout;

use crate::commands::{Context, Overrides};
use crate::config::ExperimentConfig;
use crate::failure::{config_error, Failure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Genmesh,
    Gt,
    Leads,
    Fit,
    Ensemble,
    Sweep,
    Report,
}

#[derive(Debug, Parser)]
#[command(name = "eikonal-twin", version, about = "Geodesic-BP calibration of PMJ sets against ECGs")]
pub struct Args {
    #[arg(value_enum)]
    pub command: Command,
    /// TOML experiment configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory (default: `out` in the working directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Ensemble size.
    #[arg(long)]
    pub count: Option<usize>,
    /// Fit inside the subendocardial band.
    #[arg(long, conflicts_with = "unrestricted")]
    pub restricted: bool,
    /// Fit anywhere in the ventricle.
    #[arg(long)]
    pub unrestricted: bool,
    /// PMJ counts for `sweep`, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    /// Runs per PMJ count for `sweep`.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Lead layout to fit (limb4, ecg12, vest32, vest64, vest128).
    #[arg(long)]
    pub layout: Option<String>,
    /// Let `report` read the hidden ground truth.
    #[arg(long)]
    pub score_vs_gt: bool,
}

impl Args {
    fn overrides(&self) -> Result<Overrides, Failure> {
        let mode = match (self.restricted, self.unrestricted) {
            (true, _) => Some(ConstraintMode::Band),
            (_, true) => Some(ConstraintMode::Unrestricted),
            _ => None,
        };
        let layout = self
            .layout
            .as_deref()
            .map(str::parse::<LeadLayout>)
            .transpose()?;
        Ok(Overrides {
            seed: self.seed,
            out: self.out.clone(),
            count: self.count,
            mode,
            n: self.n.clone(),
            runs: self.runs,
            layout,
            score_vs_gt: self.score_vs_gt,
        })
    }
}

/// Runs one command inside a worker pool of the requested size.
pub fn run(args: &Args) -> Result<(), Failure> {
    let loaded = ExperimentConfig::load(&args.config)?;
    let ctx = Context::new(loaded, args.overrides()?)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = args.jobs {
        if j == 0 {
            return Err(config_error("--jobs must be at least 1"));
        }
        pool = pool.num_threads(j);
    }
    let pool = pool.build().map_err(|e| config_error(format!("worker pool: {e}")))?;
    pool.install(|| match args.command {
        Command::Genmesh => commands::genmesh(&ctx),
        Command::Leads => commands::leads(&ctx),
        Command::Gt => commands::gt(&ctx),
        Command::Fit => commands::fit(&ctx),
        Command::Ensemble => commands::ensemble(&ctx),
        Command::Sweep => commands::sweep(&ctx),
        Command::Report => report::report(&ctx).map(|_| ()),
    })
}
