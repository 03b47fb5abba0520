//! The `latentlab` command line.
//!
//! Exit codes: 0 success, 1 usage, 2 data or validation failure (including
//! failed checks), 3 numerical failure.

pub mod analysis;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod sweep;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use latentlab::graph::{LatentGraph, RandomGraphParams};
use latentlab::locate::locate_c;
use latentlab::mae::MaskSampler;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use config::{ExperimentConfig, MaeSettings, MaskMode, MaskSpec};
pub use error::{CliError, Result, EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE};

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "LATENTLAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "latentlab", version, about = "Shared-information analysis for masked reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Locate c, s_m and s_mc for one mask and check the conditions.
    Locate(LocateArgs),
    /// Compare the search against the exhaustive oracle on random masks.
    Verify(VerifyArgs),
    /// Sample a dataset from the configured structural model.
    Simulate(StageArgs),
    /// Train the masked autoencoder on a simulated dataset.
    Train(StageArgs),
    /// Score the trained encoder against the true shared block.
    Evaluate(StageArgs),
    /// Level of c across masking ratios and patch sizes.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    /// Graph file.
    #[arg(value_name = "GRAPH")]
    pub path: Option<PathBuf>,
    #[arg(long = "graph", value_name = "PATH")]
    pub flag: Option<PathBuf>,
}

impl GraphArgs {
    fn path(&self) -> Result<&Path> {
        match (&self.path, &self.flag) {
            (Some(a), Some(b)) if a != b => Err(CliError::Usage("two different graph files given".into())),
            (Some(p), _) | (None, Some(p)) => Ok(p),
            (None, None) => Err(CliError::Usage("no graph file given".into())),
        }
    }

    fn load(&self) -> Result<LatentGraph> {
        let path = self.path()?;
        let g = LatentGraph::load(path)?;
        g.ensure_valid()?;
        Ok(g)
    }
}

#[derive(Debug, Args)]
pub struct LocateArgs {
    #[command(flatten)]
    pub graph: GraphArgs,
    /// Comma separated masked observables.
    #[arg(long, value_name = "LIST", conflicts_with = "ratio", allow_hyphen_values = true)]
    pub mask: Option<String>,
    /// Sample the mask with this masking ratio instead.
    #[arg(long, value_name = "R")]
    pub ratio: Option<f64>,
    #[arg(long, value_name = "S", default_value_t = 1)]
    pub patch: usize,
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub seed: u64,
    /// Also write the report to DIR/locate.json.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub graph: GraphArgs,
    #[arg(long, value_name = "K", default_value_t = 50)]
    pub trials: usize,
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub seed: u64,
    /// Draw a random graph (at most 8 latents, 10 observables) per trial.
    #[arg(long, conflicts_with_all = ["path", "flag"])]
    pub random: bool,
    /// Also write the summary to DIR/verify.json.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StageArgs {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Overrides the output directory of the config.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub graph: GraphArgs,
    /// Comma separated masking ratios.
    #[arg(long = "ratio", value_name = "LIST", value_delimiter = ',', default_values_t = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])]
    pub ratios: Vec<f64>,
    /// Comma separated patch sizes.
    #[arg(long = "patch", value_name = "LIST", value_delimiter = ',', default_values_t = [1])]
    pub patches: Vec<usize>,
    /// Masks per cell.
    #[arg(long, value_name = "K", default_value_t = 100)]
    pub trials: usize,
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub seed: u64,
    /// Use every run of consecutive patches instead of random masks.
    #[arg(long)]
    pub contiguous: bool,
    /// Train and evaluate a model per cell with the settings of --config.
    #[arg(long, requires = "config")]
    pub with_training: bool,
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Also write the table to DIR/sweep.csv.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

/// Text for standard output and whether the command's checks passed.
pub struct Outcome {
    pub stdout: String,
    pub ok: bool,
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map(|s| s + "\n").map_err(|e| CliError::Data(e.to_string()))
}

fn save(dir: Option<&Path>, name: &str, text: &str) -> Result<()> {
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        let path = dir.join(name);
        fs::write(&path, text).map_err(CliError::io(&path))?;
    }
    Ok(())
}

fn stage_config(args: &StageArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

pub fn execute(cmd: &Command) -> Result<Outcome> {
    match cmd {
        Command::Locate(a) => {
            let g = a.graph.load()?;
            let mask = match (&a.mask, a.ratio) {
                (Some(list), _) => latentlab::graph::Mask::parse(&g, list)?,
                (None, Some(r)) => MaskSampler::for_graph(&g, r, a.patch)?.sample_mask(&mut ChaCha8Rng::seed_from_u64(a.seed)),
                (None, None) => return Err(CliError::Usage("give --mask or --ratio".into())),
            };
            let report = analysis::locate_report(&g, &mask)?;
            let text = json(&report)?;
            save(a.out.as_deref(), "locate.json", &text)?;
            Ok(Outcome { ok: report.all_ok(), stdout: text })
        }
        Command::Verify(a) => {
            let summary = if a.random {
                analysis::verify_random_graphs(a.trials, a.seed, &RandomGraphParams::default(), locate_c)?
            } else {
                analysis::verify_graph(&a.graph.load()?, a.trials, a.seed, locate_c)?
            };
            let text = json(&summary)?;
            save(a.out.as_deref(), "verify.json", &text)?;
            Ok(Outcome { ok: summary.ok(), stdout: text })
        }
        Command::Simulate(a) => Ok(Outcome { stdout: json(&pipeline::simulate(&stage_config(a)?)?)?, ok: true }),
        Command::Train(a) => {
            let report = pipeline::train_stage(&stage_config(a)?)?;
            Ok(Outcome { stdout: json(&report)?, ok: true })
        }
        Command::Evaluate(a) => Ok(Outcome { stdout: json(&pipeline::evaluate(&stage_config(a)?)?)?, ok: true }),
        Command::Sweep(a) => {
            let g = a.graph.load()?;
            let cfg = sweep::SweepConfig {
                ratios: a.ratios.clone(),
                patches: a.patches.clone(),
                k_masks: a.trials,
                seed: a.seed,
                contiguous: a.contiguous,
            };
            let rows = match &a.config {
                Some(path) if a.with_training => sweep::sweep_with_training(&g, &cfg, &ExperimentConfig::load(path)?)?,
                _ => sweep::sweep(&g, &cfg)?,
            };
            let text = sweep::to_csv(&rows);
            save(a.out.as_deref(), "sweep.csv", &text)?;
            Ok(Outcome { stdout: text, ok: true })
        }
    }
}

/// Applies the thread cap from the environment; later calls are no-ops.
fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{value}`")))?;
    if n == 0 {
        return Err(CliError::Usage(format!("{THREADS_ENV} must be positive")));
    }
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args`, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = init_threads().and_then(|_| execute(&cli.command));
    match result {
        Ok(out) => {
            print!("{}", out.stdout);
            if out.ok {
                EXIT_OK
            } else {
                EXIT_DATA
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
