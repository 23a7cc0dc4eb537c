//! Batch entry point: `estimate`, `bootstrap`, `simulate` and `replay`.

mod jobs;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tiltfuse::fusion::Mode;
use tiltfuse::inference::StreamPolicy;
use tiltfuse::{CovariateModel, Design, Scenario, SimConfig};

use crate::jobs::{BootstrapJob, EstimateJob, InputPaths, Job, SimulateJob};

#[derive(Debug, Parser)]
#[command(
    name = "tiltfuse",
    version,
    about = "Fuse a covariate panel with external GLM summaries"
)]
struct Cli {
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the fused model once.
    Estimate(EstimateArgs),
    /// Fit, then run the parametric bootstrap.
    Bootstrap(BootstrapArgs),
    /// Run a simulation study comparing NW, TW and W.
    Simulate(SimulateArgs),
    /// Rerun the job recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Covariate panel (delimited text with a header row).
    #[arg(long)]
    panel: PathBuf,
    /// Panel columns forming the X block.
    #[arg(long, value_delimiter = ',', required = true)]
    x_cols: Vec<String>,
    #[arg(long, value_delimiter = ',', required = true)]
    z_cols: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    c_cols: Vec<String>,
    /// Working-model summary of the study covering X (and C).
    #[arg(long)]
    summary_x: PathBuf,
    #[arg(long)]
    summary_z: PathBuf,
    /// Univariable summaries; each file's block decides its study.
    #[arg(long, value_delimiter = ',')]
    marginals: Vec<PathBuf>,
    /// Fit univariable tilts from the marginal summaries.
    #[arg(long)]
    marginal_tilt: bool,
    /// One weight per panel row, for `--mode known_weights`.
    #[arg(long)]
    weights_x: Option<PathBuf>,
    #[arg(long)]
    weights_z: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    inputs: InputArgs,
    #[arg(long, default_value = "calibrated")]
    mode: Mode,
    #[arg(long, value_delimiter = ',', default_value = "additive,additive_with_interactions")]
    tilt_candidates: Vec<String>,
    #[arg(long, default_value_t = 0.8)]
    split: f64,
    #[arg(long)]
    seed: u64,
    /// Starting value of the full-model intercept.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    intercept_start: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Debug, Args)]
struct BootstrapArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, default_value_t = 200)]
    bootstrap_reps: usize,
    /// Give every replicate the same random stream (diagnostic only).
    #[arg(long)]
    identical_streams: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// JSON simulation config used as the base before flag overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long)]
    covariate_model: Option<CovariateModel>,
    #[arg(long)]
    design: Option<Design>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_delimiter = ',')]
    tilt_candidates: Option<Vec<String>>,
    #[arg(long)]
    split: Option<f64>,
    /// Also compute sandwich intervals and their coverage.
    #[arg(long)]
    inference: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    manifest: PathBuf,
    /// Output directory; defaults to the manifest's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl FitArgs {
    fn into_job(self) -> EstimateJob {
        let i = self.inputs;
        EstimateJob {
            inputs: InputPaths {
                panel: i.panel,
                x_cols: i.x_cols,
                z_cols: i.z_cols,
                c_cols: i.c_cols,
                summary_x: i.summary_x,
                summary_z: i.summary_z,
                marginals: i.marginals,
                marginal_tilt: i.marginal_tilt,
                weights_x: i.weights_x,
                weights_z: i.weights_z,
            },
            mode: self.mode,
            tilt_candidates: self.tilt_candidates,
            split: self.split,
            seed: self.seed,
            intercept_start: self.intercept_start,
            threads: self.threads,
        }
    }
}

fn simulate_job(a: SimulateArgs) -> Result<(SimulateJob, PathBuf), jobs::JobError> {
    let mut sim = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| jobs::JobError::io(path, e))?;
            serde_json::from_str::<SimConfig>(&text)
                .map_err(|e| jobs::JobError::Validation(format!("{}: {e}", path.display())))?
        }
        None => SimConfig::default(),
    };
    sim.seed = a.seed;
    if let Some(v) = a.scenario {
        sim.scenario = v;
    }
    if let Some(v) = a.covariate_model {
        sim.covariate_model = v;
    }
    if let Some(v) = a.design {
        sim.design = v;
    }
    if let Some(v) = a.n {
        sim.n = v;
    }
    if let Some(v) = a.replicates {
        sim.replicates = v;
    }
    if let Some(v) = a.tilt_candidates {
        sim.tilt_candidates = v;
    }
    if let Some(v) = a.split {
        sim.split = v;
    }
    sim.inference |= a.inference;
    Ok((
        SimulateJob {
            sim,
            threads: a.threads,
        },
        a.out,
    ))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .init();
    let (job, out) = match cli.command {
        Command::Estimate(a) => {
            let out = a.fit.out.clone();
            (Job::Estimate(a.fit.into_job()), out)
        }
        Command::Bootstrap(a) => {
            let out = a.fit.out.clone();
            let job = BootstrapJob {
                reps: a.bootstrap_reps,
                policy: if a.identical_streams {
                    StreamPolicy::Identical
                } else {
                    StreamPolicy::PerReplicate
                },
                fit: a.fit.into_job(),
            };
            (Job::Bootstrap(job), out)
        }
        Command::Simulate(a) => match simulate_job(a) {
            Ok((job, out)) => (Job::Simulate(job), out),
            Err(e) => return e.report(),
        },
        Command::Replay(a) => match jobs::read_manifest(&a.manifest) {
            Ok(m) => {
                let out = a.out.unwrap_or_else(|| {
                    a.manifest
                        .parent()
                        .map(|p| p.to_path_buf())
                        .unwrap_or_else(|| PathBuf::from("."))
                });
                (m.job, out)
            }
            Err(e) => return e.report(),
        },
    };
    match jobs::run(&job, &out) {
        Ok(code) => code,
        Err(e) => e.report(),
    }
}
