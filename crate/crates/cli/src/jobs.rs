//! Resolved job configurations, their execution, and run manifests.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use tiltfuse::fusion::{estimate, EstimatorConfig, FusionResult, Mode};
use tiltfuse::inference::{beta_names, parametric_bootstrap, sandwich_covariance, PipelineConfig, StreamPolicy};
use tiltfuse::{
    load_panel, load_summary, run_comparison, validate_problem, Block, Diagnostics, Error, Family, FusionProblem,
    MarginalSummary, PanelSchema, SimConfig, SummarySlot, TiltSpec,
};

use crate::report::{
    coefficient_table, matrix_rows, percentile_rows, simulation_table, tilt_line, wald_rows, CoefficientRow,
    CovarianceReport, EstimateReport,
};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug)]
pub enum JobError {
    Validation(String),
    NonConvergence(String),
    Io(String),
}

impl JobError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        JobError::Io(format!("{}: {e}", path.display()))
    }

    fn code(&self) -> u8 {
        match self {
            JobError::Validation(_) => 2,
            JobError::NonConvergence(_) => 3,
            JobError::Io(_) => 4,
        }
    }

    pub fn report(&self) -> ExitCode {
        eprintln!("error: {self}");
        ExitCode::from(self.code())
    }
}

impl fmt::Display for JobError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JobError::Validation(m) | JobError::NonConvergence(m) | JobError::Io(m) => f.write_str(m),
        }
    }
}

impl From<Error> for JobError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } => JobError::Io(e.to_string()),
            Error::Convergence { .. } => JobError::NonConvergence(e.to_string()),
            _ => JobError::Validation(e.to_string()),
        }
    }
}

type JobResult<T> = std::result::Result<T, JobError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputPaths {
    pub panel: PathBuf,
    pub x_cols: Vec<String>,
    pub z_cols: Vec<String>,
    pub c_cols: Vec<String>,
    pub summary_x: PathBuf,
    pub summary_z: PathBuf,
    pub marginals: Vec<PathBuf>,
    pub marginal_tilt: bool,
    pub weights_x: Option<PathBuf>,
    pub weights_z: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateJob {
    pub inputs: InputPaths,
    pub mode: Mode,
    pub tilt_candidates: Vec<String>,
    pub split: f64,
    pub seed: u64,
    pub intercept_start: f64,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapJob {
    pub fit: EstimateJob,
    pub reps: usize,
    pub policy: StreamPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateJob {
    pub sim: SimConfig,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Job {
    Estimate(EstimateJob),
    Bootstrap(BootstrapJob),
    Simulate(SimulateJob),
}

impl Job {
    fn threads(&self) -> Option<usize> {
        match self {
            Job::Estimate(j) => j.threads,
            Job::Bootstrap(j) => j.fit.threads,
            Job::Simulate(j) => j.threads,
        }
    }
}

/// Full resolved configuration of a run; the output directory is not part
/// of it, so a replay elsewhere writes an identical manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub job: Job,
    pub outputs: Vec<String>,
}

pub fn read_manifest(path: &Path) -> JobResult<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| JobError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| JobError::Validation(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> JobResult<()> {
    std::fs::write(path, text).map_err(|e| JobError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> JobResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| JobError::Validation(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

/// Runs a job, writes its outputs and manifest under `out`, and returns
/// the exit status.
pub fn run(job: &Job, out: &Path) -> JobResult<ExitCode> {
    std::fs::create_dir_all(out).map_err(|e| JobError::io(out, e))?;
    if let Some(t) = job.threads() {
        if t == 0 {
            return Err(JobError::Validation("--threads must be positive".into()));
        }
        // A pool may already exist when several jobs share a process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let (outputs, status) = match job {
        Job::Estimate(j) => run_estimate(j, out)?,
        Job::Bootstrap(j) => run_bootstrap(j, out)?,
        Job::Simulate(j) => run_simulate(j, out)?,
    };
    let manifest = Manifest {
        tool: "tiltfuse".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        job: job.clone(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    match status {
        Ok(()) => Ok(ExitCode::SUCCESS),
        Err(e) => Ok(e.report()),
    }
}

type RunOutcome = (Vec<&'static str>, JobResult<()>);

fn read_weights(path: &Path, n: usize) -> JobResult<DVector<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => JobError::Io(format!("{}: {e}", path.display())),
            _ => JobError::Validation(format!("{}: {e}", path.display())),
        })?;
    let mut values = Vec::with_capacity(n);
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| JobError::Validation(format!("{}: {e}", path.display())))?;
        let cell = rec.get(0).unwrap_or("");
        let v: f64 = cell.parse().map_err(|_| {
            JobError::Validation(format!("{}: row {}: \"{cell}\" is not a number", path.display(), i + 1))
        })?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(JobError::Validation(format!(
                "{}: row {}: weight must be finite and non-negative",
                path.display(),
                i + 1
            )));
        }
        values.push(v);
    }
    if values.len() != n {
        return Err(JobError::Validation(format!(
            "{}: {} weights for {n} panel rows",
            path.display(),
            values.len()
        )));
    }
    Ok(DVector::from_vec(values))
}

struct Loaded {
    problem: FusionProblem,
    candidates_x: Vec<TiltSpec>,
    candidates_z: Vec<TiltSpec>,
    known: Option<(DVector<f64>, DVector<f64>)>,
    estimator: EstimatorConfig,
    diagnostics: Diagnostics,
}

fn load(job: &EstimateJob) -> JobResult<Loaded> {
    let i = &job.inputs;
    let schema = PanelSchema {
        x: i.x_cols.clone(),
        z: i.z_cols.clone(),
        c: i.c_cols.clone(),
    };
    let panel = load_panel(&i.panel, &schema)?;
    let summary_x = load_summary(&i.summary_x)?;
    let summary_z = load_summary(&i.summary_z)?;
    let (mut mx, mut mz) = (None, None);
    for path in &i.marginals {
        let m = MarginalSummary::load(path)?;
        let slot = match m.block {
            Block::X => &mut mx,
            Block::Z => &mut mz,
            Block::C => {
                return Err(JobError::Validation(format!(
                    "{}: marginal summaries must cover the X or Z block",
                    path.display()
                )))
            }
        };
        if slot.is_some() {
            return Err(JobError::Validation(format!(
                "{}: second marginal file for one study",
                path.display()
            )));
        }
        *slot = Some(m);
    }
    if i.marginal_tilt && (mx.is_none() || mz.is_none()) {
        return Err(JobError::Validation(
            "--marginal-tilt needs marginal summaries for both studies".into(),
        ));
    }
    let problem = FusionProblem::new(panel, summary_x, summary_z, Family::Logistic)?.with_marginals(mx, mz);
    let mut diagnostics = validate_problem(&problem);
    let mut candidates_x = vec![];
    let mut candidates_z = vec![];
    if job.mode == Mode::Calibrated {
        if job.tilt_candidates.is_empty() {
            return Err(JobError::Validation("no tilt candidates".into()));
        }
        for (slot, list) in [(SummarySlot::X, &mut candidates_x), (SummarySlot::Z, &mut candidates_z)] {
            let covered = problem.summary(slot).covered_blocks().to_vec();
            for c in &job.tilt_candidates {
                let spec = TiltSpec::parse(c, &problem.panel, &covered)?;
                if !i.marginal_tilt {
                    diagnostics.check_tilt(slot, spec.name(), spec.feature_count());
                }
                list.push(spec);
            }
        }
    }
    if !diagnostics.passed() {
        return Err(JobError::Validation(format!(
            "problem validation failed: {}",
            diagnostics.issues.join("; ")
        )));
    }
    let known = match (job.mode, &i.weights_x, &i.weights_z) {
        (Mode::KnownWeights, Some(wx), Some(wz)) => {
            let n = problem.panel.n_rows();
            Some((read_weights(wx, n)?, read_weights(wz, n)?))
        }
        (Mode::KnownWeights, _, _) => {
            return Err(JobError::Validation(
                "--mode known_weights needs --weights-x and --weights-z".into(),
            ))
        }
        _ => None,
    };
    if !(job.split > 0.0 && job.split < 1.0) {
        return Err(JobError::Validation(format!("split {} outside (0, 1)", job.split)));
    }
    let estimator = EstimatorConfig {
        mode: job.mode,
        intercept_start: job.intercept_start,
        marginal_tilt: i.marginal_tilt,
        ..EstimatorConfig::default()
    };
    estimator.validate()?;
    Ok(Loaded {
        problem,
        candidates_x,
        candidates_z,
        known,
        estimator,
        diagnostics,
    })
}

fn fit(job: &EstimateJob, l: &Loaded) -> JobResult<FusionResult> {
    Ok(estimate(
        &l.problem,
        &l.estimator,
        &l.candidates_x,
        &l.candidates_z,
        job.split,
        job.seed,
        l.known.as_ref().map(|(a, b)| (a, b)),
    )?)
}

fn print_fit(rows: &[CoefficientRow], report: &EstimateReport) {
    print!("{}", coefficient_table(rows));
    print!("{}", tilt_line("tilt x", report.tilt_x.as_ref(), &report.candidates_x));
    print!("{}", tilt_line("tilt z", report.tilt_z.as_ref(), &report.candidates_z));
}

fn not_converged(what: &str, fit: &FusionResult) -> JobError {
    JobError::NonConvergence(format!(
        "{what} did not converge (gradient {:.3e} after {} iterations)",
        fit.gradient_norm, fit.iterations
    ))
}

fn run_estimate(job: &EstimateJob, out: &Path) -> JobResult<RunOutcome> {
    let l = load(job)?;
    let result = fit(job, &l)?;
    let names = beta_names(&l.problem);
    let beta: Vec<f64> = result.beta().iter().copied().collect();
    let single = job.mode == Mode::Homogeneity
        || (job.mode == Mode::Calibrated && job.tilt_candidates.len() == 1 && !job.inputs.marginal_tilt);
    let (covariance, note) = if !result.converged {
        (None, Some("fit did not converge".to_string()))
    } else if !single {
        (
            None,
            Some("sandwich covariance needs a single tilt candidate; use the bootstrap".to_string()),
        )
    } else {
        match sandwich_covariance(&l.problem, &result) {
            Ok(c) => (Some(c), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    let se: Option<Vec<f64>> = covariance
        .as_ref()
        .map(|c| c.standard_errors().rows(0, beta.len()).iter().copied().collect());
    let rows = wald_rows(&names, &beta, se.as_deref());
    let cov_report = covariance.map(|c| CovarianceReport {
        source: format!("{:?}", c.source).to_lowercase(),
        dims: c.dims,
        matrix: matrix_rows(&c.covariance),
    });
    let report = EstimateReport::new(job.mode, &result, rows.clone(), cov_report, note, l.diagnostics.clone());
    write_json(&out.join("result.json"), &report)?;
    print_fit(&rows, &report);
    let status = if result.converged {
        Ok(())
    } else {
        Err(not_converged("estimation", &result))
    };
    Ok((vec!["result.json"], status))
}

#[derive(Debug, Serialize)]
struct BootstrapReport {
    reps: usize,
    failures: usize,
    flagged: bool,
    policy: StreamPolicy,
    /// Percentile intervals around the original-data estimate.
    coefficients: Vec<CoefficientRow>,
    covariance: Vec<Vec<f64>>,
    estimate: EstimateReport,
}

fn run_bootstrap(job: &BootstrapJob, out: &Path) -> JobResult<RunOutcome> {
    if job.reps < 2 {
        return Err(JobError::Validation(format!(
            "bootstrap needs at least 2 replicates, got {}",
            job.reps
        )));
    }
    let l = load(&job.fit)?;
    let result = fit(&job.fit, &l)?;
    if !result.converged {
        return Err(not_converged("estimation on the original data", &result));
    }
    let pipeline = PipelineConfig {
        estimator: l.estimator,
        candidates_x: l.candidates_x.clone(),
        candidates_z: l.candidates_z.clone(),
        split: job.fit.split,
        split_seed: job.fit.seed,
    };
    let boot = parametric_bootstrap(&l.problem, &pipeline, job.reps, job.fit.seed, job.policy)?;
    let names = beta_names(&l.problem);
    boot.write_archive(out.join("bootstrap.csv"), &names)?;
    let beta: Vec<f64> = result.beta().iter().copied().collect();
    let se: Vec<f64> = boot.estimate.standard_errors().iter().copied().collect();
    let lower: Vec<f64> = boot.lower.iter().copied().collect();
    let upper: Vec<f64> = boot.upper.iter().copied().collect();
    let rows = percentile_rows(&names, &beta, &se, &lower, &upper);
    let estimate = EstimateReport::new(
        job.fit.mode,
        &result,
        wald_rows(&names, &beta, None),
        None,
        None,
        l.diagnostics.clone(),
    );
    let report = BootstrapReport {
        reps: job.reps,
        failures: boot.failures,
        flagged: boot.flagged,
        policy: job.policy,
        coefficients: rows.clone(),
        covariance: matrix_rows(&boot.estimate.covariance),
        estimate,
    };
    write_json(&out.join("bootstrap.json"), &report)?;
    print_fit(&rows, &report.estimate);
    println!("bootstrap: {} replicates, {} failed", job.reps, boot.failures);
    let status = if boot.flagged {
        Err(JobError::NonConvergence(format!(
            "{} of {} bootstrap replicates failed",
            boot.failures, job.reps
        )))
    } else {
        Ok(())
    };
    Ok((vec!["bootstrap.csv", "bootstrap.json"], status))
}

fn run_simulate(job: &SimulateJob, out: &Path) -> JobResult<RunOutcome> {
    job.sim.validate()?;
    let output = run_comparison(&job.sim)?;
    write_json(&out.join("sim_summary.json"), &output.summary)?;
    output.write_archive(out.join("sim_replicates.csv"))?;
    print!("{}", simulation_table(&output.summary));
    let rate = output.summary.failure_rate();
    let status = if rate > 0.1 {
        Err(JobError::NonConvergence(format!(
            "{:.1}% of replicates failed for at least one method",
            100.0 * rate
        )))
    } else {
        Ok(())
    };
    Ok((vec!["sim_summary.json", "sim_replicates.csv"], status))
}
