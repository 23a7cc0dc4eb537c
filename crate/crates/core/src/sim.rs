//! Simulation studies: population generation, biased sampling into the two
//! external studies, and NW / TW / W comparisons over many replicates.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Block, CovariatePanel, FusionProblem, StudyDesign, SummaryInput, SummarySlot};
use crate::error::{Error, Result};
use crate::fusion::{solve_calibrated, solve_homogeneous, solve_known_weights, EstimatorConfig, FusionResult, Method};
use crate::glm::{fit_working_glm, Family};
use crate::inference::sandwich_covariance;
use crate::tilt::TiltSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateModel {
    Linear,
    AbsoluteX,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Additive,
    AdditiveInteraction,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    Prospective,
    CaseControlStudy2,
}

macro_rules! named_enum {
    ($ty:ty, $what:literal, [$(($variant:expr, $name:literal)),+ $(,)?]) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self {
                    $(v if v == $variant => $name,)+
                    _ => unreachable!(),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let norm = s.replace('-', "_");
                $(if norm == $name { return Ok($variant); })+
                Err(Error::Invalid(format!(
                    concat!("unknown ", $what, " \"{}\" (valid: {})"),
                    s,
                    [$($name),+].join(", ")
                )))
            }
        }
    };
}

named_enum!(
    CovariateModel,
    "covariate model",
    [
        (CovariateModel::Linear, "linear"),
        (CovariateModel::AbsoluteX, "absolute_x"),
    ]
);
named_enum!(
    Scenario,
    "scenario",
    [
        (Scenario::Additive, "additive"),
        (Scenario::AdditiveInteraction, "additive_interaction"),
        (Scenario::Full, "full"),
    ]
);
named_enum!(
    Design,
    "design",
    [
        (Design::Prospective, "prospective"),
        (Design::CaseControlStudy2, "case_control_study2"),
    ]
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Size of each external study and of the panel.
    pub n: usize,
    pub covariate_model: CovariateModel,
    pub scenario: Scenario,
    pub design: Design,
    pub replicates: usize,
    pub seed: u64,
    /// Widths of the X, Z and C blocks.
    pub widths: [usize; 3],
    pub beta_truth: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub zeta0: f64,
    pub zeta_x: Vec<f64>,
    pub zeta_z: Vec<f64>,
    pub zeta_c: Vec<f64>,
    /// Common coefficient of every interaction term.
    pub zeta_i: f64,
    /// `ζ_Z` of the full scenario.
    pub zeta_z_full: Vec<f64>,
    pub tilt_candidates: Vec<String>,
    pub split: f64,
    /// Also compute sandwich intervals and their coverage where supported.
    pub inference: bool,
    pub oversize: f64,
    pub max_regrowth: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        let k = 8;
        let sigma = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.5 }).collect())
            .collect();
        Self {
            n: 1000,
            covariate_model: CovariateModel::Linear,
            scenario: Scenario::Additive,
            design: Design::Prospective,
            replicates: 200,
            seed: 1,
            widths: [3, 3, 2],
            beta_truth: vec![-3.0, 0.5, 0.25, -0.5, 0.25, 0.5, -0.25, 0.25, 0.25],
            mu: (0..k).map(|j| if j % 2 == 0 { 0.25 } else { 0.5 }).collect(),
            sigma,
            zeta0: -6.0,
            zeta_x: vec![0.5; 3],
            zeta_z: vec![0.5; 3],
            zeta_c: vec![0.25; 2],
            zeta_i: 0.25,
            zeta_z_full: vec![0.25; 3],
            tilt_candidates: vec!["additive".into(), "additive_with_interactions".into()],
            split: 0.8,
            inference: false,
            oversize: 1.5,
            max_regrowth: 5,
        }
    }
}

impl SimConfig {
    pub fn k(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let [p, q, r] = self.widths;
        if self.n == 0 {
            return Err(Error::Invalid("n must be positive".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Invalid("replicates must be positive".into()));
        }
        if p == 0 || q == 0 {
            return Err(Error::Invalid("X and Z blocks must be non-empty".into()));
        }
        let checks = [
            ("beta_truth", self.beta_truth.len(), 1 + k),
            ("mu", self.mu.len(), k),
            ("sigma rows", self.sigma.len(), k),
            ("zeta_x", self.zeta_x.len(), p),
            ("zeta_z", self.zeta_z.len(), q),
            ("zeta_c", self.zeta_c.len(), r),
            ("zeta_z_full", self.zeta_z_full.len(), q),
        ];
        for (what, found, expected) in checks {
            if found != expected {
                return Err(Error::shape(what, expected, found));
            }
        }
        for row in &self.sigma {
            if row.len() != k {
                return Err(Error::shape("sigma columns", k, row.len()));
            }
        }
        self.sigma_cholesky()?;
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::Invalid(format!("split {} outside (0, 1)", self.split)));
        }
        if !(self.oversize >= 1.0) {
            return Err(Error::Invalid("oversize factor must be at least 1".into()));
        }
        if self.tilt_candidates.is_empty() {
            return Err(Error::Invalid("no tilt candidates".into()));
        }
        Ok(())
    }

    fn sigma_matrix(&self) -> DMatrix<f64> {
        let k = self.k();
        DMatrix::from_fn(k, k, |i, j| self.sigma[i][j])
    }

    fn sigma_cholesky(&self) -> Result<DMatrix<f64>> {
        let s = self.sigma_matrix();
        if (&s - s.transpose()).amax() > 1e-12 {
            return Err(Error::Invalid("sigma is not symmetric".into()));
        }
        Ok(s.cholesky()
            .ok_or_else(|| Error::Invalid("sigma is not positive definite".into()))?
            .l())
    }

    pub fn column_names(&self) -> Vec<String> {
        let [p, q, r] = self.widths;
        (1..=p)
            .map(|j| format!("x{j}"))
            .chain((1..=q).map(|j| format!("z{j}")))
            .chain((1..=r).map(|j| format!("c{j}")))
            .collect()
    }

    pub fn estimator(&self) -> EstimatorConfig {
        EstimatorConfig {
            intercept_start: self.beta_truth[0],
            ..EstimatorConfig::default()
        }
    }
}

/// Covariates with their generated outcomes.
#[derive(Debug, Clone)]
pub struct Population {
    pub covariates: CovariatePanel,
    pub outcomes: Vec<f64>,
}

/// Draws `D ~ N(μ, Σ)` (with `X = |X*|` under `absolute_x`) and logistic
/// outcomes at `beta_truth`.
pub fn generate_population<R: Rng + ?Sized>(config: &SimConfig, size: usize, rng: &mut R) -> Result<Population> {
    if size == 0 {
        return Err(Error::Invalid("population size must be positive".into()));
    }
    let l = config.sigma_cholesky()?;
    let k = config.k();
    let p = config.widths[0];
    let mut values = Vec::with_capacity(size * k);
    let mut outcomes = Vec::with_capacity(size);
    let mut z = vec![0.0; k];
    for _ in 0..size {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let mut theta = config.beta_truth[0];
        for i in 0..k {
            let mut d = config.mu[i];
            for j in 0..=i {
                d += l[(i, j)] * z[j];
            }
            if i < p && config.covariate_model == CovariateModel::AbsoluteX {
                d = d.abs();
            }
            theta += config.beta_truth[1 + i] * d;
            values.push(d);
        }
        let prob = Family::Logistic.mean(theta);
        outcomes.push(if rng.random::<f64>() < prob { 1.0 } else { 0.0 });
    }
    Ok(Population {
        covariates: CovariatePanel::from_row_major(values, size, config.widths, config.column_names())?,
        outcomes,
    })
}

fn pairwise(a: &[f64]) -> f64 {
    let mut s = 0.0;
    for l in 0..a.len() {
        for m in 0..l {
            s += a[l] * a[m];
        }
    }
    s
}

fn cross(a: &[f64], c: &[f64]) -> f64 {
    a.iter().map(|x| x * c.iter().sum::<f64>()).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Selection log-odds `δ` of a covariate row for one external study.
pub fn selection_score(row: &[f64], scenario: Scenario, study: SummarySlot, config: &SimConfig) -> f64 {
    let [p, q, _] = config.widths;
    let (x, rest) = row.split_at(p);
    let (z, c) = rest.split_at(q);
    let base = config.zeta0 + dot(c, &config.zeta_c);
    match (scenario, study) {
        (Scenario::Full, _) => base + dot(x, &config.zeta_x) + dot(z, &config.zeta_z_full),
        (Scenario::Additive, SummarySlot::X) => base + dot(x, &config.zeta_x),
        (Scenario::Additive, SummarySlot::Z) => base + dot(z, &config.zeta_z),
        (Scenario::AdditiveInteraction, SummarySlot::X) => {
            base + dot(x, &config.zeta_x) + config.zeta_i * (pairwise(x) + cross(x, c))
        }
        (Scenario::AdditiveInteraction, SummarySlot::Z) => {
            base + dot(z, &config.zeta_z) + config.zeta_i * (pairwise(z) + cross(z, c))
        }
    }
}

fn inclusion(delta: f64) -> f64 {
    Family::Logistic.mean(delta)
}

/// Accepts each population row with probability `expit(δ)` and keeps the
/// first `target_n` acceptances, in population order.
pub fn sample_from_population<R: Rng + ?Sized>(
    population: &Population,
    scenario: Scenario,
    study: SummarySlot,
    target_n: usize,
    config: &SimConfig,
    rng: &mut R,
) -> Result<Population> {
    let mut keep = Vec::with_capacity(target_n);
    for i in 0..population.covariates.n_rows() {
        let delta = selection_score(population.covariates.row_values(i), scenario, study, config);
        if rng.random::<f64>() < inclusion(delta) {
            keep.push(i);
            if keep.len() == target_n {
                break;
            }
        }
    }
    if keep.len() < target_n {
        return Err(Error::Invalid(format!(
            "population of {} yielded {} of {target_n} selected rows",
            population.covariates.n_rows(),
            keep.len()
        )));
    }
    Ok(subset(population, &keep))
}

fn subset(pop: &Population, rows: &[usize]) -> Population {
    Population {
        covariates: pop.covariates.select_rows(rows),
        outcomes: rows.iter().map(|&i| pop.outcomes[i]).collect(),
    }
}

fn concat(parts: &[Population], config: &SimConfig) -> Result<Population> {
    let n: usize = parts.iter().map(|p| p.covariates.n_rows()).sum();
    let mut values = Vec::with_capacity(n * config.k());
    let mut outcomes = Vec::with_capacity(n);
    for p in parts {
        for i in 0..p.covariates.n_rows() {
            values.extend_from_slice(p.covariates.row_values(i));
        }
        outcomes.extend_from_slice(&p.outcomes);
    }
    Ok(Population {
        covariates: CovariatePanel::from_row_major(values, n, config.widths, config.column_names())?,
        outcomes,
    })
}

/// Mean `expit(δ)` over a pilot population.
fn acceptance_estimate<R: Rng + ?Sized>(
    config: &SimConfig,
    scenario: Scenario,
    study: SummarySlot,
    rng: &mut R,
) -> Result<f64> {
    let pilot = generate_population(config, 5000, rng)?;
    let total: f64 = (0..pilot.covariates.n_rows())
        .map(|i| inclusion(selection_score(pilot.covariates.row_values(i), scenario, study, config)))
        .sum();
    Ok((total / 5000.0).max(1e-6))
}

/// Biased sample of exactly `target_n` rows from freshly generated
/// populations, oversized by the configured factor and regrown as needed.
pub fn sample_study<R: Rng + ?Sized>(
    config: &SimConfig,
    scenario: Scenario,
    study: SummarySlot,
    target_n: usize,
    rng: &mut R,
) -> Result<Population> {
    let rate = acceptance_estimate(config, scenario, study, rng)?;
    let mut parts: Vec<Population> = vec![];
    let mut have = 0;
    for _ in 0..=config.max_regrowth {
        let need = target_n - have;
        let size = ((need as f64 / rate) * config.oversize).ceil() as usize;
        let pop = generate_population(config, size.max(1), rng)?;
        let mut keep = vec![];
        for i in 0..pop.covariates.n_rows() {
            let delta = selection_score(pop.covariates.row_values(i), scenario, study, config);
            if rng.random::<f64>() < inclusion(delta) {
                keep.push(i);
                if keep.len() == need {
                    break;
                }
            }
        }
        have += keep.len();
        parts.push(subset(&pop, &keep));
        if have == target_n {
            return concat(&parts, config);
        }
    }
    Err(Error::Invalid(format!(
        "selected only {have} of {target_n} rows after {} regrowths",
        config.max_regrowth
    )))
}

/// Study-2 selection followed by sampling exactly `n_cases` events and
/// `n_controls` non-events without replacement.
pub fn sample_case_control<R: Rng + ?Sized>(
    config: &SimConfig,
    scenario: Scenario,
    n_cases: usize,
    n_controls: usize,
    rng: &mut R,
) -> Result<Population> {
    let pilot = generate_population(config, 5000, rng)?;
    let mut case_rate = 0.0;
    for i in 0..5000 {
        let pi = inclusion(selection_score(
            pilot.covariates.row_values(i),
            scenario,
            SummarySlot::X,
            config,
        ));
        case_rate += pi * pilot.outcomes[i];
    }
    let case_rate = (case_rate / 5000.0).max(1e-6);
    let mut cases: Vec<Population> = vec![];
    let mut controls: Vec<Population> = vec![];
    let (mut n_case, mut n_ctrl) = (0, 0);
    for _ in 0..=config.max_regrowth {
        let need = n_cases.saturating_sub(n_case);
        let size = ((need.max(1) as f64 / case_rate) * config.oversize).ceil() as usize;
        let pop = generate_population(config, size, rng)?;
        let (mut ca, mut co) = (vec![], vec![]);
        for i in 0..pop.covariates.n_rows() {
            let delta = selection_score(pop.covariates.row_values(i), scenario, SummarySlot::X, config);
            if rng.random::<f64>() < inclusion(delta) {
                if pop.outcomes[i] > 0.5 {
                    ca.push(i);
                } else {
                    co.push(i);
                }
            }
        }
        n_case += ca.len();
        n_ctrl += co.len();
        cases.push(subset(&pop, &ca));
        controls.push(subset(&pop, &co));
        if n_case >= n_cases && n_ctrl >= n_controls {
            let all_cases = concat(&cases, config)?;
            let all_controls = concat(&controls, config)?;
            let mut ci: Vec<usize> = (0..n_case).collect();
            let mut ki: Vec<usize> = (0..n_ctrl).collect();
            let (ci, _) = ci.partial_shuffle(rng, n_cases);
            let (ki, _) = ki.partial_shuffle(rng, n_controls);
            let mut ci = ci.to_vec();
            let mut ki = ki.to_vec();
            ci.sort_unstable();
            ki.sort_unstable();
            return concat(&[subset(&all_cases, &ci), subset(&all_controls, &ki)], config);
        }
    }
    Err(Error::Invalid(format!(
        "selected only {n_case} of {n_cases} cases after {} regrowths",
        config.max_regrowth
    )))
}

/// One simulated data set: a fusion problem plus the true selection
/// weights on the panel rows.
#[derive(Debug, Clone)]
pub struct ReplicateData {
    pub problem: FusionProblem,
    pub true_weights_x: DVector<f64>,
    pub true_weights_z: DVector<f64>,
}

fn working_summary(pop: &Population, blocks: Vec<Block>, design: StudyDesign) -> Result<SummaryInput> {
    fit_working_glm(&pop.covariates, &pop.outcomes, &blocks, Family::Logistic)?.to_summary(design, blocks)
}

pub fn replicate_rng(seed: u64, index: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Builds replicate `index`: a size-`n` panel and the two external
/// summaries fitted on their biased samples.
pub fn build_replicate(config: &SimConfig, index: usize) -> Result<ReplicateData> {
    let mut rng = replicate_rng(config.seed, index);
    let panel = generate_population(config, config.n, &mut rng)?.covariates;
    let (study2, design2) = match config.design {
        Design::Prospective => (
            sample_study(config, config.scenario, SummarySlot::X, config.n, &mut rng)?,
            StudyDesign::Prospective { n: config.n },
        ),
        Design::CaseControlStudy2 => {
            let n_cases = config.n / 2;
            let n_controls = config.n - n_cases;
            (
                sample_case_control(config, config.scenario, n_cases, n_controls, &mut rng)?,
                StudyDesign::CaseControl { n_cases, n_controls },
            )
        }
    };
    let study3 = sample_study(config, config.scenario, SummarySlot::Z, config.n, &mut rng)?;
    let summary_x = working_summary(&study2, vec![Block::X, Block::C], design2)?;
    let summary_z = working_summary(
        &study3,
        vec![Block::Z, Block::C],
        StudyDesign::Prospective { n: config.n },
    )?;
    let true_w = |slot| {
        DVector::from_iterator(
            panel.n_rows(),
            (0..panel.n_rows()).map(|i| selection_score(panel.row_values(i), config.scenario, slot, config).exp()),
        )
    };
    let true_weights_x = true_w(SummarySlot::X);
    let true_weights_z = true_w(SummarySlot::Z);
    Ok(ReplicateData {
        problem: FusionProblem::new(panel, summary_x, summary_z, Family::Logistic)?,
        true_weights_x,
        true_weights_z,
    })
}

pub fn candidate_specs(config: &SimConfig, problem: &FusionProblem, slot: SummarySlot) -> Result<Vec<TiltSpec>> {
    let covered = problem.summary(slot).covered_blocks().to_vec();
    config
        .tilt_candidates
        .iter()
        .map(|c| TiltSpec::parse(c, &problem.panel, &covered))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    /// Empty when the method failed.
    pub beta: Vec<f64>,
    pub converged: bool,
    pub error: Option<String>,
    pub tilt_x: Option<String>,
    pub tilt_z: Option<String>,
    pub loops: Option<usize>,
    /// Sandwich standard errors, when requested and supported.
    pub se: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub index: usize,
    pub error: Option<String>,
    pub methods: Vec<MethodOutcome>,
}

fn outcome(method: Method, res: Result<FusionResult>, problem: &FusionProblem, inference: bool) -> MethodOutcome {
    match res {
        Ok(fit) => {
            let se = if inference && fit.converged && method != Method::Tw {
                sandwich_covariance(problem, &fit).ok().map(|e| {
                    e.standard_errors()
                        .rows(0, fit.params.beta.len())
                        .iter()
                        .copied()
                        .collect()
                })
            } else {
                None
            };
            MethodOutcome {
                method,
                beta: fit.params.beta.iter().copied().collect(),
                converged: fit.converged,
                error: None,
                tilt_x: fit.tilt_x.as_ref().map(|t| t.spec.name().to_string()),
                tilt_z: fit.tilt_z.as_ref().map(|t| t.spec.name().to_string()),
                loops: (!fit.loop_trace.is_empty()).then_some(fit.loop_trace.len()),
                se,
            }
        }
        Err(e) => {
            log::warn!("{method} failed: {e}");
            MethodOutcome {
                method,
                beta: vec![],
                converged: false,
                error: Some(e.to_string()),
                tilt_x: None,
                tilt_z: None,
                loops: None,
                se: None,
            }
        }
    }
}

/// Runs NW, TW and W on replicate `index`.
pub fn run_replicate(config: &SimConfig, index: usize) -> ReplicateOutcome {
    let data = match build_replicate(config, index) {
        Ok(d) => d,
        Err(e) => {
            log::warn!("replicate {index} could not be generated: {e}");
            return ReplicateOutcome {
                index,
                error: Some(e.to_string()),
                methods: vec![],
            };
        }
    };
    let prob = &data.problem;
    let est = config.estimator();
    let nw = solve_homogeneous(prob, &est);
    let tw = solve_known_weights(prob, &est, &data.true_weights_x, &data.true_weights_z);
    let w = candidate_specs(config, prob, SummarySlot::X).and_then(|cx| {
        let cz = candidate_specs(config, prob, SummarySlot::Z)?;
        solve_calibrated(
            prob,
            &est,
            &cx,
            &cz,
            config.split,
            config.seed.wrapping_add(index as u64),
        )
    });
    ReplicateOutcome {
        index,
        error: None,
        methods: vec![
            outcome(Method::Nw, nw, prob, config.inference),
            outcome(Method::Tw, tw, prob, config.inference),
            outcome(Method::W, w, prob, config.inference),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSummary {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    /// Monte Carlo standard error of the mean bias.
    pub mcse: f64,
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub converged: usize,
    pub failed: usize,
    /// Non-intercept coefficients.
    pub coefficients: Vec<CoefficientSummary>,
    /// Selected tilt counts, study 2 then study 3.
    pub selections_x: BTreeMap<String, usize>,
    pub selections_z: BTreeMap<String, usize>,
    /// Share of converged case-control alternations.
    pub loop_convergence: Option<f64>,
}

impl MethodSummary {
    pub fn coefficient(&self, name: &str) -> Option<&CoefficientSummary> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub config: SimConfig,
    pub replicates: usize,
    /// Replicates whose data could not be generated.
    pub generation_failures: usize,
    pub methods: Vec<MethodSummary>,
}

impl SimSummary {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }

    /// Largest failure share over methods, counting generation failures.
    pub fn failure_rate(&self) -> f64 {
        self.methods
            .iter()
            .map(|m| (m.failed + self.generation_failures) as f64 / self.replicates as f64)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub summary: SimSummary,
    pub replicates: Vec<ReplicateOutcome>,
}

pub fn summarize(config: &SimConfig, reps: &[ReplicateOutcome]) -> SimSummary {
    let names = config.column_names();
    let generation_failures = reps.iter().filter(|r| r.error.is_some()).count();
    let mut methods = vec![];
    for m in [Method::Nw, Method::Tw, Method::W] {
        let outs: Vec<&MethodOutcome> = reps
            .iter()
            .flat_map(|r| r.methods.iter())
            .filter(|o| o.method == m)
            .collect();
        let ok: Vec<&&MethodOutcome> = outs.iter().filter(|o| o.converged).collect();
        let failed = outs.len() - ok.len();
        let cnt = ok.len() as f64;
        let mut coefficients = vec![];
        for (j, name) in names.iter().enumerate() {
            let idx = j + 1;
            let truth = config.beta_truth[idx];
            let vals: Vec<f64> = ok.iter().map(|o| o.beta[idx]).collect();
            let (mean, sd) = if vals.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let mean = vals.iter().sum::<f64>() / cnt;
                let var = if vals.len() > 1 {
                    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (cnt - 1.0)
                } else {
                    0.0
                };
                (mean, var.sqrt())
            };
            let rmse = (vals.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / cnt).sqrt();
            let with_se: Vec<(f64, f64)> = ok
                .iter()
                .filter_map(|o| o.se.as_ref().map(|s| (o.beta[idx], s[idx])))
                .collect();
            let coverage = (!with_se.is_empty()).then(|| {
                with_se
                    .iter()
                    .filter(|(b, s)| (b - truth).abs() <= 1.959963984540054 * s)
                    .count() as f64
                    / with_se.len() as f64
            });
            coefficients.push(CoefficientSummary {
                name: name.clone(),
                truth,
                mean,
                bias: mean - truth,
                sd,
                rmse,
                mcse: sd / cnt.sqrt(),
                coverage,
            });
        }
        let tally = |f: fn(&MethodOutcome) -> Option<&String>| {
            let mut map = BTreeMap::new();
            for o in &ok {
                if let Some(name) = f(o) {
                    *map.entry(name.clone()).or_insert(0) += 1;
                }
            }
            map
        };
        let loops: Vec<&&MethodOutcome> = outs.iter().filter(|o| o.loops.is_some()).collect();
        let loop_convergence =
            (!loops.is_empty()).then(|| loops.iter().filter(|o| o.converged).count() as f64 / loops.len() as f64);
        methods.push(MethodSummary {
            method: m,
            converged: ok.len(),
            failed,
            coefficients,
            selections_x: tally(|o| o.tilt_x.as_ref()),
            selections_z: tally(|o| o.tilt_z.as_ref()),
            loop_convergence,
        });
    }
    SimSummary {
        config: config.clone(),
        replicates: reps.len(),
        generation_failures,
        methods,
    }
}

/// Runs every replicate (in parallel, collected in index order) and
/// aggregates bias, SD, RMSE and MCSE over converged fits, intercept
/// excluded.
pub fn run_comparison(config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    let replicates: Vec<ReplicateOutcome> = (0..config.replicates)
        .into_par_iter()
        .map(|i| run_replicate(config, i))
        .collect();
    Ok(SimOutput {
        summary: summarize(config, &replicates),
        replicates,
    })
}

impl SimOutput {
    /// One row per replicate and method, intercept included.
    pub fn write_archive(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        let mut header: Vec<String> = ["replicate", "method", "converged"].map(String::from).to_vec();
        header.push("(Intercept)".into());
        header.extend(self.summary.config.column_names());
        header.extend(["tilt_x", "tilt_z", "loops", "error"].map(String::from));
        w.write_record(&header)?;
        let width = 1 + self.summary.config.k();
        for r in &self.replicates {
            if let Some(e) = &r.error {
                let mut rec = vec![r.index.to_string(), String::new(), "false".into()];
                rec.extend((0..width).map(|_| String::new()));
                rec.extend([String::new(), String::new(), String::new(), e.clone()]);
                w.write_record(&rec)?;
                continue;
            }
            for o in &r.methods {
                let mut rec = vec![r.index.to_string(), o.method.to_string(), o.converged.to_string()];
                if o.beta.is_empty() {
                    rec.extend((0..width).map(|_| String::new()));
                } else {
                    rec.extend(o.beta.iter().map(|v| format!("{v:?}")));
                }
                rec.push(o.tilt_x.clone().unwrap_or_default());
                rec.push(o.tilt_z.clone().unwrap_or_default());
                rec.push(o.loops.map(|l| l.to_string()).unwrap_or_default());
                rec.push(o.error.clone().unwrap_or_default());
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}
