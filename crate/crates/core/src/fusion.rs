//! Stacked estimating equations for the full-model coefficients.
//!
//! Each external summary contributes the block
//! `(1/N₁) Σᵢ wᵢ [b'(θᵢ) − b'(θ_w,i)] vᵢ`, where `θᵢ` is the full-model
//! predictor, `θ_w,i` the summary's working predictor and `vᵢ` its
//! covariates. The two blocks together over-determine `β`; the estimate is
//! their least-squares root.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{validate_problem, Block, FusionProblem, SummarySlot};
use crate::error::{Error, Result};
use crate::glm::Family;
use crate::nls::{self, NlsOptions};
use crate::tilt::{
    self, fit_kernel, fit_tilt_univariable, select_kernels, EntryMask, FisherMatrix, InfoKernel, TiltFit, TiltOptions,
    TiltSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Homogeneity: unit weights.
    #[serde(rename = "NW")]
    Nw,
    /// Known sampling weights.
    #[serde(rename = "TW")]
    Tw,
    /// Calibrated tilt weights.
    #[serde(rename = "W")]
    W,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Nw => "NW",
            Method::Tw => "TW",
            Method::W => "W",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Homogeneity,
    KnownWeights,
    Calibrated,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "homogeneity" => Ok(Mode::Homogeneity),
            "known_weights" => Ok(Mode::KnownWeights),
            "calibrated" => Ok(Mode::Calibrated),
            other => Err(Error::Invalid(format!(
                "unknown mode \"{other}\" (valid: homogeneity, known_weights, calibrated)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub mode: Mode,
    /// Stop when `‖Jᵀg‖∞` falls below this.
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
    /// Case-control alternation stops when `max |Δβ|` falls below this.
    pub loop_tolerance: f64,
    pub max_loops: usize,
    /// Starting full-model intercept; slopes start at zero.
    pub intercept_start: f64,
    /// Fit tilts from univariable summaries when a study provides them.
    pub marginal_tilt: bool,
    pub tilt: TiltOptions,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Calibrated,
            gradient_tolerance: 1e-9,
            max_iterations: 100,
            loop_tolerance: 1e-7,
            max_loops: 50,
            intercept_start: 0.0,
            marginal_tilt: false,
            tilt: TiltOptions::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gradient_tolerance > 0.0 && self.loop_tolerance > 0.0) {
            return Err(Error::Invalid("tolerances must be positive".into()));
        }
        if self.max_iterations == 0 || self.max_loops == 0 {
            return Err(Error::Invalid("iteration limits must be positive".into()));
        }
        if !self.intercept_start.is_finite() {
            return Err(Error::Invalid("non-finite starting intercept".into()));
        }
        Ok(())
    }

    fn nls(&self) -> NlsOptions {
        NlsOptions {
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            relative_tolerance: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullModelParams {
    /// `(β₀, β_x, β_z, β_c)`.
    pub beta: DVector<f64>,
    /// Population working intercept replacing a case-control study's
    /// reported one.
    pub nuisance_x: Option<f64>,
    pub nuisance_z: Option<f64>,
}

impl FullModelParams {
    fn from_vector(v: &DVector<f64>, d: usize, slots: &[Option<usize>; 2]) -> Self {
        Self {
            beta: v.rows(0, d).into_owned(),
            nuisance_x: slots[0].map(|k| v[k]),
            nuisance_z: slots[1].map(|k| v[k]),
        }
    }

    fn to_vector(&self, slots: &[Option<usize>; 2]) -> DVector<f64> {
        let d = self.beta.len();
        let extra = slots.iter().flatten().count();
        let mut v = DVector::zeros(d + extra);
        v.rows_mut(0, d).copy_from(&self.beta);
        if let (Some(k), Some(val)) = (slots[0], self.nuisance_x) {
            v[k] = val;
        }
        if let (Some(k), Some(val)) = (slots[1], self.nuisance_z) {
            v[k] = val;
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    pub method: Method,
    pub params: FullModelParams,
    pub tilt_x: Option<TiltFit>,
    pub tilt_z: Option<TiltFit>,
    /// Train-entry fits of every tilt candidate, when selection ran.
    pub candidates_x: Vec<TiltFit>,
    pub candidates_z: Vec<TiltFit>,
    /// `‖g‖₂` of the stacked residual at the estimate.
    pub residual_norm: f64,
    pub gradient_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Objective after each accepted solver step.
    pub trace: Vec<f64>,
    /// `max |Δβ|` per case-control alternation.
    pub loop_trace: Vec<f64>,
}

impl FusionResult {
    pub fn beta(&self) -> &DVector<f64> {
        &self.params.beta
    }
}

/// Designs and fixed working predictors of the two equation blocks.
#[derive(Debug, Clone)]
pub(crate) struct StackedEquations {
    family: Family,
    full: DMatrix<f64>,
    blocks: [SlotEquations; 2],
}

#[derive(Debug, Clone)]
pub(crate) struct SlotEquations {
    pub design: DMatrix<f64>,
    pub theta: DVector<f64>,
    pub weights: DVector<f64>,
    /// Position of the free intercept in the parameter vector, and the
    /// reported intercept it replaces.
    pub nuisance: Option<(usize, f64)>,
}

impl StackedEquations {
    /// Solvers rescale each weight vector to unit mean, so the root does not
    /// depend on the scale of either vector.
    pub(crate) fn normalized(
        problem: &FusionProblem,
        weights_x: &DVector<f64>,
        weights_z: &DVector<f64>,
        free_intercepts: bool,
    ) -> Result<Self> {
        let mut eqs = Self::new(problem, weights_x, weights_z, free_intercepts)?;
        for b in eqs.blocks.iter_mut() {
            let m = b.weights.mean();
            b.weights /= m;
        }
        Ok(eqs)
    }

    pub(crate) fn new(
        problem: &FusionProblem,
        weights_x: &DVector<f64>,
        weights_z: &DVector<f64>,
        free_intercepts: bool,
    ) -> Result<Self> {
        let panel = &problem.panel;
        let n = panel.n_rows();
        let d = problem.full_dim();
        let mut next = d;
        let mut make = |slot: SummarySlot, w: &DVector<f64>| -> Result<SlotEquations> {
            if w.len() != n {
                return Err(Error::shape(format!("weights for summary {slot:?}"), n, w.len()));
            }
            if let Some(i) = w.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::Invalid(format!(
                    "weight {} at row {i} for summary {slot:?} is not positive",
                    w[i]
                )));
            }
            let s = problem.summary(slot);
            let design = panel.design(s.covered_blocks());
            if design.ncols() != s.dim() {
                return Err(Error::shape(
                    format!("summary {slot:?} design"),
                    s.dim(),
                    design.ncols(),
                ));
            }
            let theta = &design * s.coefficients();
            let nuisance = if free_intercepts && s.design().is_case_control() {
                next += 1;
                Some((next - 1, s.coefficients()[0]))
            } else {
                None
            };
            Ok(SlotEquations {
                design,
                theta,
                weights: w.clone(),
                nuisance,
            })
        };
        let bx = make(SummarySlot::X, weights_x)?;
        let bz = make(SummarySlot::Z, weights_z)?;
        Ok(Self {
            family: problem.family,
            full: panel.design(&[Block::X, Block::Z, Block::C]),
            blocks: [bx, bz],
        })
    }

    pub(crate) fn n(&self) -> usize {
        self.full.nrows()
    }

    pub(crate) fn full_dim(&self) -> usize {
        self.full.ncols()
    }

    pub(crate) fn unknowns(&self) -> usize {
        self.full_dim() + self.blocks.iter().filter(|b| b.nuisance.is_some()).count()
    }

    pub(crate) fn equations(&self) -> usize {
        self.blocks.iter().map(|b| b.design.ncols()).sum()
    }

    pub(crate) fn full_design(&self) -> &DMatrix<f64> {
        &self.full
    }

    pub(crate) fn slot(&self, k: usize) -> &SlotEquations {
        &self.blocks[k]
    }

    pub(crate) fn nuisance_slots(&self) -> [Option<usize>; 2] {
        [
            self.blocks[0].nuisance.map(|(k, _)| k),
            self.blocks[1].nuisance.map(|(k, _)| k),
        ]
    }

    pub(crate) fn family(&self) -> Family {
        self.family
    }

    fn check(&self, params: &DVector<f64>) -> Result<()> {
        if params.len() != self.unknowns() {
            return Err(Error::shape("stacked parameters", self.unknowns(), params.len()));
        }
        Ok(())
    }

    /// Working predictor of block `k` at `params`.
    pub(crate) fn working_theta(&self, k: usize, params: &DVector<f64>) -> DVector<f64> {
        let b = &self.blocks[k];
        match b.nuisance {
            Some((idx, reported)) => b.theta.add_scalar(params[idx] - reported),
            None => b.theta.clone(),
        }
    }

    /// Per-row contributions `G` with `g = colmeans(G)`.
    pub(crate) fn rows(&self, params: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(params)?;
        let n = self.n();
        let beta = params.rows(0, self.full_dim());
        let theta = &self.full * beta;
        let mut out = DMatrix::zeros(n, self.equations());
        let mut col = 0;
        for k in 0..2 {
            let b = &self.blocks[k];
            let tw = self.working_theta(k, params);
            for i in 0..n {
                if !theta[i].is_finite() {
                    return Err(Error::Numeric {
                        row: i,
                        message: format!("non-finite full-model predictor {}", theta[i]),
                    });
                }
                let r = b.weights[i] * (self.family.mean(theta[i]) - self.family.mean(tw[i]));
                for a in 0..b.design.ncols() {
                    out[(i, col + a)] = r * b.design[(i, a)];
                }
            }
            col += b.design.ncols();
        }
        Ok(out)
    }

    /// `‖g‖²` without the Jacobian.
    #[cfg(test)]
    pub(crate) fn objective(&self, params: &DVector<f64>) -> Result<f64> {
        Ok(self.rows(params)?.row_mean().norm_squared())
    }

    pub(crate) fn evaluate(&self, params: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check(params)?;
        let n = self.n();
        let nf = n as f64;
        let d = self.full_dim();
        let beta = params.rows(0, d);
        let theta = &self.full * beta;
        if let Some(i) = theta.iter().position(|t| !t.is_finite()) {
            return Err(Error::Numeric {
                row: i,
                message: format!("non-finite full-model predictor {}", theta[i]),
            });
        }
        let mu = theta.map(|t| self.family.mean(t));
        let curv = theta.map(|t| self.family.variance(t));
        let mut resid = DVector::zeros(self.equations());
        let mut jac = DMatrix::zeros(self.equations(), self.unknowns());
        let mut row0 = 0;
        for k in 0..2 {
            let b = &self.blocks[k];
            let l = b.design.ncols();
            let tw = self.working_theta(k, params);
            let r = DVector::from_fn(n, |i, _| b.weights[i] * (mu[i] - self.family.mean(tw[i])));
            resid.rows_mut(row0, l).copy_from(&(b.design.tr_mul(&r) / nf));
            let mut scaled = self.full.clone();
            for i in 0..n {
                scaled.row_mut(i).scale_mut(b.weights[i] * curv[i]);
            }
            jac.view_mut((row0, 0), (l, d))
                .copy_from(&(b.design.tr_mul(&scaled) / nf));
            if let Some((idx, _)) = b.nuisance {
                let s = DVector::from_fn(n, |i, _| b.weights[i] * self.family.variance(tw[i]));
                jac.view_mut((row0, idx), (l, 1))
                    .copy_from(&(-(b.design.tr_mul(&s)) / nf));
            }
            row0 += l;
        }
        Ok((resid, jac))
    }
}

/// Stacked residual and its Jacobian in `(β, nuisance intercepts)`.
pub fn stacked_system(
    problem: &FusionProblem,
    params: &FullModelParams,
    weights_x: &DVector<f64>,
    weights_z: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if params.beta.len() != problem.full_dim() {
        return Err(Error::shape("beta", problem.full_dim(), params.beta.len()));
    }
    let free = params.nuisance_x.is_some() || params.nuisance_z.is_some();
    let eqs = StackedEquations::new(problem, weights_x, weights_z, free)?;
    let slots = eqs.nuisance_slots();
    for (slot, given, label) in [
        (slots[0], params.nuisance_x, "summary X"),
        (slots[1], params.nuisance_z, "summary Z"),
    ] {
        if slot.is_some() != given.is_some() {
            return Err(Error::Invalid(format!(
                "nuisance intercept for {label} must be given iff that study is case-control"
            )));
        }
    }
    eqs.evaluate(&params.to_vector(&slots))
}

struct Solved {
    params: FullModelParams,
    residual_norm: f64,
    gradient_norm: f64,
    converged: bool,
    iterations: usize,
    trace: Vec<f64>,
}

fn starting_params(eqs: &StackedEquations, config: &EstimatorConfig) -> DVector<f64> {
    let mut v = DVector::zeros(eqs.unknowns());
    v[0] = config.intercept_start;
    for b in &eqs.blocks {
        if let Some((idx, reported)) = b.nuisance {
            v[idx] = reported;
        }
    }
    v
}

fn solve_equations(eqs: &StackedEquations, config: &EstimatorConfig, start: Option<DVector<f64>>) -> Result<Solved> {
    let x0 = start.unwrap_or_else(|| starting_params(eqs, config));
    let report = nls::minimize(x0, |p| eqs.evaluate(p), config.nls())?;
    if !report.converged {
        log::warn!(
            "stacked solve stopped after {} iterations with gradient {:e}",
            report.iterations,
            report.gradient_norm
        );
    }
    Ok(Solved {
        params: FullModelParams::from_vector(&report.x, eqs.full_dim(), &eqs.nuisance_slots()),
        residual_norm: report.objective.sqrt(),
        gradient_norm: report.gradient_norm,
        converged: report.converged,
        iterations: report.iterations,
        trace: report.trace,
    })
}

fn precheck(problem: &FusionProblem, config: &EstimatorConfig) -> Result<()> {
    config.validate()?;
    let diag = validate_problem(problem);
    if !diag.passed() {
        return Err(Error::Identifiability(diag.issues.join("; ")));
    }
    Ok(())
}

fn any_case_control(problem: &FusionProblem) -> bool {
    problem.summary_x.design().is_case_control() || problem.summary_z.design().is_case_control()
}

fn assemble(method: Method, s: Solved) -> FusionResult {
    FusionResult {
        method,
        params: s.params,
        tilt_x: None,
        tilt_z: None,
        candidates_x: vec![],
        candidates_z: vec![],
        residual_norm: s.residual_norm,
        gradient_norm: s.gradient_norm,
        converged: s.converged,
        iterations: s.iterations,
        trace: s.trace,
        loop_trace: vec![],
    }
}

fn unit_weights(problem: &FusionProblem) -> DVector<f64> {
    DVector::from_element(problem.panel.n_rows(), 1.0)
}

/// Unit-weight least-squares root (`NW`).
pub fn solve_homogeneous(problem: &FusionProblem, config: &EstimatorConfig) -> Result<FusionResult> {
    precheck(problem, config)?;
    let w = unit_weights(problem);
    let eqs = StackedEquations::normalized(problem, &w, &w, any_case_control(problem))?;
    Ok(assemble(Method::Nw, solve_equations(&eqs, config, None)?))
}

/// Least-squares root with supplied per-row weights (`TW`).
pub fn solve_known_weights(
    problem: &FusionProblem,
    config: &EstimatorConfig,
    weights_x: &DVector<f64>,
    weights_z: &DVector<f64>,
) -> Result<FusionResult> {
    precheck(problem, config)?;
    let eqs = StackedEquations::normalized(problem, weights_x, weights_z, any_case_control(problem))?;
    Ok(assemble(Method::Tw, solve_equations(&eqs, config, None)?))
}

fn slot_seed(seed: u64, slot: SummarySlot) -> u64 {
    match slot {
        SummarySlot::X => seed,
        SummarySlot::Z => seed.wrapping_add(0x9E37_79B9_7F4A_7C15),
    }
}

struct SlotTilt {
    fit: TiltFit,
    candidates: Vec<TiltFit>,
    weights: DVector<f64>,
}

/// Tilt for a prospective summary: univariable moments when requested and
/// available, otherwise information matching with selection.
fn prospective_tilt(
    problem: &FusionProblem,
    slot: SummarySlot,
    candidates: &[TiltSpec],
    split: f64,
    seed: u64,
    config: &EstimatorConfig,
) -> Result<SlotTilt> {
    let summary = problem.summary(slot);
    let panel = &problem.panel;
    let working = crate::glm::LinearPredictorSpec::working(panel, summary)?;
    let marginals = match slot {
        SummarySlot::X => problem.marginals_x.as_ref(),
        SummarySlot::Z => problem.marginals_z.as_ref(),
    };
    let (fit, cands) = match (config.marginal_tilt, marginals) {
        (true, Some(m)) => {
            let spec = candidates
                .first()
                .ok_or_else(|| Error::Selection("no candidate tilt models".into()))?;
            let fit = fit_tilt_univariable(panel, &working, m, problem.family, spec, config.tilt)?;
            (fit, vec![])
        }
        _ => {
            let observed = FisherMatrix::from_summary(summary)?;
            let kernels = candidates
                .iter()
                .map(|s| Ok((s.clone(), InfoKernel::new(panel, &working, problem.family, s)?)))
                .collect::<Result<Vec<_>>>()?;
            let sel = select_kernels(&kernels, &observed, split, slot_seed(seed, slot), config.tilt)?;
            (sel.best, sel.candidates)
        }
    };
    let weights = tilt::weights(panel, &fit.spec, &fit.zeta)?.values;
    Ok(SlotTilt {
        fit,
        candidates: cands,
        weights,
    })
}

/// Tilt-calibrated least-squares root (`W`). Case-control summaries are
/// handled by [`solve_case_control`].
pub fn solve_calibrated(
    problem: &FusionProblem,
    config: &EstimatorConfig,
    candidates_x: &[TiltSpec],
    candidates_z: &[TiltSpec],
    split: f64,
    seed: u64,
) -> Result<FusionResult> {
    if any_case_control(problem) {
        return solve_case_control(problem, config, candidates_x, candidates_z, split, seed);
    }
    precheck(problem, config)?;
    let tx = prospective_tilt(problem, SummarySlot::X, candidates_x, split, seed, config)?;
    let tz = prospective_tilt(problem, SummarySlot::Z, candidates_z, split, seed, config)?;
    let eqs = StackedEquations::normalized(problem, &tx.weights, &tz.weights, false)?;
    let mut out = assemble(Method::W, solve_equations(&eqs, config, None)?);
    out.tilt_x = Some(tx.fit);
    out.tilt_z = Some(tz.fit);
    out.candidates_x = tx.candidates;
    out.candidates_z = tz.candidates;
    Ok(out)
}

/// Alternates between fitting the case-control tilt at the current `β`
/// and re-solving the weighted system, starting from the unweighted root.
/// The tilt family is selected once, at the first alternation; later
/// alternations refit that family from the previous `ζ`.
pub fn solve_case_control(
    problem: &FusionProblem,
    config: &EstimatorConfig,
    candidates_x: &[TiltSpec],
    candidates_z: &[TiltSpec],
    split: f64,
    seed: u64,
) -> Result<FusionResult> {
    precheck(problem, config)?;
    if !any_case_control(problem) {
        return Err(Error::Invalid("no case-control summary; use solve_calibrated".into()));
    }
    let ones = unit_weights(problem);
    let eqs0 = StackedEquations::normalized(problem, &ones, &ones, true)?;
    let start = solve_equations(&eqs0, config, None)?;
    let slots_idx = eqs0.nuisance_slots();
    let mut current = start.params.to_vector(&slots_idx);
    let mut beta_prev = start.params.beta.clone();

    let panel = &problem.panel;
    let mut fixed: [Option<SlotTilt>; 2] = [None, None];
    for (k, slot, cands) in [(0, SummarySlot::X, candidates_x), (1, SummarySlot::Z, candidates_z)] {
        if !problem.summary(slot).design().is_case_control() {
            fixed[k] = Some(prospective_tilt(problem, slot, cands, split, seed, config)?);
        }
    }
    let mut chosen: [Option<(TiltSpec, DVector<f64>, Vec<TiltFit>)>; 2] = [None, None];
    let mut loop_trace = Vec::new();
    let mut last: Option<Solved> = None;
    let mut fits: [Option<TiltFit>; 2] = [None, None];
    let mut converged = false;

    for _ in 0..config.max_loops {
        let mut weights = [ones.clone(), ones.clone()];
        for (k, slot, cands) in [(0, SummarySlot::X, candidates_x), (1, SummarySlot::Z, candidates_z)] {
            if let Some(t) = &fixed[k] {
                weights[k] = t.weights.clone();
                fits[k] = Some(t.fit.clone());
                continue;
            }
            let summary = problem.summary(slot);
            let rho = summary.design().rho().expect("case-control design");
            let working = crate::glm::LinearPredictorSpec::working(panel, summary)?;
            let observed = FisherMatrix::from_summary(summary)?;
            let kernel_for = |s: &TiltSpec| -> Result<InfoKernel> {
                InfoKernel::new(panel, &working, problem.family, s)?.with_case_mixture(panel, &beta_prev, rho)
            };
            let fit = match &chosen[k] {
                None => {
                    let kernels = cands
                        .iter()
                        .map(|s| Ok((s.clone(), kernel_for(s)?)))
                        .collect::<Result<Vec<_>>>()?;
                    let sel = select_kernels(&kernels, &observed, split, slot_seed(seed, slot), config.tilt)?;
                    chosen[k] = Some((sel.best.spec.clone(), sel.best.zeta.clone(), sel.candidates));
                    sel.best
                }
                Some((spec, zeta, cands_fit)) => {
                    let kernel = kernel_for(spec)?;
                    let mask = EntryMask::full(observed.dim());
                    let mut fit = fit_kernel(&kernel, spec, &observed, &mask, Some(zeta), config.tilt)?;
                    fit.test_objective = cands_fit
                        .iter()
                        .find(|c| c.spec == *spec)
                        .and_then(|c| c.test_objective);
                    chosen[k] = Some((spec.clone(), fit.zeta.clone(), cands_fit.clone()));
                    fit
                }
            };
            weights[k] = tilt::weights(panel, &fit.spec, &fit.zeta)?.values;
            fits[k] = Some(fit);
        }
        let eqs = StackedEquations::normalized(problem, &weights[0], &weights[1], true)?;
        let solved = solve_equations(&eqs, config, Some(current.clone()))?;
        let change = (&solved.params.beta - &beta_prev).amax();
        loop_trace.push(change);
        beta_prev = solved.params.beta.clone();
        current = solved.params.to_vector(&slots_idx);
        let inner_ok = solved.converged;
        last = Some(solved);
        if change < config.loop_tolerance && inner_ok {
            converged = true;
            break;
        }
    }
    let solved = last.expect("at least one alternation");
    if !converged {
        log::warn!(
            "case-control alternation did not settle within {} loops (last change {:e})",
            config.max_loops,
            loop_trace.last().copied().unwrap_or(f64::NAN)
        );
    }
    let mut out = assemble(Method::W, solved);
    out.converged = converged;
    out.loop_trace = loop_trace;
    let [fx, fz] = fits;
    out.tilt_x = fx;
    out.tilt_z = fz;
    let cands = |k: usize| -> Vec<TiltFit> {
        match (&fixed[k], &chosen[k]) {
            (Some(t), _) => t.candidates.clone(),
            (None, Some((_, _, c))) => c.clone(),
            _ => vec![],
        }
    };
    out.candidates_x = cands(0);
    out.candidates_z = cands(1);
    Ok(out)
}

/// Dispatches on `config.mode`.
pub fn estimate(
    problem: &FusionProblem,
    config: &EstimatorConfig,
    candidates_x: &[TiltSpec],
    candidates_z: &[TiltSpec],
    split: f64,
    seed: u64,
    known_weights: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<FusionResult> {
    match config.mode {
        Mode::Homogeneity => solve_homogeneous(problem, config),
        Mode::KnownWeights => {
            let (wx, wz) =
                known_weights.ok_or_else(|| Error::Invalid("known_weights mode needs weight vectors".into()))?;
            solve_known_weights(problem, config, wx, wz)
        }
        Mode::Calibrated => solve_calibrated(problem, config, candidates_x, candidates_z, split, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CovariatePanel, StudyDesign, SummaryInput};
    use crate::glm::fit_working_glm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    const LOGIT: Family = Family::Logistic;

    fn panel(n: usize, widths: [usize; 3], rng: &mut ChaCha8Rng) -> CovariatePanel {
        let k: usize = widths.iter().sum();
        let vals: Vec<f64> = (0..n * k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let names = (1..=widths[0])
            .map(|j| format!("x{j}"))
            .chain((1..=widths[1]).map(|j| format!("z{j}")))
            .chain((1..=widths[2]).map(|j| format!("c{j}")))
            .collect();
        CovariatePanel::from_row_major(vals, n, widths, names).unwrap()
    }

    fn outcomes(p: &CovariatePanel, beta: &DVector<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let u = p.design(&[Block::X, Block::Z, Block::C]);
        (&u * beta)
            .iter()
            .map(|t| (rng.random::<f64>() < LOGIT.mean(*t)) as u8 as f64)
            .collect()
    }

    fn summary(p: &CovariatePanel, y: &[f64], blocks: Vec<Block>) -> SummaryInput {
        fit_working_glm(p, y, &blocks, LOGIT)
            .unwrap()
            .to_summary(StudyDesign::Prospective { n: p.n_rows() }, blocks)
            .unwrap()
    }

    /// Summaries fitted on large samples from the panel's population.
    fn toy(n1: usize, widths: [usize; 3], beta: &[f64], seed: u64) -> FusionProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta = DVector::from_vec(beta.to_vec());
        let p1 = panel(n1, widths, &mut rng);
        let p2 = panel(20_000, widths, &mut rng);
        let y2 = outcomes(&p2, &beta, &mut rng);
        let p3 = panel(20_000, widths, &mut rng);
        let y3 = outcomes(&p3, &beta, &mut rng);
        let bx = if widths[2] > 0 {
            vec![Block::X, Block::C]
        } else {
            vec![Block::X]
        };
        let bz = if widths[2] > 0 {
            vec![Block::Z, Block::C]
        } else {
            vec![Block::Z]
        };
        FusionProblem::new(p1, summary(&p2, &y2, bx), summary(&p3, &y3, bz), LOGIT).unwrap()
    }

    #[test]
    fn unit_weights_match_loop_oracle() {
        let prob = toy(4, [1, 1, 1], &[-1.0, 0.5, 0.3, -0.2], 1);
        let params = FullModelParams {
            beta: DVector::from_vec(vec![-0.8, 0.4, 0.2, 0.1]),
            nuisance_x: None,
            nuisance_z: None,
        };
        let w = DVector::from_vec(vec![1.0, 2.0, 0.5, 1.5]);
        let ones = DVector::from_element(4, 1.0);
        let (g, _) = stacked_system(&prob, &params, &w, &ones).unwrap();
        let mut oracle = vec![0.0; 6];
        for i in 0..4 {
            let r = prob.panel.row(i);
            let theta = -0.8 + 0.4 * r.x[0] + 0.2 * r.z[0] + 0.1 * r.c[0];
            let ax = prob.summary_x.coefficients();
            let az = prob.summary_z.coefficients();
            let tx = ax[0] + ax[1] * r.x[0] + ax[2] * r.c[0];
            let tz = az[0] + az[1] * r.z[0] + az[2] * r.c[0];
            let dx = w[i] * (LOGIT.mean(theta) - LOGIT.mean(tx)) / 4.0;
            let dz = LOGIT.mean(theta) - LOGIT.mean(tz);
            for (k, v) in [1.0, r.x[0], r.c[0]].iter().enumerate() {
                oracle[k] += dx * v;
            }
            for (k, v) in [1.0, r.z[0], r.c[0]].iter().enumerate() {
                oracle[3 + k] += dz * v / 4.0;
            }
        }
        for k in 0..6 {
            assert!((g[k] - oracle[k]).abs() < 1e-15, "{k}: {} vs {}", g[k], oracle[k]);
        }
    }

    #[test]
    fn saturated_working_model_zeroes_its_block() {
        let mut prob = toy(30, [1, 1, 1], &[-1.0, 0.5, 0.3, -0.2], 2);
        let alpha = DVector::from_vec(vec![-0.9, 0.45, 0.35, -0.1]);
        prob.summary_z = SummaryInput::new(
            alpha.clone(),
            DMatrix::identity(4, 4) * 0.01,
            StudyDesign::Prospective { n: 1000 },
            vec![Block::X, Block::Z, Block::C],
        )
        .unwrap();
        let ones = DVector::from_element(30, 1.0);
        let params = FullModelParams {
            beta: alpha,
            nuisance_x: None,
            nuisance_z: None,
        };
        let (g, _) = stacked_system(&prob, &params, &ones, &ones).unwrap();
        assert!(g.rows(3, 4).amax() < 1e-16);
    }

    fn fd_jacobian(eqs: &StackedEquations, x: &DVector<f64>) {
        let (_, jac) = eqs.evaluate(x).unwrap();
        let h = 1e-6;
        for k in 0..x.len() {
            let mut up = x.clone();
            up[k] += h;
            let mut dn = x.clone();
            dn[k] -= h;
            let fd = (eqs.evaluate(&up).unwrap().0 - eqs.evaluate(&dn).unwrap().0) / (2.0 * h);
            for e in 0..fd.len() {
                let scale = jac[(e, k)].abs().max(fd[e].abs()).max(1e-4);
                assert!((jac[(e, k)] - fd[e]).abs() / scale < 1e-5, "({e},{k})");
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..4 {
            let mut prob = toy(25, [2, 1, 1], &[-1.0, 0.5, 0.3, -0.2, 0.1], 10 + seed);
            let wx = DVector::from_fn(25, |_, _| rng.random::<f64>() + 0.2);
            let wz = DVector::from_fn(25, |_, _| rng.random::<f64>() + 0.2);
            let x = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.5);
            let eqs = StackedEquations::new(&prob, &wx, &wz, false).unwrap();
            fd_jacobian(&eqs, &x);
            prob.summary_x = SummaryInput::new(
                prob.summary_x.coefficients().clone(),
                prob.summary_x.covariance().clone(),
                StudyDesign::CaseControl {
                    n_cases: 500,
                    n_controls: 500,
                },
                vec![Block::X, Block::C],
            )
            .unwrap();
            let eqs = StackedEquations::new(&prob, &wx, &wz, true).unwrap();
            let mut xn = DVector::zeros(6);
            xn.rows_mut(0, 5).copy_from(&x);
            xn[5] = -0.4;
            fd_jacobian(&eqs, &xn);
        }
    }

    #[test]
    fn known_unit_weights_equal_homogeneous_and_scale_invariance() {
        let prob = toy(200, [2, 1, 1], &[-1.0, 0.5, 0.3, -0.2, 0.1], 4);
        let cfg = EstimatorConfig::default();
        let nw = solve_homogeneous(&prob, &cfg).unwrap();
        let ones = DVector::from_element(200, 1.0);
        let tw = solve_known_weights(&prob, &cfg, &ones, &ones).unwrap();
        assert_eq!(nw.params.beta, tw.params.beta);
        assert_eq!(tw.method, Method::Tw);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let wx = DVector::from_fn(200, |_, _| rng.random::<f64>() + 0.5);
        let wz = DVector::from_fn(200, |_, _| rng.random::<f64>() + 0.5);
        let a = solve_known_weights(&prob, &cfg, &wx, &wz).unwrap();
        let b = solve_known_weights(&prob, &cfg, &(&wx * 2.0), &wz).unwrap();
        let c = solve_known_weights(&prob, &cfg, &(&wx * 3.0), &(&wz * 0.1)).unwrap();
        assert!(a.converged && b.converged && c.converged);
        assert!((&a.params.beta - b.params.beta).amax() < 1e-7);
        assert!((a.params.beta - c.params.beta).amax() < 1e-7);
    }

    #[test]
    fn matches_grid_minimizer() {
        let prob = toy(50, [1, 1, 0], &[-0.5, 0.8, -0.6], 6);
        let cfg = EstimatorConfig::default();
        let fit = solve_homogeneous(&prob, &cfg).unwrap();
        assert!(fit.converged);
        let ones = DVector::from_element(50, 1.0);
        let eqs = StackedEquations::new(&prob, &ones, &ones, false).unwrap();
        // exhaustive 0.01 lattice over a fixed box around the generating values
        let axis = |c: f64| (0..=120).map(move |k| c - 0.6 + 0.01 * k as f64);
        let mut best = (f64::INFINITY, DVector::zeros(3));
        let mut p = DVector::zeros(3);
        for b0 in axis(-0.5) {
            for b1 in axis(0.8) {
                for b2 in axis(-0.6) {
                    p[0] = b0;
                    p[1] = b1;
                    p[2] = b2;
                    let obj = eqs.objective(&p).unwrap();
                    if obj < best.0 {
                        best = (obj, p.clone());
                    }
                }
            }
        }
        assert!((fit.params.beta - best.1).amax() <= 0.02);
    }

    #[test]
    fn same_population_recovers_truth() {
        let truth = [-2.0, 0.5, -0.25, 0.5, 0.25];
        let prob = toy(5000, [2, 1, 1], &truth, 7);
        let fit = solve_homogeneous(&prob, &EstimatorConfig::default()).unwrap();
        assert!(fit.converged);
        for (k, t) in truth.iter().enumerate() {
            assert!((fit.params.beta[k] - t).abs() < 0.15, "{k}: {}", fit.params.beta[k]);
        }
    }

    #[test]
    fn deterministic_calibrated_fit() {
        let prob = toy(400, [2, 1, 1], &[-1.5, 0.5, 0.3, -0.2, 0.1], 8);
        let cx: Vec<TiltSpec> = ["additive", "additive_with_interactions"]
            .iter()
            .map(|s| TiltSpec::parse(s, &prob.panel, prob.summary_x.covered_blocks()).unwrap())
            .collect();
        let cz: Vec<TiltSpec> = ["additive", "additive_with_interactions"]
            .iter()
            .map(|s| TiltSpec::parse(s, &prob.panel, prob.summary_z.covered_blocks()).unwrap())
            .collect();
        let cfg = EstimatorConfig::default();
        let a = solve_calibrated(&prob, &cfg, &cx, &cz, 0.8, 11).unwrap();
        let b = solve_calibrated(&prob, &cfg, &cx, &cz, 0.8, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.method, Method::W);
        assert!(a.tilt_x.is_some() && a.tilt_z.is_some());
        // no shift: calibrated and homogeneous agree closely
        let nw = solve_homogeneous(&prob, &cfg).unwrap();
        assert!((a.params.beta - nw.params.beta).amax() < 0.3);
    }

    #[test]
    fn case_control_with_no_case_fraction_matches_calibrated() {
        let prob = toy(300, [1, 1, 1], &[-1.5, 0.5, 0.3, -0.2], 9);
        let cx = vec![TiltSpec::parse("additive", &prob.panel, &[Block::X, Block::C]).unwrap()];
        let cz = vec![TiltSpec::parse("additive", &prob.panel, &[Block::Z, Block::C]).unwrap()];
        let cfg = EstimatorConfig::default();
        let w = solve_calibrated(&prob, &cfg, &cx, &cz, 0.8, 1).unwrap();
        let mut cc = prob.clone();
        cc.summary_x = SummaryInput::new(
            prob.summary_x.coefficients().clone(),
            prob.summary_x.covariance().clone(),
            StudyDesign::CaseControl {
                n_cases: 1,
                n_controls: 19_999,
            },
            vec![Block::X, Block::C],
        )
        .unwrap();
        let r = solve_case_control(&cc, &cfg, &cx, &cz, 0.8, 1).unwrap();
        assert!(r.converged, "{:?}", r.loop_trace);
        assert!(!r.loop_trace.is_empty());
        assert!(r.params.nuisance_x.is_some());
        // the case-control tilt collapses to the prospective one
        let (zc, zp) = (&r.tilt_x.as_ref().unwrap().zeta, &w.tilt_x.as_ref().unwrap().zeta);
        assert!((zc - zp).amax() < 1e-4, "{zc} vs {zp}");
        // only the freed intercept separates the two roots
        assert!((&r.params.beta - &w.params.beta).amax() < 0.05);
    }
}
