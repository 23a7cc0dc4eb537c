//! Exponential-tilting calibration weights.
//!
//! A tilt model `w(D) = exp(φ(D; ζ))` reweights the panel toward an
//! external study's covariate distribution. `ζ` is estimated by matching the
//! panel-reconstructed, tilt-weighted Fisher information of the study's
//! working model against the information implied by its reported
//! covariance, entry by entry over the unique (upper-triangular) entries.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Block, CovariatePanel, MarginalSummary};
use crate::error::{Error, Result};
use crate::glm::{Family, LinearPredictorSpec};
use crate::nls::{self, NlsOptions};

/// Log-weights are clamped to `±LOG_WEIGHT_CLAMP`.
pub const LOG_WEIGHT_CLAMP: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Intercept,
    Linear(String),
    Product(String, String),
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Intercept => f.write_str("1"),
            Term::Linear(a) => f.write_str(a),
            Term::Product(a, b) => write!(f, "{a}*{b}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiltPreset {
    Additive,
    AdditiveWithInteractions,
    FullAdditive,
    Custom,
}

impl TiltPreset {
    pub const NAMED: [TiltPreset; 3] = [
        TiltPreset::Additive,
        TiltPreset::AdditiveWithInteractions,
        TiltPreset::FullAdditive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TiltPreset::Additive => "additive",
            TiltPreset::AdditiveWithInteractions => "additive_with_interactions",
            TiltPreset::FullAdditive => "full_additive",
            TiltPreset::Custom => "custom",
        }
    }
}

impl FromStr for TiltPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(TiltPreset::Additive),
            "additive_with_interactions" => Ok(TiltPreset::AdditiveWithInteractions),
            "full_additive" => Ok(TiltPreset::FullAdditive),
            other => Err(Error::Spec(format!(
                "unknown tilt preset \"{other}\" (valid: additive, additive_with_interactions, full_additive, custom:<terms>)"
            ))),
        }
    }
}

/// A parametric log-weight `φ(D; ζ) = Σ_k ζ_k f_k(D)` over named panel columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TiltSpec {
    name: String,
    preset: TiltPreset,
    terms: Vec<Term>,
}

impl TiltSpec {
    /// Preset family relative to a summary's covered blocks.
    ///
    /// `additive` is linear in every covered column. The interaction preset
    /// adds all pairwise products among the non-`C` covered columns and
    /// their products with each `C` column. `full_additive` is linear in
    /// every panel column.
    pub fn preset(preset: TiltPreset, panel: &CovariatePanel, covered: &[Block]) -> Result<Self> {
        let mut terms = vec![Term::Intercept];
        let covered_cols: Vec<&String> = covered.iter().flat_map(|b| panel.block_names(*b)).collect();
        match preset {
            TiltPreset::Additive => {
                terms.extend(covered_cols.iter().map(|c| Term::Linear((*c).clone())));
            }
            TiltPreset::AdditiveWithInteractions => {
                terms.extend(covered_cols.iter().map(|c| Term::Linear((*c).clone())));
                let primary: Vec<&String> = covered
                    .iter()
                    .filter(|b| **b != Block::C)
                    .flat_map(|b| panel.block_names(*b))
                    .collect();
                for i in 0..primary.len() {
                    for j in (i + 1)..primary.len() {
                        terms.push(Term::Product(primary[i].clone(), primary[j].clone()));
                    }
                }
                if covered.contains(&Block::C) {
                    for a in &primary {
                        for c in panel.block_names(Block::C) {
                            terms.push(Term::Product((*a).clone(), c.clone()));
                        }
                    }
                }
            }
            TiltPreset::FullAdditive => {
                terms.extend(panel.names().iter().map(|c| Term::Linear(c.clone())));
            }
            TiltPreset::Custom => return Err(Error::Spec("custom tilts need an explicit term list".into())),
        }
        Self::build(preset.name().to_string(), preset, terms)
    }

    pub fn custom(name: impl Into<String>, terms: Vec<Term>) -> Result<Self> {
        Self::build(name.into(), TiltPreset::Custom, terms)
    }

    /// Parses `additive`, `additive_with_interactions`, `full_additive` or
    /// `custom:<t1>+<t2>+...` where a term is a column name or `a*b`.
    pub fn parse(text: &str, panel: &CovariatePanel, covered: &[Block]) -> Result<Self> {
        let text = text.trim();
        if let Some(body) = text.strip_prefix("custom:") {
            let mut terms = vec![Term::Intercept];
            for t in body.split('+').map(str::trim).filter(|t| !t.is_empty()) {
                match t.split_once('*') {
                    Some((a, b)) => terms.push(Term::Product(a.trim().into(), b.trim().into())),
                    None if t == "1" => {}
                    None => terms.push(Term::Linear(t.into())),
                }
            }
            let spec = Self::custom(text, terms)?;
            spec.resolve(panel)?;
            return Ok(spec);
        }
        Self::preset(text.parse()?, panel, covered)
    }

    fn build(name: String, preset: TiltPreset, terms: Vec<Term>) -> Result<Self> {
        if !terms.contains(&Term::Intercept) {
            return Err(Error::Spec(format!("tilt \"{name}\" lacks an intercept")));
        }
        let mut seen = HashSet::new();
        for t in &terms {
            let key = match t {
                Term::Product(a, b) if a > b => Term::Product(b.clone(), a.clone()),
                other => other.clone(),
            };
            if !seen.insert(key) {
                return Err(Error::Spec(format!("tilt \"{name}\" repeats term {t}")));
            }
        }
        Ok(Self { name, preset, terms })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn preset_kind(&self) -> TiltPreset {
        self.preset
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn feature_count(&self) -> usize {
        self.terms.len()
    }

    pub fn intercept_index(&self) -> usize {
        self.terms
            .iter()
            .position(|t| *t == Term::Intercept)
            .expect("intercept enforced at construction")
    }

    pub fn resolve(&self, panel: &CovariatePanel) -> Result<ResolvedTilt> {
        let idx = |name: &str| {
            panel
                .column_index(name)
                .ok_or_else(|| Error::Spec(format!("tilt \"{}\": unknown column \"{name}\"", self.name)))
        };
        let terms = self
            .terms
            .iter()
            .map(|t| {
                Ok(match t {
                    Term::Intercept => ResolvedTerm::Intercept,
                    Term::Linear(a) => ResolvedTerm::Linear(idx(a)?),
                    Term::Product(a, b) => ResolvedTerm::Product(idx(a)?, idx(b)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ResolvedTilt { terms })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ResolvedTerm {
    Intercept,
    Linear(usize),
    Product(usize, usize),
}

/// A tilt spec bound to panel column positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedTilt {
    terms: Vec<ResolvedTerm>,
}

impl ResolvedTilt {
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn features(&self, row: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.terms.len(),
            self.terms.iter().map(|t| match *t {
                ResolvedTerm::Intercept => 1.0,
                ResolvedTerm::Linear(a) => row[a],
                ResolvedTerm::Product(a, b) => row[a] * row[b],
            }),
        )
    }

    pub fn feature_matrix(&self, panel: &CovariatePanel) -> DMatrix<f64> {
        let n = panel.n_rows();
        let mut out = DMatrix::zeros(n, self.terms.len());
        for i in 0..n {
            let row = panel.row_values(i);
            for (k, t) in self.terms.iter().enumerate() {
                out[(i, k)] = match *t {
                    ResolvedTerm::Intercept => 1.0,
                    ResolvedTerm::Linear(a) => row[a],
                    ResolvedTerm::Product(a, b) => row[a] * row[b],
                };
            }
        }
        out
    }
}

pub fn feature_map(panel: &CovariatePanel, row: usize, spec: &TiltSpec) -> Result<DVector<f64>> {
    Ok(spec.resolve(panel)?.features(panel.row_values(row)))
}

fn check_zeta(spec: &TiltSpec, zeta: &DVector<f64>) -> Result<()> {
    if zeta.len() != spec.feature_count() {
        return Err(Error::shape(
            format!("zeta for tilt \"{}\"", spec.name()),
            spec.feature_count(),
            zeta.len(),
        ));
    }
    Ok(())
}

fn clamp_log_weight(lw: f64) -> (f64, bool) {
    if lw > LOG_WEIGHT_CLAMP {
        (LOG_WEIGHT_CLAMP, true)
    } else if lw < -LOG_WEIGHT_CLAMP {
        (-LOG_WEIGHT_CLAMP, true)
    } else {
        (lw, false)
    }
}

/// `exp(φ(D; ζ))` for one panel row, log-weight clamped.
pub fn weight(panel: &CovariatePanel, row: usize, spec: &TiltSpec, zeta: &DVector<f64>) -> Result<f64> {
    check_zeta(spec, zeta)?;
    let f = feature_map(panel, row, spec)?;
    Ok(clamp_log_weight(f.dot(zeta)).0.exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiltWeights {
    pub values: DVector<f64>,
    pub clamped: usize,
}

pub fn weights(panel: &CovariatePanel, spec: &TiltSpec, zeta: &DVector<f64>) -> Result<TiltWeights> {
    check_zeta(spec, zeta)?;
    let f = spec.resolve(panel)?.feature_matrix(panel);
    let mut clamped = 0;
    let values = (&f * zeta).map(|lw| {
        let (v, c) = clamp_log_weight(lw);
        clamped += c as usize;
        v.exp()
    });
    if clamped > 0 {
        log::warn!("tilt \"{}\": {clamped} log-weights clamped", spec.name());
    }
    Ok(TiltWeights { values, clamped })
}

/// Per-observation information matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherMatrix {
    matrix: DMatrix<f64>,
}

impl FisherMatrix {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::shape("information matrix", matrix.nrows(), matrix.ncols()));
        }
        let scale = matrix.amax().max(1.0);
        for i in 0..matrix.nrows() {
            for j in 0..i {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-10 * scale {
                    return Err(Error::Invalid("information matrix not symmetric".into()));
                }
            }
        }
        let matrix = (&matrix + matrix.transpose()) * 0.5;
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Inverse summary covariance divided by the study size.
    pub fn from_summary(summary: &crate::data::SummaryInput) -> Result<Self> {
        Self::new(summary.observed_information()?)
    }
}

/// A set of unique entries `(a, b)` with `a ≤ b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMask {
    dim: usize,
    entries: Vec<(usize, usize)>,
}

impl EntryMask {
    pub fn full(dim: usize) -> Self {
        let entries = (0..dim).flat_map(|a| (a..dim).map(move |b| (a, b))).collect();
        Self { dim, entries }
    }

    pub fn new(dim: usize, mut entries: Vec<(usize, usize)>) -> Result<Self> {
        for e in entries.iter_mut() {
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
            if e.1 >= dim {
                return Err(Error::Invalid(format!("mask entry {e:?} outside dimension {dim}")));
            }
        }
        entries.sort_unstable();
        let before = entries.len();
        entries.dedup();
        if entries.len() != before {
            return Err(Error::Invalid("mask repeats an entry".into()));
        }
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Seeded uniform shuffle of the unique entries into train/test parts.
    /// The train part gets `round(fraction · len)` entries, and each part
    /// keeps at least one.
    pub fn split(dim: usize, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::Invalid(format!("split fraction {fraction} outside (0, 1)")));
        }
        let mut all = Self::full(dim).entries;
        if all.len() < 2 {
            return Err(Error::Invalid("need at least two unique entries to split".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        all.shuffle(&mut rng);
        let n_train = ((fraction * all.len() as f64).round() as usize).clamp(1, all.len() - 1);
        let test = all.split_off(n_train);
        Ok((Self::new(dim, all)?, Self::new(dim, test)?))
    }
}

/// Sum of squared differences over the masked entries.
pub fn frobenius_gap(observed: &FisherMatrix, reconstructed: &FisherMatrix, mask: &EntryMask) -> Result<f64> {
    if observed.dim() != reconstructed.dim() {
        return Err(Error::shape("frobenius gap", observed.dim(), reconstructed.dim()));
    }
    if mask.dim() != observed.dim() {
        return Err(Error::shape("frobenius gap mask", observed.dim(), mask.dim()));
    }
    Ok(mask
        .entries()
        .iter()
        .map(|&(a, b)| {
            let d = observed.matrix[(a, b)] - reconstructed.matrix[(a, b)];
            d * d
        })
        .sum())
}

/// Case-control mixture: cases carry the extra outcome tilt `exp(θ_full)`,
/// self-normalized over the weighted panel.
#[derive(Debug, Clone)]
struct CaseMixture {
    rho: f64,
    log_risk: DVector<f64>,
}

/// Precomputed per-row pieces of a reconstructed information matrix.
#[derive(Debug, Clone)]
pub(crate) struct InfoKernel {
    design: DMatrix<f64>,
    curvature: DVector<f64>,
    features: DMatrix<f64>,
    case: Option<CaseMixture>,
}

pub(crate) struct KernelEval {
    /// Values of the requested entries.
    pub values: DVector<f64>,
    /// Derivatives of those entries with respect to ζ.
    pub jacobian: DMatrix<f64>,
}

impl InfoKernel {
    pub(crate) fn new(
        panel: &CovariatePanel,
        working: &LinearPredictorSpec,
        family: Family,
        spec: &TiltSpec,
    ) -> Result<Self> {
        let design = panel.design(working.blocks());
        if design.ncols() != working.len() {
            return Err(Error::shape("working design", working.len(), design.ncols()));
        }
        let theta = &design * working.coefficients();
        let curvature = theta.map(|t| family.variance(t));
        let features = spec.resolve(panel)?.feature_matrix(panel);
        Ok(Self {
            design,
            curvature,
            features,
            case: None,
        })
    }

    pub(crate) fn with_case_mixture(mut self, panel: &CovariatePanel, beta: &DVector<f64>, rho: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::Invalid(format!("case fraction {rho} outside [0, 1)")));
        }
        let full = LinearPredictorSpec::full(panel, beta.clone())?;
        let log_risk = panel.design(full.blocks()) * full.coefficients();
        self.case = Some(CaseMixture { rho, log_risk });
        Ok(self)
    }

    pub(crate) fn n(&self) -> usize {
        self.design.nrows()
    }

    pub(crate) fn dim(&self) -> usize {
        self.design.ncols()
    }

    pub(crate) fn feature_count(&self) -> usize {
        self.features.ncols()
    }

    pub(crate) fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub(crate) fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub(crate) fn curvature(&self) -> &DVector<f64> {
        &self.curvature
    }

    /// Clamped log-weights and clamp flags.
    fn log_weights(&self, zeta: &DVector<f64>) -> (DVector<f64>, Vec<bool>, usize) {
        let raw = &self.features * zeta;
        let mut flags = vec![false; raw.len()];
        let mut clamped = 0;
        let lw = DVector::from_iterator(
            raw.len(),
            raw.iter().enumerate().map(|(i, &v)| {
                let (c, hit) = clamp_log_weight(v);
                flags[i] = hit;
                clamped += hit as usize;
                c
            }),
        );
        (lw, flags, clamped)
    }

    /// Per-row multipliers `c_i` such that `Ĵ = (1/n) Σ c_i v_i v_iᵀ`, and
    /// their ζ-derivative pieces.
    fn row_multipliers(&self, zeta: &DVector<f64>) -> Result<RowMultipliers> {
        let n = self.n();
        let (lw, flags, clamped) = self.log_weights(zeta);
        let control: DVector<f64> =
            DVector::from_iterator(n, lw.iter().zip(self.curvature.iter()).map(|(l, b)| l.exp() * b));
        let case = match &self.case {
            None => None,
            Some(mix) => {
                let s = &lw + &mix.log_risk;
                let top = s.max();
                let q = s.map(|v| (v - top).exp());
                let norm = q.mean();
                Some((mix.rho, q, norm))
            }
        };
        let mut total = DVector::zeros(n);
        for i in 0..n {
            let mut c = control[i];
            if let Some((rho, q, norm)) = &case {
                c = rho * q[i] / norm * self.curvature[i] + (1.0 - rho) * c;
            }
            if !c.is_finite() {
                return Err(Error::Numeric {
                    row: i,
                    message: format!("non-finite information contribution ({c})"),
                });
            }
            total[i] = c;
        }
        Ok(RowMultipliers {
            total,
            control,
            case,
            clamp_flags: flags,
            clamped,
        })
    }

    pub(crate) fn reconstruct(&self, zeta: &DVector<f64>) -> Result<(FisherMatrix, usize)> {
        let m = self.row_multipliers(zeta)?;
        let mut scaled = self.design.clone();
        for (i, c) in m.total.iter().enumerate() {
            scaled.row_mut(i).scale_mut(*c);
        }
        let j = self.design.tr_mul(&scaled) / self.n() as f64;
        Ok((FisherMatrix::new(j)?, m.clamped))
    }

    pub(crate) fn evaluate(&self, zeta: &DVector<f64>, entries: &[(usize, usize)]) -> Result<KernelEval> {
        let n = self.n();
        let nf = n as f64;
        let m = self.row_multipliers(zeta)?;
        let e = entries.len();
        let mut prod = DMatrix::zeros(n, e);
        for i in 0..n {
            for (k, &(a, b)) in entries.iter().enumerate() {
                prod[(i, k)] = self.design[(i, a)] * self.design[(i, b)];
            }
        }
        let values = prod.tr_mul(&m.total) / nf;
        let live = |i: usize| if m.clamp_flags[i] { 0.0 } else { 1.0 };

        let mut ctrl = prod.clone();
        let ctrl_scale = match &m.case {
            Some((rho, _, _)) => 1.0 - rho,
            None => 1.0,
        };
        for i in 0..n {
            ctrl.row_mut(i).scale_mut(ctrl_scale * m.control[i] * live(i));
        }
        let mut jacobian = ctrl.tr_mul(&self.features) / nf;

        if let Some((rho, q, norm)) = &m.case {
            let mut cases = prod;
            for i in 0..n {
                cases.row_mut(i).scale_mut(q[i] * self.curvature[i]);
            }
            let a = cases.row_sum().transpose() / nf;
            for i in 0..n {
                cases.row_mut(i).scale_mut(live(i));
            }
            let da = cases.tr_mul(&self.features) / nf;
            let qlive = DVector::from_iterator(n, (0..n).map(|i| q[i] * live(i)));
            let dnorm = self.features.tr_mul(&qlive) / nf;
            let case_jac = da / *norm - (&a * dnorm.transpose()) / (norm * norm);
            jacobian += case_jac * *rho;
        }
        Ok(KernelEval { values, jacobian })
    }
}

struct RowMultipliers {
    total: DVector<f64>,
    control: DVector<f64>,
    case: Option<(f64, DVector<f64>, f64)>,
    clamp_flags: Vec<bool>,
    clamped: usize,
}

/// `(1/N₁) Σᵢ exp(φ(Dᵢ;ζ)) b''(θ_w,i) vᵢvᵢᵀ` with `vᵢ` the working covariates.
pub fn reconstruct_info(
    panel: &CovariatePanel,
    working: &LinearPredictorSpec,
    family: Family,
    spec: &TiltSpec,
    zeta: &DVector<f64>,
) -> Result<FisherMatrix> {
    check_zeta(spec, zeta)?;
    Ok(InfoKernel::new(panel, working, family, spec)?.reconstruct(zeta)?.0)
}

/// Case-control reconstruction: `ρ·(case term) + (1−ρ)·(control term)`.
pub fn reconstruct_info_case_control(
    panel: &CovariatePanel,
    working: &LinearPredictorSpec,
    family: Family,
    spec: &TiltSpec,
    zeta: &DVector<f64>,
    beta: &DVector<f64>,
    rho: f64,
) -> Result<FisherMatrix> {
    check_zeta(spec, zeta)?;
    Ok(InfoKernel::new(panel, working, family, spec)?
        .with_case_mixture(panel, beta, rho)?
        .reconstruct(zeta)?
        .0)
}

/// Reconstructed entries selected by `mask` and their analytic derivatives
/// with respect to ζ. `case` adds the case-control mixture at `(β, ρ)`.
pub fn reconstruct_entries(
    panel: &CovariatePanel,
    working: &LinearPredictorSpec,
    family: Family,
    spec: &TiltSpec,
    zeta: &DVector<f64>,
    mask: &EntryMask,
    case: Option<(&DVector<f64>, f64)>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_zeta(spec, zeta)?;
    let mut kernel = InfoKernel::new(panel, working, family, spec)?;
    if let Some((beta, rho)) = case {
        kernel = kernel.with_case_mixture(panel, beta, rho)?;
    }
    if mask.dim() != kernel.dim() {
        return Err(Error::shape("entry mask", kernel.dim(), mask.dim()));
    }
    let eval = kernel.evaluate(zeta, mask.entries())?;
    Ok((eval.values, eval.jacobian))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub relative_tolerance: f64,
}

impl Default for TiltOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tolerance: 1e-8,
            relative_tolerance: 1e-12,
        }
    }
}

impl From<TiltOptions> for NlsOptions {
    fn from(o: TiltOptions) -> Self {
        NlsOptions {
            max_iterations: o.max_iterations,
            gradient_tolerance: o.gradient_tolerance,
            relative_tolerance: o.relative_tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltFit {
    pub spec: TiltSpec,
    pub zeta: DVector<f64>,
    pub train_objective: f64,
    pub test_objective: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub clamped: usize,
    /// Fitted from univariable summaries rather than information matching.
    #[serde(default)]
    pub marginal: bool,
}

pub(crate) fn fit_kernel(
    kernel: &InfoKernel,
    spec: &TiltSpec,
    observed: &FisherMatrix,
    mask: &EntryMask,
    start: Option<&DVector<f64>>,
    options: TiltOptions,
) -> Result<TiltFit> {
    if observed.dim() != kernel.dim() {
        return Err(Error::shape("observed information", kernel.dim(), observed.dim()));
    }
    if mask.dim() != kernel.dim() {
        return Err(Error::shape("entry mask", kernel.dim(), mask.dim()));
    }
    let k = kernel.feature_count();
    if k > mask.len() {
        return Err(Error::Identifiability(format!(
            "tilt \"{}\" has {k} parameters but only {} matched entries",
            spec.name(),
            mask.len()
        )));
    }
    let target = DVector::from_iterator(
        mask.len(),
        mask.entries().iter().map(|&(a, b)| observed.matrix()[(a, b)]),
    );
    let x0 = start.cloned().unwrap_or_else(|| DVector::zeros(k));
    let report = nls::minimize(
        x0,
        |zeta| {
            let ev = kernel.evaluate(zeta, mask.entries())?;
            Ok((ev.values - &target, ev.jacobian))
        },
        options.into(),
    )?;
    let (_, clamped) = kernel.reconstruct(&report.x)?;
    Ok(TiltFit {
        spec: spec.clone(),
        zeta: report.x,
        train_objective: report.objective,
        test_objective: None,
        converged: report.converged,
        iterations: report.iterations,
        clamped,
        marginal: false,
    })
}

/// Minimizes the masked Frobenius gap between the observed information and
/// the tilt-weighted panel reconstruction, starting from ζ = 0.
pub fn fit_tilt(
    observed: &FisherMatrix,
    panel: &CovariatePanel,
    working: &LinearPredictorSpec,
    family: Family,
    spec: &TiltSpec,
    mask: &EntryMask,
    options: TiltOptions,
) -> Result<TiltFit> {
    let kernel = InfoKernel::new(panel, working, family, spec)?;
    fit_kernel(&kernel, spec, observed, mask, None, options)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltSelection {
    /// Winner refit on every unique entry.
    pub best: TiltFit,
    /// Train-entry fits of every candidate, with their test gaps.
    pub candidates: Vec<TiltFit>,
    pub winner: usize,
}

pub(crate) fn select_kernels(
    kernels: &[(TiltSpec, InfoKernel)],
    observed: &FisherMatrix,
    split: f64,
    seed: u64,
    options: TiltOptions,
) -> Result<TiltSelection> {
    if kernels.is_empty() {
        return Err(Error::Selection("no candidate tilt models".into()));
    }
    let dim = observed.dim();
    let (train, test) = EntryMask::split(dim, split, seed)?;
    let most = kernels.iter().map(|(s, _)| s.feature_count()).max().unwrap_or(0);
    if most > train.len() {
        return Err(Error::Identifiability(format!(
            "{} training entries cannot identify a {most}-parameter tilt",
            train.len()
        )));
    }
    let mut fits = Vec::with_capacity(kernels.len());
    for (spec, kernel) in kernels {
        let mut fit = fit_kernel(kernel, spec, observed, &train, None, options)?;
        let (rec, _) = kernel.reconstruct(&fit.zeta)?;
        fit.test_objective = Some(frobenius_gap(observed, &rec, &test)?);
        fits.push(fit);
    }
    let mut winner: Option<usize> = None;
    for (i, fit) in fits.iter().enumerate() {
        if !fit.converged {
            continue;
        }
        winner = match winner {
            None => Some(i),
            Some(w) => {
                let (a, b) = (fit.test_objective.unwrap(), fits[w].test_objective.unwrap());
                let tie = (a - b).abs() <= 1e-12 * a.max(b);
                if (!tie && a < b) || (tie && fit.spec.feature_count() < fits[w].spec.feature_count()) {
                    Some(i)
                } else {
                    Some(w)
                }
            }
        };
    }
    let winner = winner.ok_or_else(|| {
        let detail: Vec<String> = fits
            .iter()
            .map(|f| {
                format!(
                    "{}: converged={} iterations={} train={:e}",
                    f.spec.name(),
                    f.converged,
                    f.iterations,
                    f.train_objective
                )
            })
            .collect();
        Error::Selection(format!("no candidate converged [{}]", detail.join("; ")))
    })?;
    let (spec, kernel) = &kernels[winner];
    let full = EntryMask::full(dim);
    let mut best = fit_kernel(kernel, spec, observed, &full, Some(&fits[winner].zeta), options)?;
    best.test_objective = fits[winner].test_objective;
    Ok(TiltSelection {
        best,
        candidates: fits,
        winner,
    })
}

/// Train/test selection among candidate tilts; the winner (smallest test
/// gap, then fewest parameters, then declaration order) is refit on the
/// full set of unique entries.
#[allow(clippy::too_many_arguments)]
pub fn select_tilt(
    observed: &FisherMatrix,
    panel: &CovariatePanel,
    working: &LinearPredictorSpec,
    family: Family,
    candidates: &[TiltSpec],
    split: f64,
    seed: u64,
    options: TiltOptions,
) -> Result<TiltSelection> {
    let kernels = candidates
        .iter()
        .map(|s| Ok((s.clone(), InfoKernel::new(panel, working, family, s)?)))
        .collect::<Result<Vec<_>>>()?;
    select_kernels(&kernels, observed, split, seed, options)
}

/// Solves the weighted univariable moment conditions
/// `E₁[w·(b'(θᴹ_k) − b'(θ_w))·(1, X_k)] = 0` for the tilt slopes. The
/// conditions are invariant to the weight scale, so the intercept is set to
/// make the panel-mean weight one.
pub fn fit_tilt_univariable(
    panel: &CovariatePanel,
    working: &LinearPredictorSpec,
    marginal: &MarginalSummary,
    family: Family,
    spec: &TiltSpec,
    options: TiltOptions,
) -> Result<TiltFit> {
    let k = spec.feature_count();
    let n_eq = 2 * marginal.entries.len();
    if k > n_eq {
        return Err(Error::Identifiability(format!(
            "tilt \"{}\" has {k} parameters but only {n_eq} marginal equations",
            spec.name()
        )));
    }
    let n = panel.n_rows();
    let design = panel.design(working.blocks());
    let theta_w = &design * working.coefficients();
    // residual columns: for each covariate, (g, g·x)
    let mut moments = DMatrix::zeros(n, n_eq);
    for (e, entry) in marginal.entries.iter().enumerate() {
        let col = panel
            .column_index(&entry.column)
            .ok_or_else(|| Error::Invalid(format!("marginal covariate \"{}\" not in panel", entry.column)))?;
        for i in 0..n {
            let x = panel.row_values(i)[col];
            let g = family.mean(entry.intercept + entry.slope * x) - family.mean(theta_w[i]);
            moments[(i, 2 * e)] = g;
            moments[(i, 2 * e + 1)] = g * x;
        }
    }
    let all = spec.resolve(panel)?.feature_matrix(panel);
    let icpt = spec.intercept_index();
    let free: Vec<usize> = (0..k).filter(|&j| j != icpt).collect();
    let f = all.select_columns(&free);

    let eval = |slopes: &DVector<f64>| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let lw = &f * slopes;
        let top = lw.max();
        let w = lw.map(|v| (v - top).exp());
        let total = w.sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::Numeric {
                row: 0,
                message: "degenerate univariable tilt weights".into(),
            });
        }
        let wn = w / total;
        let resid = moments.tr_mul(&wn);
        let fbar = f.tr_mul(&wn);
        let mut wm = moments.clone();
        for i in 0..n {
            wm.row_mut(i).scale_mut(wn[i]);
        }
        let jac = wm.tr_mul(&f) - &resid * fbar.transpose();
        Ok((resid, jac))
    };
    let report = nls::minimize(DVector::zeros(free.len()), eval, options.into())?;
    let lw = &f * &report.x;
    let top = lw.max();
    let intercept = -(top + lw.map(|v| (v - top).exp()).mean().ln());
    let mut zeta = DVector::zeros(k);
    zeta[icpt] = intercept;
    for (j, &col) in free.iter().enumerate() {
        zeta[col] = report.x[j];
    }
    let clamped = weights(panel, spec, &zeta)?.clamped;
    Ok(TiltFit {
        spec: spec.clone(),
        zeta,
        train_objective: report.objective,
        test_objective: None,
        converged: report.converged,
        iterations: report.iterations,
        clamped,
        marginal: true,
    })
}
