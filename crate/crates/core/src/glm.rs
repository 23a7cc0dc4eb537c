//! Exponential-family primitives, linear predictors, per-row score
//! contributions and a maximum-likelihood fitter for working models.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Block, CovariatePanel, PanelRow, StudyDesign, SummaryInput};
use crate::error::{Error, Result};

/// Canonical-link exponential family. Dispersion is fixed at one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    Logistic,
}

impl Family {
    /// Cumulant `b(θ)`.
    pub fn cumulant(self, theta: f64) -> f64 {
        match self {
            Family::Logistic => {
                if theta > 0.0 {
                    theta + (-theta).exp().ln_1p()
                } else {
                    theta.exp().ln_1p()
                }
            }
        }
    }

    /// Mean `b'(θ)`.
    #[inline]
    pub fn mean(self, theta: f64) -> f64 {
        match self {
            Family::Logistic => {
                if theta >= 0.0 {
                    1.0 / (1.0 + (-theta).exp())
                } else {
                    let e = theta.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    /// Variance function `b''(θ)`.
    #[inline]
    pub fn variance(self, theta: f64) -> f64 {
        match self {
            Family::Logistic => {
                let e = (-theta.abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
        }
    }

    /// Third cumulant derivative `b'''(θ)`.
    #[inline]
    pub fn variance_slope(self, theta: f64) -> f64 {
        match self {
            Family::Logistic => self.variance(theta) * (1.0 - 2.0 * self.mean(theta)),
        }
    }

    pub fn dispersion(self) -> f64 {
        1.0
    }

    /// Log-likelihood of one observation up to the normalizer `c(y, ψ)`.
    pub fn log_likelihood(self, y: f64, theta: f64) -> f64 {
        (y * theta - self.cumulant(theta)) / self.dispersion()
    }
}

pub fn mean_response(theta: f64, family: Family) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::Domain(format!("non-finite linear predictor {theta}")));
    }
    Ok(family.mean(theta))
}

/// Coefficients aligned to an ordered list of covariate blocks, intercept first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictorSpec {
    blocks: Vec<Block>,
    widths: Vec<usize>,
    coefficients: DVector<f64>,
}

impl LinearPredictorSpec {
    pub fn new(blocks: Vec<Block>, widths: [usize; 3], coefficients: DVector<f64>) -> Result<Self> {
        let ws: Vec<usize> = blocks
            .iter()
            .map(|b| match b {
                Block::X => widths[0],
                Block::Z => widths[1],
                Block::C => widths[2],
            })
            .collect();
        let expected = 1 + ws.iter().sum::<usize>();
        if coefficients.len() != expected {
            return Err(Error::shape(
                "linear predictor coefficients",
                expected,
                coefficients.len(),
            ));
        }
        Ok(Self {
            blocks,
            widths: ws,
            coefficients,
        })
    }

    /// Full-model layout `(β₀, β_x, β_z, β_c)` for a panel.
    pub fn full(panel: &CovariatePanel, beta: DVector<f64>) -> Result<Self> {
        Self::new(vec![Block::X, Block::Z, Block::C], panel.widths(), beta)
    }

    /// Working-model layout of a summary.
    pub fn working(panel: &CovariatePanel, summary: &SummaryInput) -> Result<Self> {
        Self::new(
            summary.covered_blocks().to_vec(),
            panel.widths(),
            summary.coefficients().clone(),
        )
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn coefficients(&self) -> &DVector<f64> {
        &self.coefficients
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Intercept-augmented covariate vector of a row in this layout.
    pub fn covariates(&self, row: &PanelRow<'_>) -> Result<DVector<f64>> {
        let mut v = Vec::with_capacity(self.len());
        v.push(1.0);
        for (b, &w) in self.blocks.iter().zip(&self.widths) {
            let vals = row.block(*b);
            if vals.len() != w {
                return Err(Error::shape(format!("row block {b}"), w, vals.len()));
            }
            v.extend_from_slice(vals);
        }
        Ok(DVector::from_vec(v))
    }
}

pub fn linear_predictor(row: &PanelRow<'_>, spec: &LinearPredictorSpec) -> Result<f64> {
    let mut theta = spec.coefficients[0];
    let mut j = 1;
    for (b, &w) in spec.blocks.iter().zip(&spec.widths) {
        let vals = row.block(*b);
        if vals.len() != w {
            return Err(Error::shape(format!("row block {b}"), w, vals.len()));
        }
        for &v in vals {
            theta += spec.coefficients[j] * v;
            j += 1;
        }
    }
    Ok(theta)
}

/// One row's contribution `[b'(θ) − b'(θ_w)]·(1, working covariates)`.
pub fn score_row(
    row: &PanelRow<'_>,
    full_spec: &LinearPredictorSpec,
    working_spec: &LinearPredictorSpec,
    family: Family,
) -> Result<DVector<f64>> {
    let theta = linear_predictor(row, full_spec)?;
    let theta_w = linear_predictor(row, working_spec)?;
    let resid = mean_response(theta, family)? - mean_response(theta_w, family)?;
    Ok(working_spec.covariates(row)? * resid)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            tolerance: 1e-10,
        }
    }
}

/// Maximum-likelihood fit of a working model.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingFit {
    pub coefficients: DVector<f64>,
    /// Inverse observed information at the fit.
    pub covariance: DMatrix<f64>,
    /// Total (not per-observation) observed information.
    pub information: DMatrix<f64>,
    pub n: usize,
    pub iterations: usize,
    pub log_likelihood: f64,
    /// ∞-norm of the score sum at the fit.
    pub gradient_norm: f64,
}

impl WorkingFit {
    pub fn to_summary(&self, design: StudyDesign, blocks: Vec<Block>) -> Result<SummaryInput> {
        SummaryInput::new(self.coefficients.clone(), self.covariance.clone(), design, blocks)
    }
}

fn log_likelihood(design: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, family: Family) -> f64 {
    let eta = design * beta;
    eta.iter().zip(y).map(|(&t, &yi)| family.log_likelihood(yi, t)).sum()
}

/// `ℓ(new) − ℓ(old)` summed termwise, which stays accurate near the
/// optimum where the two totals agree to many digits.
fn log_likelihood_gain(
    design: &DMatrix<f64>,
    y: &[f64],
    old: &DVector<f64>,
    new: &DVector<f64>,
    family: Family,
) -> f64 {
    let (a, b) = (design * old, design * new);
    a.iter()
        .zip(b.iter())
        .zip(y)
        .map(|((&ta, &tb), &yi)| family.log_likelihood(yi, tb) - family.log_likelihood(yi, ta))
        .sum()
}

fn score_and_information(
    design: &DMatrix<f64>,
    y: &[f64],
    beta: &DVector<f64>,
    family: Family,
) -> (DVector<f64>, DMatrix<f64>) {
    let eta = design * beta;
    let resid = DVector::from_iterator(y.len(), eta.iter().zip(y).map(|(&t, &yi)| yi - family.mean(t)));
    let mut weighted = design.clone();
    for (i, &t) in eta.iter().enumerate() {
        let w = family.variance(t);
        weighted.row_mut(i).scale_mut(w);
    }
    (design.tr_mul(&resid), design.tr_mul(&weighted))
}

/// Newton–Raphson (IRLS for canonical links) with step halving on
/// likelihood decrease.
pub fn fit_glm(design: &DMatrix<f64>, y: &[f64], family: Family, options: IrlsOptions) -> Result<WorkingFit> {
    let n = design.nrows();
    let k = design.ncols();
    if y.len() != n {
        return Err(Error::shape("outcomes", n, y.len()));
    }
    let events = y.iter().filter(|&&v| v > 0.5).count();
    if events == 0 || events == n {
        return Err(Error::Convergence {
            message: format!("outcomes need events and non-events ({events} of {n})"),
            trace: vec![],
        });
    }
    let mut beta = DVector::zeros(k);
    let mut ll = log_likelihood(design, y, &beta, family);
    let mut trace = vec![ll];
    for iter in 1..=options.max_iterations {
        let (score, info) = score_and_information(design, y, &beta, family);
        let chol = info.clone().cholesky().ok_or_else(|| Error::Convergence {
            message: "information not positive definite (separation or rank deficiency)".into(),
            trace: trace.clone(),
        })?;
        let step = chol.solve(&score);
        let mut scale = 1.0;
        let mut candidate = &beta + &step;
        let mut gain = log_likelihood_gain(design, y, &beta, &candidate, family);
        let mut halvings = 0;
        while !(gain >= -1e-12) && halvings < 40 {
            scale *= 0.5;
            candidate = &beta + &step * scale;
            gain = log_likelihood_gain(design, y, &beta, &candidate, family);
            halvings += 1;
        }
        let ll_new = ll + gain;
        let change = (&candidate - &beta).amax() / beta.amax().max(1.0);
        beta = candidate;
        ll = ll_new;
        trace.push(ll);
        if beta.amax() > 1e3 || !ll.is_finite() {
            return Err(Error::Convergence {
                message: "coefficients diverging (separation)".into(),
                trace,
            });
        }
        if change < options.tolerance {
            let (score, info) = score_and_information(design, y, &beta, family);
            let covariance = info
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Convergence {
                    message: "information singular at the fit".into(),
                    trace: trace.clone(),
                })?
                .inverse();
            return Ok(WorkingFit {
                coefficients: beta,
                covariance: (&covariance + covariance.transpose()) * 0.5,
                information: info,
                n,
                iterations: iter,
                log_likelihood: ll,
                gradient_norm: score.amax(),
            });
        }
    }
    Err(Error::Convergence {
        message: format!("IRLS exceeded {} iterations", options.max_iterations),
        trace,
    })
}

/// Fits the working model over `blocks` of a panel with observed outcomes.
pub fn fit_working_glm(
    panel: &CovariatePanel,
    outcomes: &[f64],
    blocks: &[Block],
    family: Family,
) -> Result<WorkingFit> {
    fit_glm(&panel.design(blocks), outcomes, family, IrlsOptions::default())
}
