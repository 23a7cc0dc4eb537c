//! Serializable reports and plain-text tables.

use nalgebra::DMatrix;
use serde::Serialize;
use tiltfuse::fusion::{FusionResult, Method, Mode};
use tiltfuse::sim::SimSummary;
use tiltfuse::{Diagnostics, TiltFit};

const Z975: f64 = 1.959963984540054;

/// Odds ratio with an optional 95% interval, as `0.68 (0.63,0.74)`.
pub fn odds_ratio_cell(estimate: f64, interval: Option<(f64, f64)>) -> String {
    match interval {
        Some((lo, hi)) => format!("{:.2} ({:.2},{:.2})", estimate.exp(), lo.exp(), hi.exp()),
        None => format!("{:.2}", estimate.exp()),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
    /// Interval on the coefficient scale.
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub odds_ratio: f64,
    pub odds_ratio_ci: String,
}

impl CoefficientRow {
    fn new(name: &str, estimate: f64, std_error: Option<f64>, interval: Option<(f64, f64)>) -> Self {
        Self {
            name: name.to_string(),
            estimate,
            std_error,
            lower: interval.map(|i| i.0),
            upper: interval.map(|i| i.1),
            odds_ratio: estimate.exp(),
            odds_ratio_ci: odds_ratio_cell(estimate, interval),
        }
    }
}

/// Rows with Wald intervals when standard errors are available.
pub fn wald_rows(names: &[String], beta: &[f64], se: Option<&[f64]>) -> Vec<CoefficientRow> {
    names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let s = se.map(|s| s[j]);
            let interval = s.map(|s| (beta[j] - Z975 * s, beta[j] + Z975 * s));
            CoefficientRow::new(name, beta[j], s, interval)
        })
        .collect()
}

/// Rows with percentile intervals.
pub fn percentile_rows(
    names: &[String],
    beta: &[f64],
    se: &[f64],
    lower: &[f64],
    upper: &[f64],
) -> Vec<CoefficientRow> {
    names
        .iter()
        .enumerate()
        .map(|(j, name)| CoefficientRow::new(name, beta[j], Some(se[j]), Some((lower[j], upper[j]))))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TiltReport {
    pub name: String,
    pub terms: Vec<String>,
    pub zeta: Vec<f64>,
    pub train_gap: f64,
    pub test_gap: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub clamped_rows: usize,
    pub marginal: bool,
}

impl From<&TiltFit> for TiltReport {
    fn from(f: &TiltFit) -> Self {
        Self {
            name: f.spec.name().to_string(),
            terms: f.spec.terms().iter().map(|t| t.to_string()).collect(),
            zeta: f.zeta.iter().copied().collect(),
            train_gap: f.train_objective,
            test_gap: f.test_objective,
            converged: f.converged,
            iterations: f.iterations,
            clamped_rows: f.clamped,
            marginal: f.marginal,
        }
    }
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CovarianceReport {
    pub source: String,
    /// Lengths of the β, ζ₂ and ζ₃ parts of the parameter vector.
    pub dims: [usize; 3],
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub method: Method,
    pub mode: Mode,
    pub converged: bool,
    pub iterations: usize,
    pub residual_norm: f64,
    pub gradient_norm: f64,
    pub coefficients: Vec<CoefficientRow>,
    pub nuisance_x: Option<f64>,
    pub nuisance_z: Option<f64>,
    pub tilt_x: Option<TiltReport>,
    pub tilt_z: Option<TiltReport>,
    pub candidates_x: Vec<TiltReport>,
    pub candidates_z: Vec<TiltReport>,
    pub trace: Vec<f64>,
    pub loop_trace: Vec<f64>,
    pub covariance: Option<CovarianceReport>,
    /// Why no covariance was computed, if none was.
    pub covariance_note: Option<String>,
    pub diagnostics: Diagnostics,
}

impl EstimateReport {
    pub fn new(
        mode: Mode,
        fit: &FusionResult,
        coefficients: Vec<CoefficientRow>,
        covariance: Option<CovarianceReport>,
        covariance_note: Option<String>,
        diagnostics: Diagnostics,
    ) -> Self {
        Self {
            method: fit.method,
            mode,
            converged: fit.converged,
            iterations: fit.iterations,
            residual_norm: fit.residual_norm,
            gradient_norm: fit.gradient_norm,
            coefficients,
            nuisance_x: fit.params.nuisance_x,
            nuisance_z: fit.params.nuisance_z,
            tilt_x: fit.tilt_x.as_ref().map(TiltReport::from),
            tilt_z: fit.tilt_z.as_ref().map(TiltReport::from),
            candidates_x: fit.candidates_x.iter().map(TiltReport::from).collect(),
            candidates_z: fit.candidates_z.iter().map(TiltReport::from).collect(),
            trace: fit.trace.clone(),
            loop_trace: fit.loop_trace.clone(),
            covariance,
            covariance_note,
            diagnostics,
        }
    }
}

pub fn coefficient_table(rows: &[CoefficientRow]) -> String {
    let mut s = format!(
        "{:<14} {:>10} {:>10}  {}\n",
        "term", "estimate", "std.err", "odds ratio (95% CI)"
    );
    for r in rows {
        let se = r.std_error.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        s += &format!("{:<14} {:>10.4} {:>10}  {}\n", r.name, r.estimate, se, r.odds_ratio_ci);
    }
    s
}

pub fn tilt_line(label: &str, tilt: Option<&TiltReport>, candidates: &[TiltReport]) -> String {
    let Some(t) = tilt else {
        return String::new();
    };
    let mut s = format!("{label}: {} (gap {:.3e})", t.name, t.train_gap);
    if !candidates.is_empty() {
        let parts: Vec<String> = candidates
            .iter()
            .map(|c| match c.test_gap {
                Some(g) => format!("{} test {:.3e}", c.name, g),
                None => format!("{} not converged", c.name),
            })
            .collect();
        s += &format!("; candidates: {}", parts.join(", "));
    }
    s + "\n"
}

/// Bias (MCSE) per coefficient and method, followed by failure counts.
pub fn simulation_table(summary: &SimSummary) -> String {
    let mut s = format!("{:<8}", "term");
    for m in &summary.methods {
        s += &format!(" {:>22}", format!("{} bias (mcse)", m.method));
    }
    s += "\n";
    let names: Vec<&String> = summary.methods[0].coefficients.iter().map(|c| &c.name).collect();
    for (j, name) in names.iter().enumerate() {
        s += &format!("{name:<8}");
        for m in &summary.methods {
            let c = &m.coefficients[j];
            s += &format!(" {:>22}", format!("{:+.4} ({:.4})", c.bias, c.mcse));
        }
        s += "\n";
    }
    for m in &summary.methods {
        s += &format!("{}: {} converged, {} failed", m.method, m.converged, m.failed);
        if let Some(l) = m.loop_convergence {
            s += &format!(", alternation converged in {:.1}%", 100.0 * l);
        }
        if !m.selections_x.is_empty() {
            s += &format!(", selected {:?} / {:?}", m.selections_x, m.selections_z);
        }
        s += "\n";
    }
    if summary.generation_failures > 0 {
        s += &format!("{} replicates could not be generated\n", summary.generation_failures);
    }
    s
}
