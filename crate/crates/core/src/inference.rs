//! Uncertainty for the fused estimate: a sandwich covariance over the joint
//! parameter `η = (β, ζ₂, ζ₃)` and a parametric bootstrap.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FusionProblem, SummaryInput, SummarySlot};
use crate::error::{Error, Result};
use crate::fusion::{estimate, EstimatorConfig, FusionResult, Method, Mode, StackedEquations};
use crate::glm::LinearPredictorSpec;
use crate::tilt::{EntryMask, FisherMatrix, InfoKernel, TiltSpec, LOG_WEIGHT_CLAMP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceSource {
    Sandwich,
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointEstimate {
    /// `(β, ζ₂, ζ₃)`; the ζ parts are empty when absent.
    pub eta: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub source: CovarianceSource,
    pub replicate_count: Option<usize>,
    /// Lengths of the β, ζ₂ and ζ₃ parts.
    pub dims: [usize; 3],
}

impl JointEstimate {
    pub fn beta(&self) -> DVector<f64> {
        self.eta.rows(0, self.dims[0]).into_owned()
    }

    pub fn beta_covariance(&self) -> DMatrix<f64> {
        let d = self.dims[0];
        self.covariance.view((0, 0), (d, d)).into_owned()
    }

    pub fn standard_errors(&self) -> DVector<f64> {
        self.covariance.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

/// Tilt pieces needed for the ζ rows of the stacked score.
struct TiltBlock {
    kernel: InfoKernel,
    zeta: DVector<f64>,
    observed: FisherMatrix,
    spec: TiltSpec,
}

fn tilt_block(problem: &FusionProblem, slot: SummarySlot, result: &FusionResult) -> Result<Option<TiltBlock>> {
    let (fit, cands) = match slot {
        SummarySlot::X => (&result.tilt_x, &result.candidates_x),
        SummarySlot::Z => (&result.tilt_z, &result.candidates_z),
    };
    let Some(fit) = fit else { return Ok(None) };
    if fit.marginal {
        return Err(Error::Unsupported(
            "sandwich covariance for univariable tilt fits; use the bootstrap".into(),
        ));
    }
    if cands.len() > 1 {
        return Err(Error::Unsupported(format!(
            "sandwich covariance after selecting among {} tilt candidates; use the bootstrap",
            cands.len()
        )));
    }
    let summary = problem.summary(slot);
    let working = LinearPredictorSpec::working(&problem.panel, summary)?;
    Ok(Some(TiltBlock {
        kernel: InfoKernel::new(&problem.panel, &working, problem.family, &fit.spec)?,
        zeta: fit.zeta.clone(),
        observed: FisherMatrix::from_summary(summary)?,
        spec: fit.spec.clone(),
    }))
}

/// Unit-mean weights of a tilt at `zeta`.
fn normalized_weights(block: Option<&TiltBlock>, zeta: Option<&DVector<f64>>, n: usize) -> DVector<f64> {
    match (block, zeta) {
        (Some(b), Some(z)) => {
            let w = (b.kernel.features() * z).map(|v| v.clamp(-LOG_WEIGHT_CLAMP, LOG_WEIGHT_CLAMP).exp());
            let m = w.mean();
            w / m
        }
        _ => DVector::from_element(n, 1.0),
    }
}

/// `Ψ_β = Jacᵀ ḡ` at the given weights.
fn beta_equation(
    problem: &FusionProblem,
    beta: &DVector<f64>,
    wx: &DVector<f64>,
    wz: &DVector<f64>,
) -> Result<DVector<f64>> {
    let eqs = StackedEquations::new(problem, wx, wz, false)?;
    let (g, jac) = eqs.evaluate(beta)?;
    Ok(jac.tr_mul(&g))
}

/// Sandwich covariance `Ĵ⁻¹ B̂ Ĵ⁻ᵀ / N₁` of the joint estimating equations:
/// the normal equations of the stacked least-squares problem for β and the
/// gradients of the Frobenius gaps for each tilt. Summary-estimate noise
/// is not included.
pub fn sandwich_covariance(problem: &FusionProblem, result: &FusionResult) -> Result<JointEstimate> {
    if !result.converged {
        return Err(Error::Invalid("sandwich covariance needs a converged fit".into()));
    }
    if result.method == Method::Tw {
        return Err(Error::Unsupported(
            "sandwich covariance for externally supplied weights".into(),
        ));
    }
    if problem.summary_x.design().is_case_control() || problem.summary_z.design().is_case_control() {
        return Err(Error::Unsupported(
            "sandwich covariance for case-control summaries; use the bootstrap".into(),
        ));
    }
    let n = problem.panel.n_rows();
    let nf = n as f64;
    let beta = result.params.beta.clone();
    let d = beta.len();
    let tilts = [
        tilt_block(problem, SummarySlot::X, result)?,
        tilt_block(problem, SummarySlot::Z, result)?,
    ];
    let k = [
        tilts[0].as_ref().map_or(0, |t| t.zeta.len()),
        tilts[1].as_ref().map_or(0, |t| t.zeta.len()),
    ];
    let dim = d + k[0] + k[1];

    let wx = normalized_weights(tilts[0].as_ref(), tilts[0].as_ref().map(|t| &t.zeta), n);
    let wz = normalized_weights(tilts[1].as_ref(), tilts[1].as_ref().map(|t| &t.zeta), n);
    let eqs = StackedEquations::new(problem, &wx, &wz, false)?;
    let family = eqs.family();
    let g_rows = eqs.rows(&beta)?;
    let (gbar, jac) = eqs.evaluate(&beta)?;
    let u = eqs.full_design();
    let theta = u * &beta;

    let mut scores = DMatrix::zeros(n, dim);
    let mut jmat = DMatrix::zeros(dim, dim);

    // β rows
    let mut hess = jac.tr_mul(&jac);
    let mut row0 = 0;
    let mut inner = DVector::<f64>::zeros(n); // Σ_k w_ki v_ki·ḡ_k
    for s in 0..2 {
        let block = eqs.slot(s);
        let l = block.design.ncols();
        let gk = gbar.rows(row0, l);
        let proj = &block.design * gk;
        for i in 0..n {
            inner[i] += block.weights[i] * proj[i];
        }
        row0 += l;
    }
    let mut weighted_u = u.clone();
    for i in 0..n {
        weighted_u
            .row_mut(i)
            .scale_mut(family.variance_slope(theta[i]) * inner[i] / nf);
    }
    hess += u.tr_mul(&weighted_u);
    let jtg = jac.tr_mul(&gbar);
    for i in 0..n {
        let gi = g_rows.row(i).transpose();
        let s_i: DVector<f64> = jac.tr_mul(&gi) + u.row(i).transpose() * (family.variance(theta[i]) * inner[i]) - &jtg;
        scores.view_mut((i, 0), (1, d)).copy_from(&s_i.transpose());
    }
    jmat.view_mut((0, 0), (d, d)).copy_from(&hess);

    // ζ rows
    let mut col0 = d;
    for s in 0..2 {
        let Some(t) = &tilts[s] else { continue };
        let kk = k[s];
        let mask = EntryMask::full(t.observed.dim());
        let entries = mask.entries();
        let ev = t.kernel.evaluate(&t.zeta, entries)?;
        let target = DVector::from_iterator(entries.len(), entries.iter().map(|&(a, b)| t.observed.matrix()[(a, b)]));
        let r = &ev.values - &target;
        let dmat = &ev.jacobian;
        let f = t.kernel.features();
        let v = t.kernel.design();
        let curv = t.kernel.curvature();
        let dtr = dmat.tr_mul(&r);
        let mut zz = dmat.tr_mul(dmat);
        for i in 0..n {
            let raw = f.row(i).transpose().dot(&t.zeta);
            let live = raw.abs() <= LOG_WEIGHT_CLAMP;
            let c = raw.clamp(-LOG_WEIGHT_CLAMP, LOG_WEIGHT_CLAMP).exp() * curv[i];
            let h = DVector::from_iterator(entries.len(), entries.iter().map(|&(a, b)| c * v[(i, a)] * v[(i, b)]));
            let fi = f.row(i).transpose();
            let hr = if live { h.dot(&r) } else { 0.0 };
            let s_i = dmat.tr_mul(&(&h - &target)) + &fi * hr - &dtr;
            scores.view_mut((i, col0), (1, kk)).copy_from(&s_i.transpose());
            zz += (&fi * fi.transpose()) * (hr / nf);
        }
        jmat.view_mut((col0, col0), (kk, kk)).copy_from(&zz);

        // ∂Ψ_β/∂ζ by central differences through the normalized weights
        for j in 0..kk {
            let step = 1e-5 * t.zeta[j].abs().max(1.0);
            let mut psi = [DVector::zeros(d), DVector::zeros(d)];
            for (slot_sign, sign) in [(0usize, 1.0), (1, -1.0)] {
                let mut z = t.zeta.clone();
                z[j] += sign * step;
                let w = normalized_weights(Some(t), Some(&z), n);
                let (a, b) = if s == 0 { (&w, &wz) } else { (&wx, &w) };
                psi[slot_sign] = beta_equation(problem, &beta, a, b)?;
            }
            let col = (&psi[0] - &psi[1]) / (2.0 * step);
            jmat.view_mut((0, col0 + j), (d, 1)).copy_from(&col);
        }
        log::debug!("sandwich tilt block \"{}\" with {kk} parameters", t.spec.name());
        col0 += kk;
    }

    let bmat = scores.tr_mul(&scores) / nf;
    let svd = jmat.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition < 1e14) {
        return Err(Error::Singular {
            context: "sandwich bread matrix".into(),
            condition,
        });
    }
    let jinv = jmat.clone().lu().try_inverse().ok_or(Error::Singular {
        context: "sandwich bread matrix".into(),
        condition,
    })?;
    let cov = &jinv * bmat * jinv.transpose() / nf;
    let cov = (&cov + cov.transpose()) * 0.5;

    let mut eta = DVector::zeros(dim);
    eta.rows_mut(0, d).copy_from(&beta);
    let mut at = d;
    for t in tilts.iter().flatten() {
        eta.rows_mut(at, t.zeta.len()).copy_from(&t.zeta);
        at += t.zeta.len();
    }
    Ok(JointEstimate {
        eta,
        covariance: cov,
        source: CovarianceSource::Sandwich,
        replicate_count: None,
        dims: [d, k[0], k[1]],
    })
}

/// Everything needed to rerun the estimation pipeline on a replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub estimator: EstimatorConfig,
    pub candidates_x: Vec<TiltSpec>,
    pub candidates_z: Vec<TiltSpec>,
    pub split: f64,
    /// Seed of the train/test entry split.
    pub split_seed: u64,
}

impl PipelineConfig {
    pub fn run(&self, problem: &FusionProblem) -> Result<FusionResult> {
        estimate(
            problem,
            &self.estimator,
            &self.candidates_x,
            &self.candidates_z,
            self.split,
            self.split_seed,
            None,
        )
    }
}

/// How replicate random streams are derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamPolicy {
    /// Replicate `b` uses stream `b` of the master seed.
    #[default]
    PerReplicate,
    /// Every replicate reuses stream 0; a determinism check.
    Identical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: usize,
    /// Empty when the replicate failed.
    pub beta: Vec<f64>,
    pub converged: bool,
    pub tilt_x: Option<String>,
    pub tilt_z: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// β-only estimate at the original data, with the replicate covariance.
    pub estimate: JointEstimate,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub replicates: Vec<ReplicateRecord>,
    pub failures: usize,
    /// More than 10% of replicates failed.
    pub flagged: bool,
}

fn draw_summary(summary: &SummaryInput, rng: &mut ChaCha20Rng) -> Result<SummaryInput> {
    let l = summary
        .covariance()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Invalid("summary covariance not positive definite".into()))?
        .l();
    let z = DVector::from_fn(summary.dim(), |_, _| StandardNormal.sample(rng));
    summary.with_coefficients(summary.coefficients() + l * z)
}

fn run_replicate(problem: &FusionProblem, pipeline: &PipelineConfig, seed: u64, stream: u64) -> Result<FusionResult> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let n = problem.panel.n_rows();
    let rows: Vec<usize> = (0..n).map(|_| rand::Rng::random_range(&mut rng, 0..n)).collect();
    let panel = problem.panel.select_rows(&rows);
    let summary_x = draw_summary(&problem.summary_x, &mut rng)?;
    let summary_z = draw_summary(&problem.summary_z, &mut rng)?;
    let mut rep = problem.with_panel(panel);
    rep.summary_x = summary_x;
    rep.summary_z = summary_z;
    pipeline.run(&rep)
}

/// Type-7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Resamples panel rows, redraws both summaries' coefficients from their
/// asymptotic normal distributions, and reruns the whole pipeline
/// (including tilt selection) `b` times.
pub fn parametric_bootstrap(
    problem: &FusionProblem,
    pipeline: &PipelineConfig,
    b: usize,
    seed: u64,
    policy: StreamPolicy,
) -> Result<BootstrapResult> {
    if b < 2 {
        return Err(Error::Invalid(format!(
            "bootstrap needs at least 2 replicates, got {b}"
        )));
    }
    if pipeline.estimator.mode == Mode::KnownWeights {
        return Err(Error::Unsupported("bootstrap with externally supplied weights".into()));
    }
    let base = pipeline.run(problem)?;
    let d = base.params.beta.len();
    let records: Vec<ReplicateRecord> = (0..b)
        .into_par_iter()
        .map(|i| {
            let stream = match policy {
                StreamPolicy::PerReplicate => i as u64,
                StreamPolicy::Identical => 0,
            };
            match run_replicate(problem, pipeline, seed, stream) {
                Ok(fit) => ReplicateRecord {
                    index: i,
                    beta: fit.params.beta.iter().copied().collect(),
                    converged: fit.converged,
                    tilt_x: fit.tilt_x.as_ref().map(|t| t.spec.name().to_string()),
                    tilt_z: fit.tilt_z.as_ref().map(|t| t.spec.name().to_string()),
                    error: None,
                },
                Err(e) => {
                    log::warn!("bootstrap replicate {i} failed: {e}");
                    ReplicateRecord {
                        index: i,
                        beta: vec![],
                        converged: false,
                        tilt_x: None,
                        tilt_z: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    let ok: Vec<&ReplicateRecord> = records.iter().filter(|r| r.converged).collect();
    let failures = b - ok.len();
    let flagged = failures * 10 > b;
    if flagged {
        log::warn!("{failures} of {b} bootstrap replicates failed");
    }
    if ok.len() < 2 {
        return Err(Error::Convergence {
            message: format!("only {} of {b} bootstrap replicates succeeded", ok.len()),
            trace: vec![],
        });
    }
    let m = ok.len() as f64;
    let draws = DMatrix::from_fn(ok.len(), d, |i, j| ok[i].beta[j]);
    let mean = draws.row_mean();
    let mut centered = draws.clone();
    for i in 0..ok.len() {
        let mut row = centered.row_mut(i);
        row -= &mean;
    }
    let covariance = centered.tr_mul(&centered) / (m - 1.0);
    let mut lower = DVector::zeros(d);
    let mut upper = DVector::zeros(d);
    for j in 0..d {
        let mut col: Vec<f64> = draws.column(j).iter().copied().collect();
        col.sort_by(f64::total_cmp);
        lower[j] = quantile_sorted(&col, 0.025);
        upper[j] = quantile_sorted(&col, 0.975);
    }
    Ok(BootstrapResult {
        estimate: JointEstimate {
            eta: base.params.beta.clone(),
            covariance,
            source: CovarianceSource::Bootstrap,
            replicate_count: Some(ok.len()),
            dims: [d, 0, 0],
        },
        lower,
        upper,
        replicates: records,
        failures,
        flagged,
    })
}

impl BootstrapResult {
    /// One row per replicate: index, β components, convergence flag and the
    /// selected tilt names.
    pub fn write_archive(&self, path: impl AsRef<Path>, beta_names: &[String]) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        let mut header = vec!["replicate".to_string()];
        header.extend(beta_names.iter().cloned());
        header.extend(["converged", "tilt_x", "tilt_z"].map(String::from));
        w.write_record(&header)?;
        for r in &self.replicates {
            let mut rec = vec![r.index.to_string()];
            if r.beta.is_empty() {
                rec.extend(beta_names.iter().map(|_| String::new()));
            } else {
                rec.extend(r.beta.iter().map(|v| format!("{v:?}")));
            }
            rec.push(r.converged.to_string());
            rec.push(r.tilt_x.clone().unwrap_or_default());
            rec.push(r.tilt_z.clone().unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Names of `(β₀, β_x, β_z, β_c)` for a panel.
pub fn beta_names(problem: &FusionProblem) -> Vec<String> {
    std::iter::once("(Intercept)".to_string())
        .chain(problem.panel.names().iter().cloned())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Block, CovariatePanel, StudyDesign};
    use crate::fusion::{solve_calibrated, solve_homogeneous};
    use crate::glm::{fit_working_glm, Family};
    use crate::tilt::Term;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    const LOGIT: Family = Family::Logistic;

    fn panel(n: usize, rng: &mut ChaCha8Rng, shift: f64) -> CovariatePanel {
        let vals: Vec<f64> = (0..n * 3)
            .map(|_| rng.sample::<f64, _>(StandardNormal) + shift)
            .collect();
        CovariatePanel::from_row_major(vals, n, [1, 1, 1], vec!["x1".into(), "z1".into(), "c1".into()]).unwrap()
    }

    fn study(n: usize, rng: &mut ChaCha8Rng, blocks: Vec<Block>, shift: f64) -> SummaryInput {
        let p = panel(n, rng, shift);
        let beta = DVector::from_vec(vec![-1.0, 0.5, -0.4, 0.3]);
        let u = p.design(&[Block::X, Block::Z, Block::C]);
        let y: Vec<f64> = (&u * beta)
            .iter()
            .map(|t| (rng.random::<f64>() < LOGIT.mean(*t)) as u8 as f64)
            .collect();
        fit_working_glm(&p, &y, &blocks, LOGIT)
            .unwrap()
            .to_summary(StudyDesign::Prospective { n }, blocks)
            .unwrap()
    }

    fn problem(n1: usize, seed: u64) -> FusionProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p1 = panel(n1, &mut rng, 0.0);
        let sx = study(5000, &mut rng, vec![Block::X, Block::C], 0.0);
        let sz = study(5000, &mut rng, vec![Block::Z, Block::C], 0.0);
        FusionProblem::new(p1, sx, sz, LOGIT).unwrap()
    }

    fn intercept_only() -> Vec<TiltSpec> {
        vec![TiltSpec::custom("intercept", vec![Term::Intercept]).unwrap()]
    }

    #[test]
    fn intercept_only_tilt_matches_delta_method() {
        let prob = problem(400, 1);
        let cfg = EstimatorConfig::default();
        let fit = solve_calibrated(&prob, &cfg, &intercept_only(), &intercept_only(), 0.8, 3).unwrap();
        let est = sandwich_covariance(&prob, &fit).unwrap();
        assert_eq!(est.dims, [4, 1, 1]);
        let n = 400.0;
        for (slot, idx) in [(SummarySlot::X, 4), (SummarySlot::Z, 5)] {
            let s = prob.summary(slot);
            let observed = s.observed_information().unwrap();
            let v = prob.panel.design(s.covered_blocks());
            let theta = &v * s.coefficients();
            let l = v.ncols();
            // per-row unweighted information entries k_ie
            let mut k = vec![];
            for i in 0..400 {
                let b2 = LOGIT.variance(theta[i]);
                let mut row = vec![];
                for a in 0..l {
                    for b in a..l {
                        row.push(b2 * v[(i, a)] * v[(i, b)]);
                    }
                }
                k.push(row);
            }
            let e = k[0].len();
            let kbar: Vec<f64> = (0..e).map(|j| k.iter().map(|r| r[j]).sum::<f64>() / n).collect();
            let mut obs = vec![];
            for a in 0..l {
                for b in a..l {
                    obs.push(observed[(a, b)]);
                }
            }
            let sik: f64 = (0..e).map(|j| obs[j] * kbar[j]).sum();
            let skk: f64 = kbar.iter().map(|v| v * v).sum();
            let zeta = (sik / skk).ln();
            assert!((est.eta[idx] - zeta).abs() < 1e-6, "{} vs {zeta}", est.eta[idx]);
            // delta method for log(Σ Î K̄ / Σ K̄²)
            let c: Vec<f64> = (0..e).map(|j| obs[j] / sik - 2.0 * kbar[j] / skk).collect();
            let lin: Vec<f64> = k.iter().map(|r| (0..e).map(|j| c[j] * r[j]).sum()).collect();
            let mean = lin.iter().sum::<f64>() / n;
            let var = lin.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n / n;
            let got = est.covariance[(idx, idx)];
            assert!((got - var).abs() < 1e-6 * var, "{got} vs {var}");
        }
        // constant weights leave β's equation untouched by ζ
        let nw = solve_homogeneous(&prob, &cfg).unwrap();
        let nw_est = sandwich_covariance(&prob, &nw).unwrap();
        let diff = (est.beta_covariance() - nw_est.beta_covariance()).amax();
        assert!(diff < 1e-6 * nw_est.covariance.amax(), "{diff}");
    }

    #[test]
    fn beta_block_matches_jackknife() {
        let prob = problem(300, 2);
        let cfg = EstimatorConfig::default();
        let fit = solve_homogeneous(&prob, &cfg).unwrap();
        let est = sandwich_covariance(&prob, &fit).unwrap();
        assert_eq!(est.dims, [4, 0, 0]);
        let n = prob.panel.n_rows();
        let loo: Vec<DVector<f64>> = (0..n)
            .map(|i| {
                let rows: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                solve_homogeneous(&prob.with_panel(prob.panel.select_rows(&rows)), &cfg)
                    .unwrap()
                    .params
                    .beta
            })
            .collect();
        let mean = loo.iter().fold(DVector::zeros(4), |a, b| a + b) / n as f64;
        for j in 0..4 {
            let jk = loo.iter().map(|b| (b[j] - mean[j]).powi(2)).sum::<f64>() * (n - 1) as f64 / n as f64;
            let sw = est.covariance[(j, j)];
            assert!(sw > 0.0);
            assert!((sw / jk - 1.0).abs() < 0.15, "coef {j}: sandwich {sw} jackknife {jk}");
        }
    }

    #[test]
    fn invariant_to_row_order_and_rejects_selection() {
        let prob = problem(300, 4);
        let cfg = EstimatorConfig::default();
        let add_x = vec![TiltSpec::parse("additive", &prob.panel, &[Block::X, Block::C]).unwrap()];
        let add_z = vec![TiltSpec::parse("additive", &prob.panel, &[Block::Z, Block::C]).unwrap()];
        let fit = solve_calibrated(&prob, &cfg, &add_x, &add_z, 0.8, 3).unwrap();
        let est = sandwich_covariance(&prob, &fit).unwrap();
        assert!(est.covariance.diagonal().iter().all(|v| *v > 0.0));
        let rev: Vec<usize> = (0..300).rev().collect();
        let prob_r = prob.with_panel(prob.panel.select_rows(&rev));
        let fit_r = solve_calibrated(&prob_r, &cfg, &add_x, &add_z, 0.8, 3).unwrap();
        let est_r = sandwich_covariance(&prob_r, &fit_r).unwrap();
        assert!((&est.covariance - &est_r.covariance).amax() < 1e-6 * est_r.covariance.amax());

        let two_x = vec![
            add_x[0].clone(),
            TiltSpec::parse("additive_with_interactions", &prob.panel, &[Block::X, Block::C]).unwrap(),
        ];
        let sel = solve_calibrated(&prob, &cfg, &two_x, &add_z, 0.8, 3).unwrap();
        assert!(matches!(sandwich_covariance(&prob, &sel), Err(Error::Unsupported(_))));
    }

    fn nw_pipeline() -> PipelineConfig {
        PipelineConfig {
            estimator: EstimatorConfig {
                mode: Mode::Homogeneity,
                ..EstimatorConfig::default()
            },
            candidates_x: vec![],
            candidates_z: vec![],
            split: 0.8,
            split_seed: 1,
        }
    }

    #[test]
    fn identical_streams_give_zero_covariance() {
        let prob = problem(200, 5);
        let out = parametric_bootstrap(&prob, &nw_pipeline(), 2, 9, StreamPolicy::Identical).unwrap();
        assert_eq!(out.estimate.covariance.amax(), 0.0);
        assert_eq!(out.replicates[0].beta, out.replicates[1].beta);
        assert!(parametric_bootstrap(&prob, &nw_pipeline(), 1, 9, StreamPolicy::Identical).is_err());
    }

    #[test]
    fn bootstrap_is_reproducible_and_archives() {
        let prob = problem(200, 6);
        let a = parametric_bootstrap(&prob, &nw_pipeline(), 6, 17, StreamPolicy::PerReplicate).unwrap();
        let b = parametric_bootstrap(&prob, &nw_pipeline(), 6, 17, StreamPolicy::PerReplicate).unwrap();
        assert_eq!(a, b);
        assert!(!a.flagged);
        for j in 0..4 {
            assert!(a.lower[j] <= a.upper[j]);
        }
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        a.write_archive(&pa, &beta_names(&prob)).unwrap();
        b.write_archive(&pb, &beta_names(&prob)).unwrap();
        let text = std::fs::read_to_string(&pa).unwrap();
        assert_eq!(text, std::fs::read_to_string(&pb).unwrap());
        assert_eq!(text.lines().count(), 7);
        assert!(text.starts_with("replicate,(Intercept),x1,z1,c1,converged,tilt_x,tilt_z"));
    }

    #[test]
    fn smaller_summary_noise_shrinks_spread() {
        let prob = problem(300, 7);
        let mut tight = prob.clone();
        tight.summary_x = prob.summary_x.with_scaled_covariance(1e-4).unwrap();
        tight.summary_z = prob.summary_z.with_scaled_covariance(1e-4).unwrap();
        let wide = parametric_bootstrap(&prob, &nw_pipeline(), 60, 3, StreamPolicy::PerReplicate).unwrap();
        let narrow = parametric_bootstrap(&tight, &nw_pipeline(), 60, 3, StreamPolicy::PerReplicate).unwrap();
        let total = |r: &BootstrapResult| r.estimate.covariance.trace();
        assert!(total(&narrow) < total(&wide), "{} vs {}", total(&narrow), total(&wide));
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 0.5), 3.0);
        assert!((quantile_sorted(&v, 0.975) - 4.9).abs() < 1e-12);
    }
}
