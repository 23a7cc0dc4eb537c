//! Damped Gauss–Newton for small dense least-squares problems.
//!
//! Minimizes `‖r(x)‖²`. Each iteration solves
//! `(JᵀJ + λ·diag(JᵀJ)) δ = −Jᵀr` and only accepts steps that lower the
//! objective, so the accepted objective sequence is non-increasing. `λ`
//! shrinks after accepted steps and grows after rejected ones; with small
//! `λ` the step is the plain Gauss–Newton step.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlsOptions {
    pub max_iterations: usize,
    /// Stop when `‖Jᵀr‖∞` falls below this.
    pub gradient_tolerance: f64,
    /// Stop when an accepted step changes the objective by less than this,
    /// relative to its value. Zero disables the test.
    pub relative_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlsReport {
    pub x: DVector<f64>,
    pub objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted step, starting with the initial value.
    pub trace: Vec<f64>,
}

const LAMBDA_MIN: f64 = 1e-12;
const LAMBDA_MAX: f64 = 1e12;

pub fn minimize<F>(x0: DVector<f64>, mut eval: F, options: NlsOptions) -> Result<NlsReport>
where
    F: FnMut(&DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>,
{
    let mut x = x0;
    let (mut r, mut jac) = eval(&x)?;
    let mut obj = r.norm_squared();
    let mut trace = vec![obj];
    let mut lambda = 1e-6;
    let mut iterations = 0;
    let mut converged = false;
    let mut grad = jac.tr_mul(&r);

    while iterations < options.max_iterations {
        if grad.amax() < options.gradient_tolerance || obj == 0.0 {
            converged = true;
            break;
        }
        iterations += 1;
        let jtj = jac.tr_mul(&jac);
        let mut accepted = false;
        while lambda <= LAMBDA_MAX {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                let d = jtj[(i, i)].max(1e-300);
                a[(i, i)] += lambda * d;
            }
            let step = match a.clone().cholesky() {
                Some(ch) => ch.solve(&(-&grad)),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let candidate = &x + &step;
            match eval(&candidate) {
                Ok((r_new, j_new)) if r_new.iter().all(|v| v.is_finite()) => {
                    let obj_new = r_new.norm_squared();
                    if obj_new < obj {
                        let rel = (obj - obj_new) / obj.max(f64::MIN_POSITIVE);
                        x = candidate;
                        r = r_new;
                        jac = j_new;
                        obj = obj_new;
                        grad = jac.tr_mul(&r);
                        trace.push(obj);
                        lambda = (lambda / 3.0).max(LAMBDA_MIN);
                        accepted = true;
                        if rel < options.relative_tolerance {
                            converged = true;
                        }
                        break;
                    }
                    lambda *= 4.0;
                }
                _ => lambda *= 4.0,
            }
        }
        if !accepted {
            // No descent direction left at working precision.
            converged = grad.amax() < options.gradient_tolerance;
            break;
        }
        if converged {
            break;
        }
    }
    if !converged && grad.amax() < options.gradient_tolerance {
        converged = true;
    }
    Ok(NlsReport {
        gradient_norm: grad.amax(),
        x,
        objective: obj,
        iterations,
        converged,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_rosenbrock_as_least_squares() {
        let report = minimize(
            DVector::from_vec(vec![-1.2, 1.0]),
            |x| {
                let r = DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]);
                let j = DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0]);
                Ok((r, j))
            },
            NlsOptions {
                max_iterations: 200,
                gradient_tolerance: 1e-12,
                relative_tolerance: 0.0,
            },
        )
        .unwrap();
        assert!(report.converged);
        assert!((report.x[0] - 1.0).abs() < 1e-8);
        assert!((report.x[1] - 1.0).abs() < 1e-8);
        assert!(report.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn overdetermined_linear_matches_normal_equations() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 2.5, 4.5]);
        let report = minimize(
            DVector::zeros(2),
            |x| Ok((&a * x - &b, a.clone())),
            NlsOptions {
                max_iterations: 50,
                gradient_tolerance: 1e-12,
                relative_tolerance: 0.0,
            },
        )
        .unwrap();
        let exact = (a.transpose() * &a).cholesky().unwrap().solve(&(a.transpose() * &b));
        assert!((report.x - exact).amax() < 1e-9);
    }
}
