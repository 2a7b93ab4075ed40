use nalgebra::{DMatrix, DVector};

use super::PropensityModelSpec;
use crate::error::{Error, Result};
use crate::numeric::expit;

/// Outcome of an IRLS logistic fit with intercept.
#[derive(Debug, Clone)]
pub struct LogisticFit {
    /// Intercept first, then one coefficient per covariate.
    pub coefficients: Vec<f64>,
    pub fitted: Vec<f64>,
    /// Objective after every accepted iteration, starting from the initial point.
    pub deviance_path: Vec<f64>,
    pub iterations: usize,
    /// Ridge penalty actually applied (0 for the plain MLE).
    pub ridge: f64,
}

// Beyond this coefficient size the likelihood is flat in some direction
// (quasi-separation) and the unpenalised fit is abandoned.
const DIVERGENCE_NORM: f64 = 30.0;
// Probabilities are kept this far from 0 and 1.
const PROB_FLOOR: f64 = 1e-12;

fn design(x: &[Vec<f64>]) -> DMatrix<f64> {
    let n = x.len();
    let k = x.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, k + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] })
}

fn objective(xm: &DMatrix<f64>, z: &DVector<f64>, beta: &DVector<f64>, ridge: f64) -> (f64, DVector<f64>) {
    let eta = xm * beta;
    let mu = eta.map(|v| expit(v).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR));
    let mut dev = 0.0;
    for i in 0..z.len() {
        dev -= 2.0 * (z[i] * mu[i].ln() + (1.0 - z[i]) * (1.0 - mu[i]).ln());
    }
    let penalty: f64 = beta.iter().skip(1).map(|b| b * b).sum();
    (dev + ridge * penalty, mu)
}

enum Attempt {
    Converged(LogisticFit),
    Diverged,
    Stalled { iterations: usize, deviance: f64 },
}

fn irls(xm: &DMatrix<f64>, z: &DVector<f64>, ridge: f64, max_iter: usize) -> Attempt {
    let p = xm.ncols();
    let mean = z.mean().clamp(1e-6, 1.0 - 1e-6);
    let mut beta = DVector::zeros(p);
    beta[0] = (mean / (1.0 - mean)).ln();
    let (mut dev, mut mu) = objective(xm, z, &beta, ridge);
    let mut path = vec![dev];
    for iter in 1..=max_iter {
        let w = mu.map(|m| m * (1.0 - m));
        // Gradient of the (halved) penalised deviance and its Hessian.
        let mut grad = xm.transpose() * (z - &mu);
        let mut hess = xm.transpose() * DMatrix::from_diagonal(&w) * xm;
        for j in 1..p {
            grad[j] -= ridge * beta[j];
            hess[(j, j)] += ridge;
        }
        let Some(chol) = hess.clone().cholesky() else {
            return Attempt::Diverged;
        };
        let step = chol.solve(&grad);
        // Newton decrement: the predicted objective reduction is tiny.
        if grad.dot(&step) < 1e-16 * (dev.abs() + 1.0) {
            return Attempt::Converged(LogisticFit {
                coefficients: beta.iter().copied().collect(),
                fitted: mu.iter().copied().collect(),
                deviance_path: path,
                iterations: iter - 1,
                ridge,
            });
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = &beta + &step * t;
            let (d, m) = objective(xm, z, &cand, ridge);
            if d <= dev {
                accepted = Some((cand, d, m));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, d, m)) = accepted else {
            return Attempt::Stalled { iterations: iter, deviance: dev };
        };
        beta = cand;
        dev = d;
        mu = m;
        path.push(dev);
        if ridge == 0.0 && beta.amax() > DIVERGENCE_NORM {
            return Attempt::Diverged;
        }
    }
    Attempt::Stalled {
        iterations: max_iter,
        deviance: dev,
    }
}

/// Maximum-likelihood logistic regression by iteratively reweighted least
/// squares with step halving. If the unpenalised problem is singular or
/// separated, the fit is redone with ridge penalty `spec.ridge` on the slopes.
pub fn fit_logistic(x: &[Vec<f64>], z: &[bool], spec: &PropensityModelSpec) -> Result<LogisticFit> {
    let n = x.len();
    let k = x.first().map_or(0, Vec::len);
    if n != z.len() {
        return Err(Error::Domain(format!("{n} covariate rows for {} labels", z.len())));
    }
    if n <= k + 1 {
        return Err(Error::Domain(format!("logistic fit needs N > K + 1, got N = {n}, K = {k}")));
    }
    if x.iter().any(|r| r.len() != k || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::Domain("covariates must be finite and rectangular".into()));
    }
    let xm = design(x);
    let zv = DVector::from_iterator(n, z.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    match irls(&xm, &zv, 0.0, spec.irls_max_iter) {
        Attempt::Converged(fit) => Ok(fit),
        Attempt::Diverged | Attempt::Stalled { .. } => match irls(&xm, &zv, spec.ridge, spec.irls_max_iter) {
            Attempt::Converged(fit) => Ok(fit),
            Attempt::Stalled { iterations, deviance } => Err(Error::NonConvergence { iterations, deviance }),
            Attempt::Diverged => Err(Error::NonConvergence {
                iterations: spec.irls_max_iter,
                deviance: f64::NAN,
            }),
        },
    }
}
