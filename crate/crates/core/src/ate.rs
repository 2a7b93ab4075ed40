//! Estimators, variance estimators and confidence intervals for the sample
//! average treatment effect in a matched design.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::design::{set_weights, MatchedDataset};
use crate::error::{Error, Result};
use crate::numeric::{normal_quantile, pairwise_sum};
use crate::probability::{AssignmentProbs, ProbSource};

/// Per-set estimates and their `n_i / N` weighted aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct SetEstimates {
    pub per_set: Vec<f64>,
    pub estimate: f64,
}

fn aggregate(ds: &MatchedDataset, per_set: Vec<f64>) -> SetEstimates {
    let n = ds.n_units() as f64;
    let terms: Vec<f64> = ds
        .sets()
        .iter()
        .zip(&per_set)
        .map(|(s, v)| s.size() as f64 / n * v)
        .collect();
    SetEstimates {
        estimate: pairwise_sum(&terms),
        per_set,
    }
}

/// Within-set treated-minus-control mean differences.
pub fn diff_in_means(ds: &MatchedDataset) -> Result<SetEstimates> {
    ds.require_supported()?;
    let per_set = ds
        .sets()
        .iter()
        .map(|s| {
            let (mut t, mut c) = (0.0, 0.0);
            for &j in &s.units {
                let u = &ds.units()[j];
                if u.z {
                    t += u.y;
                } else {
                    c += u.y;
                }
            }
            t / s.treated as f64 - c / s.controls() as f64
        })
        .collect();
    Ok(aggregate(ds, per_set))
}

/// Inverse post-matching probability weighted estimator.
pub fn ippw_estimate(ds: &MatchedDataset, p: &AssignmentProbs) -> Result<SetEstimates> {
    ds.require_supported()?;
    let p = p.values();
    if p.len() != ds.n_units() {
        return Err(Error::Domain(format!("{} probabilities for {} units", p.len(), ds.n_units())));
    }
    let per_set = ds
        .sets()
        .iter()
        .map(|s| {
            let sum: f64 = s
                .units
                .iter()
                .map(|&j| {
                    let u = &ds.units()[j];
                    if u.z {
                        u.y / p[j]
                    } else {
                        -u.y / (1.0 - p[j])
                    }
                })
                .sum();
            sum / s.size() as f64
        })
        .collect();
    Ok(aggregate(ds, per_set))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QKind {
    /// A single all-ones column.
    #[default]
    Unit,
    /// Intercept and the set weights `w_i`.
    InterceptWeights,
    /// Intercept and within-set covariate means.
    InterceptCovmeans,
}

impl QKind {
    pub fn as_str(self) -> &'static str {
        match self {
            QKind::Unit => "unit",
            QKind::InterceptWeights => "weights",
            QKind::InterceptCovmeans => "covmeans",
        }
    }
}

impl std::str::FromStr for QKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(QKind::Unit),
            "weights" | "intercept_weights" => Ok(QKind::InterceptWeights),
            "covmeans" | "intercept_covmeans" => Ok(QKind::InterceptCovmeans),
            other => Err(Error::Config(format!("unknown Q specification `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DesignMatrixSpec {
    pub kind: QKind,
    /// Covariate indices used by `InterceptCovmeans`; all when `None`.
    pub covariates: Option<Vec<usize>>,
}

impl DesignMatrixSpec {
    pub fn new(kind: QKind) -> Self {
        Self { kind, covariates: None }
    }
}

/// The I x L matrix `Q` with an orthonormal basis of its column space.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub q: DMatrix<f64>,
    pub column_names: Vec<String>,
    basis: DMatrix<f64>,
}

impl DesignMatrix {
    /// Diagonal of the hat matrix `Q (Q'Q)^-1 Q'`.
    pub fn leverages(&self) -> Vec<f64> {
        self.basis.row_iter().map(|r| r.norm_squared()).collect()
    }

    /// Orthonormal basis of the column space (I x L).
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }
}

// Relative residual norm below which a column counts as linearly dependent.
const RANK_TOL: f64 = 1e-10;

/// Builds `Q` and orthonormalises it by modified Gram-Schmidt with one
/// reorthogonalisation pass. Dependent columns are reported by name.
pub fn build_design_matrix(ds: &MatchedDataset, spec: &DesignMatrixSpec) -> Result<DesignMatrix> {
    let i = ds.n_sets();
    let mut cols: Vec<(String, Vec<f64>)> = vec![("intercept".into(), vec![1.0; i])];
    match spec.kind {
        QKind::Unit => {}
        QKind::InterceptWeights => cols.push(("w".into(), set_weights(ds))),
        QKind::InterceptCovmeans => {
            let k = ds.n_covariates();
            let chosen: Vec<usize> = spec.covariates.clone().unwrap_or_else(|| (0..k).collect());
            if let Some(&bad) = chosen.iter().find(|&&c| c >= k) {
                return Err(Error::Config(format!("covariate index {bad} out of range (K = {k})")));
            }
            for c in chosen {
                let means = ds
                    .sets()
                    .iter()
                    .map(|s| s.units.iter().map(|&j| ds.units()[j].x[c]).sum::<f64>() / s.size() as f64)
                    .collect();
                cols.push((format!("mean_{}", ds.covariate_names()[c]), means));
            }
        }
    }
    let l = cols.len();
    if l >= i {
        return Err(Error::TooManyColumns { sets: i, columns: l });
    }

    let q = DMatrix::from_fn(i, l, |r, c| cols[c].1[r]);
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(l);
    let mut dependent = Vec::new();
    for (name, col) in &cols {
        let original = DVector::from_column_slice(col);
        let mut v = original.clone();
        for _ in 0..2 {
            for b in &basis {
                let proj = b.dot(&v);
                v.axpy(-proj, b, 1.0);
            }
        }
        let norm = v.norm();
        if !(norm > RANK_TOL * original.norm().max(f64::MIN_POSITIVE)) {
            dependent.push(name.clone());
        } else {
            basis.push(v / norm);
        }
    }
    if !dependent.is_empty() {
        return Err(Error::RankDeficient(dependent));
    }
    Ok(DesignMatrix {
        q,
        column_names: cols.into_iter().map(|(n, _)| n).collect(),
        basis: DMatrix::from_columns(&basis),
    })
}

/// Largest admissible leverage.
pub const LEVERAGE_LIMIT: f64 = 1.0 - 1e-10;

/// `S^2(Q) = I^-2 y W (I - H_Q) W y'` with `y_i = tau_i / sqrt(1 - h_ii)` and
/// `W = diag(I n_i / N)`.
pub fn variance_estimator(per_set: &[f64], ds: &MatchedDataset, q: &DesignMatrix) -> Result<f64> {
    let i = ds.n_sets();
    if per_set.len() != i || q.basis.nrows() != i {
        return Err(Error::Domain(format!(
            "{} per-set estimates and {} design rows for {i} sets",
            per_set.len(),
            q.basis.nrows()
        )));
    }
    let h = q.leverages();
    if let Some((index, &leverage)) = h.iter().enumerate().find(|(_, &v)| !(v < LEVERAGE_LIMIT)) {
        return Err(Error::Leverage { index, leverage });
    }
    let w = set_weights(ds);
    let wy = DVector::from_iterator(i, (0..i).map(|k| w[k] * per_set[k] / (1.0 - h[k]).sqrt()));
    let proj = q.basis.transpose() * &wy;
    let sq: Vec<f64> = wy.iter().map(|v| v * v).collect();
    let s2 = (pairwise_sum(&sq) - proj.norm_squared()) / (i * i) as f64;
    Ok(s2.max(0.0))
}

/// `estimate -/+ z_{1 - alpha/2} sqrt(s2)`.
pub fn confidence_interval(estimate: f64, s2: f64, alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::Domain(format!("alpha {alpha} must lie in (0, 0.5)")));
    }
    if !(s2 >= 0.0) {
        return Err(Error::Domain(format!("variance {s2} must be non-negative")));
    }
    let half = normal_quantile(1.0 - alpha / 2.0) * s2.sqrt();
    Ok((estimate - half, estimate + half))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    DiffInMeans,
    Ippw,
    IppwOracle,
    Fpw,
}

impl Estimator {
    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::DiffInMeans => "diff_in_means",
            Estimator::Ippw => "ippw",
            Estimator::IppwOracle => "ippw_oracle",
            Estimator::Fpw => "fpw",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AteResult {
    pub estimate: f64,
    pub variance: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub alpha: f64,
    pub estimator: Estimator,
    /// `None` for the unmatched weighting estimator.
    pub q_spec: Option<QKind>,
    pub prob_source: Option<ProbSource>,
    pub n_sets: Option<usize>,
    pub n_units: usize,
}

impl AteResult {
    pub fn covers(&self, value: f64) -> bool {
        self.ci_lower <= value && value <= self.ci_upper
    }

    pub fn ci_length(&self) -> f64 {
        self.ci_upper - self.ci_lower
    }
}

/// Full matched-design analysis: IPPW with the given probabilities (uniform
/// probabilities give the difference in means), `S^2(Q)` and the CI.
pub fn analyze_ate(
    ds: &MatchedDataset,
    p: &AssignmentProbs,
    q: &DesignMatrixSpec,
    alpha: f64,
    estimator: Estimator,
) -> Result<AteResult> {
    let est = match estimator {
        Estimator::DiffInMeans => diff_in_means(ds)?,
        Estimator::Ippw | Estimator::IppwOracle => ippw_estimate(ds, p)?,
        Estimator::Fpw => return Err(Error::Config("fpw runs on unmatched data".into())),
    };
    let dm = build_design_matrix(ds, q)?;
    let variance = variance_estimator(&est.per_set, ds, &dm)?;
    let (ci_lower, ci_upper) = confidence_interval(est.estimate, variance, alpha)?;
    Ok(AteResult {
        estimate: est.estimate,
        variance,
        ci_lower,
        ci_upper,
        alpha,
        estimator,
        q_spec: Some(q.kind),
        prob_source: Some(if estimator == Estimator::DiffInMeans {
            ProbSource::Uniform
        } else {
            p.source()
        }),
        n_sets: Some(ds.n_sets()),
        n_units: ds.n_units(),
    })
}

/// Finite-population weighting on unmatched data with (clamped) propensities.
/// The variance is `N^-2 sum (psi_n - estimate)^2`.
pub fn fpw_estimate(z: &[bool], y: &[f64], e: &[f64], alpha: f64) -> Result<AteResult> {
    let n = z.len();
    if n == 0 || y.len() != n || e.len() != n {
        return Err(Error::Domain("fpw needs equal-length, non-empty z, y and e".into()));
    }
    if let Some(v) = e.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(Error::Domain(format!("propensity {v} is outside (0, 1)")));
    }
    let psi: Vec<f64> = (0..n)
        .map(|k| if z[k] { y[k] / e[k] } else { -y[k] / (1.0 - e[k]) })
        .collect();
    let nf = n as f64;
    let estimate = pairwise_sum(&psi) / nf;
    let sq: Vec<f64> = psi.iter().map(|v| (v - estimate) * (v - estimate)).collect();
    let variance = pairwise_sum(&sq) / (nf * nf);
    let (ci_lower, ci_upper) = confidence_interval(estimate, variance, alpha)?;
    Ok(AteResult {
        estimate,
        variance,
        ci_lower,
        ci_upper,
        alpha,
        estimator: Estimator::Fpw,
        q_spec: None,
        prob_source: None,
        n_sets: None,
        n_units: n,
    })
}
