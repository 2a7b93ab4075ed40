//! Inference for the effect ratio in matched instrumental-variable designs.
//!
//! Everything is built on the per-set statistic
//! `A_i(theta) = sum_j Z/p (Y - theta D) - sum_j (1 - Z)/(1 - p) (Y - theta D)`,
//! which is affine in `theta`. The test `A^2 <= z^2 V^2` therefore inverts to
//! a quadratic inequality with a closed-form solution set.

use serde::ser::{Serialize, SerializeStruct, Serializer};

use crate::design::MatchedDataset;
use crate::error::{Error, Result};
use crate::numeric::{normal_quantile, pairwise_sum};
use crate::probability::{AssignmentProbs, ProbSource};

#[derive(Debug, Clone, PartialEq)]
pub struct ArStatistic {
    pub per_set: Vec<f64>,
    pub value: f64,
}

fn doses(ds: &MatchedDataset) -> Result<Vec<f64>> {
    ds.column(|u| u.d).ok_or(Error::MissingField("d"))
}

/// Per-set weighted contrasts of an arbitrary unit-level response.
fn contrasts(ds: &MatchedDataset, p: &[f64], r: &[f64]) -> Vec<f64> {
    ds.sets()
        .iter()
        .map(|s| {
            s.units
                .iter()
                .map(|&j| {
                    if ds.units()[j].z {
                        r[j] / p[j]
                    } else {
                        -r[j] / (1.0 - p[j])
                    }
                })
                .sum()
        })
        .collect()
}

fn check(ds: &MatchedDataset, p: &AssignmentProbs) -> Result<Vec<f64>> {
    ds.require_supported()?;
    let d = doses(ds)?;
    if p.values().len() != ds.n_units() {
        return Err(Error::Domain(format!(
            "{} probabilities for {} units",
            p.values().len(),
            ds.n_units()
        )));
    }
    Ok(d)
}

/// `A(theta0)` and its per-set terms.
pub fn ar_statistic(ds: &MatchedDataset, p: &AssignmentProbs, theta0: f64) -> Result<ArStatistic> {
    let d = check(ds, p)?;
    let r: Vec<f64> = ds.units().iter().zip(&d).map(|(u, d)| u.y - theta0 * d).collect();
    let per_set = contrasts(ds, p.values(), &r);
    let value = pairwise_sum(&per_set) / per_set.len() as f64;
    Ok(ArStatistic { per_set, value })
}

/// `V^2 = sum (A_i - A)^2 / (I (I - 1))`.
pub fn ar_variance(per_set: &[f64]) -> Result<f64> {
    let i = per_set.len();
    if i < 2 {
        return Err(Error::Domain(format!("variance needs at least 2 sets, got {i}")));
    }
    let mean = pairwise_sum(per_set) / i as f64;
    let sq: Vec<f64> = per_set.iter().map(|a| (a - mean) * (a - mean)).collect();
    Ok(pairwise_sum(&sq) / (i * (i - 1)) as f64)
}

fn ratio(num: &[f64], den: &[f64]) -> Result<f64> {
    let d = pairwise_sum(den);
    let scale: f64 = den.iter().map(|v| v.abs()).sum();
    if d == 0.0 || d.abs() <= 1e-13 * scale {
        return Err(Error::WeakInstrument);
    }
    Ok(pairwise_sum(num) / d)
}

/// Root of `A(theta) = 0`.
pub fn bc_wald(ds: &MatchedDataset, p: &AssignmentProbs) -> Result<f64> {
    let d = check(ds, p)?;
    let pv = p.values();
    let mut num = Vec::with_capacity(ds.n_units());
    let mut den = Vec::with_capacity(ds.n_units());
    for (j, u) in ds.units().iter().enumerate() {
        let w = (u.zf() - pv[j]) / (pv[j] * (1.0 - pv[j]));
        num.push(u.y * w);
        den.push(d[j] * w);
    }
    ratio(&num, &den)
}

/// Post-matching Wald estimator from within-set observed means.
pub fn classical_wald(ds: &MatchedDataset) -> Result<f64> {
    ds.require_supported()?;
    let d = doses(ds)?;
    let mut num = Vec::with_capacity(ds.n_sets());
    let mut den = Vec::with_capacity(ds.n_sets());
    for s in ds.sets() {
        let n = s.size() as f64;
        let m = s.treated as f64;
        let zbar = m / n;
        let ybar = s.units.iter().map(|&j| ds.units()[j].y).sum::<f64>() / n;
        let dbar = s.units.iter().map(|&j| d[j]).sum::<f64>() / n;
        let (mut sy, mut sd) = (0.0, 0.0);
        for &j in &s.units {
            let dz = ds.units()[j].zf() - zbar;
            sy += dz * (ds.units()[j].y - ybar);
            sd += dz * (d[j] - dbar);
        }
        let k = n * n / (m * (n - m));
        num.push(k * sy);
        den.push(k * sd);
    }
    ratio(&num, &den)
}

/// Solution set of the inverted test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConfidenceSet {
    Interval { lower: f64, upper: f64 },
    /// `(-inf, lower] U [upper, inf)`.
    Complement { lower: f64, upper: f64 },
    /// `(-inf, upper]`.
    RayBelow { upper: f64 },
    /// `[lower, inf)`.
    RayAbove { lower: f64 },
    WholeLine,
    Empty,
}

impl ConfidenceSet {
    pub fn contains(&self, theta: f64) -> bool {
        match *self {
            ConfidenceSet::Interval { lower, upper } => lower <= theta && theta <= upper,
            ConfidenceSet::Complement { lower, upper } => theta <= lower || theta >= upper,
            ConfidenceSet::RayBelow { upper } => theta <= upper,
            ConfidenceSet::RayAbove { lower } => theta >= lower,
            ConfidenceSet::WholeLine => true,
            ConfidenceSet::Empty => false,
        }
    }

    pub fn shape(&self) -> &'static str {
        match self {
            ConfidenceSet::Interval { .. } => "interval",
            ConfidenceSet::Complement { .. } => "complement",
            ConfidenceSet::RayBelow { .. } => "ray_below",
            ConfidenceSet::RayAbove { .. } => "ray_above",
            ConfidenceSet::WholeLine => "whole_line",
            ConfidenceSet::Empty => "empty",
        }
    }

    pub fn endpoints(&self) -> Vec<f64> {
        match *self {
            ConfidenceSet::Interval { lower, upper } | ConfidenceSet::Complement { lower, upper } => {
                vec![lower, upper]
            }
            ConfidenceSet::RayBelow { upper } => vec![upper],
            ConfidenceSet::RayAbove { lower } => vec![lower],
            ConfidenceSet::WholeLine | ConfidenceSet::Empty => vec![],
        }
    }

    /// Length of a bounded interval; `None` for every other shape.
    pub fn length(&self) -> Option<f64> {
        match *self {
            ConfidenceSet::Interval { lower, upper } => Some(upper - lower),
            _ => None,
        }
    }
}

impl Serialize for ConfidenceSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = serializer.serialize_struct("ConfidenceSet", 2)?;
        st.serialize_field("shape", self.shape())?;
        st.serialize_field("endpoints", &self.endpoints())?;
        st.end()
    }
}

/// Coefficients of `a theta^2 + b theta + c <= 0`, the acceptance region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadratic {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Quadratic {
    pub fn eval(&self, theta: f64) -> f64 {
        (self.a * theta + self.b) * theta + self.c
    }
}

/// Per-set contrasts of `Y` and of `D`, so that `A_i(theta) = y_i - theta d_i`.
pub fn split_statistic(ds: &MatchedDataset, p: &AssignmentProbs) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = check(ds, p)?;
    let y: Vec<f64> = ds.units().iter().map(|u| u.y).collect();
    Ok((contrasts(ds, p.values(), &y), contrasts(ds, p.values(), &d)))
}

pub fn acceptance_quadratic(ys: &[f64], ds_: &[f64], alpha: f64) -> Result<Quadratic> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::Domain(format!("alpha {alpha} must lie in (0, 0.5)")));
    }
    let i = ys.len();
    if i < 2 {
        return Err(Error::Domain(format!("need at least 2 sets, got {i}")));
    }
    let fi = i as f64;
    let (a0, a1) = (pairwise_sum(ys) / fi, pairwise_sum(ds_) / fi);
    let norm = fi * (fi - 1.0);
    let cyy: Vec<f64> = ys.iter().map(|y| (y - a0) * (y - a0)).collect();
    let cyd: Vec<f64> = ys.iter().zip(ds_).map(|(y, d)| (y - a0) * (d - a1)).collect();
    let cdd: Vec<f64> = ds_.iter().map(|d| (d - a1) * (d - a1)).collect();
    let (c00, c01, c11) = (
        pairwise_sum(&cyy) / norm,
        pairwise_sum(&cyd) / norm,
        pairwise_sum(&cdd) / norm,
    );
    let z2 = normal_quantile(1.0 - alpha / 2.0).powi(2);
    Ok(Quadratic {
        a: a1 * a1 - z2 * c11,
        b: -2.0 * (a0 * a1 - z2 * c01),
        c: a0 * a0 - z2 * c00,
    })
}

/// Classifies `{theta : a theta^2 + b theta + c <= 0}`.
pub fn solve_quadratic_set(q: Quadratic) -> ConfidenceSet {
    let Quadratic { a, b, c } = q;
    if a == 0.0 {
        return if b > 0.0 {
            ConfidenceSet::RayBelow { upper: -c / b }
        } else if b < 0.0 {
            ConfidenceSet::RayAbove { lower: -c / b }
        } else if c <= 0.0 {
            ConfidenceSet::WholeLine
        } else {
            ConfidenceSet::Empty
        };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return if a > 0.0 {
            ConfidenceSet::Empty
        } else {
            ConfidenceSet::WholeLine
        };
    }
    // Cancellation-free roots.
    let s = disc.sqrt();
    let h = -0.5 * (b + if b >= 0.0 { s } else { -s });
    let (r1, r2) = if h == 0.0 {
        (0.0, 0.0)
    } else {
        (h / a, c / h)
    };
    let (lower, upper) = (r1.min(r2), r1.max(r2));
    if a > 0.0 {
        ConfidenceSet::Interval { lower, upper }
    } else if disc == 0.0 {
        ConfidenceSet::WholeLine
    } else {
        ConfidenceSet::Complement { lower, upper }
    }
}

/// Closed-form confidence set for the effect ratio.
pub fn effect_ratio_confidence_set(ds: &MatchedDataset, p: &AssignmentProbs, alpha: f64) -> Result<ConfidenceSet> {
    let (ys, dd) = split_statistic(ds, p)?;
    Ok(solve_quadratic_set(acceptance_quadratic(&ys, &dd, alpha)?))
}

/// Membership of `points` equally spaced values in `[lo, hi]`, recomputing
/// `A(theta)` and `V^2(theta)` from scratch at every point.
pub fn grid_scan(
    ds: &MatchedDataset,
    p: &AssignmentProbs,
    alpha: f64,
    range: (f64, f64),
    points: usize,
) -> Result<Vec<(f64, bool)>> {
    if points < 2 || !(range.0 < range.1) {
        return Err(Error::Config(format!("invalid grid {range:?} with {points} points")));
    }
    let z = normal_quantile(1.0 - alpha / 2.0);
    (0..points)
        .map(|k| {
            let theta = range.0 + (range.1 - range.0) * k as f64 / (points - 1) as f64;
            let a = ar_statistic(ds, p, theta)?;
            let v2 = ar_variance(&a.per_set)?;
            Ok((theta, a.value * a.value <= z * z * v2))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IvEstimator {
    /// Uniform probabilities and observed within-set means.
    Classical,
    BiasCorrected,
    BiasCorrectedOracle,
}

impl IvEstimator {
    pub fn as_str(self) -> &'static str {
        match self {
            IvEstimator::Classical => "classical",
            IvEstimator::BiasCorrected => "bias_corrected",
            IvEstimator::BiasCorrectedOracle => "bias_corrected_oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EffectRatioResult {
    /// `None` when the estimating equation has no root.
    pub point_estimate: Option<f64>,
    pub confidence_set: ConfidenceSet,
    pub alpha: f64,
    pub estimator: IvEstimator,
    pub prob_source: ProbSource,
    /// Set when the estimate is undefined or the confidence set is unbounded.
    pub weak_iv_flag: bool,
    pub n_sets: usize,
    pub n_units: usize,
}

/// Point estimate and confidence set. The classical estimator ignores `p`
/// and uses `m_i / n_i`.
pub fn analyze_iv(
    ds: &MatchedDataset,
    p: &AssignmentProbs,
    alpha: f64,
    estimator: IvEstimator,
) -> Result<EffectRatioResult> {
    let uniform;
    let probs = if estimator == IvEstimator::Classical {
        uniform = AssignmentProbs::uniform(ds);
        &uniform
    } else {
        p
    };
    let point = match estimator {
        IvEstimator::Classical => classical_wald(ds),
        _ => bc_wald(ds, probs),
    };
    let point_estimate = match point {
        Ok(v) => Some(v),
        Err(Error::WeakInstrument) => None,
        Err(e) => return Err(e),
    };
    let confidence_set = effect_ratio_confidence_set(ds, probs, alpha)?;
    let bounded = matches!(confidence_set, ConfidenceSet::Interval { .. } | ConfidenceSet::Empty);
    Ok(EffectRatioResult {
        point_estimate,
        confidence_set,
        alpha,
        estimator,
        prob_source: probs.source(),
        weak_iv_flag: point_estimate.is_none() || !bounded,
        n_sets: ds.n_sets(),
        n_units: ds.n_units(),
    })
}
