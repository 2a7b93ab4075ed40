//! Post-matching treatment-assignment probabilities.
//!
//! Given unit propensities `e_j` inside a matched set, the probability that
//! unit `j` is (one of) the treated, conditional on the set's treated count,
//! follows from independent Bernoulli(`e_j`) assignment renormalised over the
//! assignments with the observed count. Closed forms exist for the two set
//! shapes a full matching produces: one treated unit, or one control unit.

use serde::Serialize;

use crate::design::MatchedDataset;
use crate::error::{Error, Result};

/// Where a probability vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbSource {
    /// Computed from true propensities.
    Oracle,
    /// Computed from estimated propensities, or imported from a file.
    Plugin,
    /// `m_i / n_i`, the exact-matching assumption.
    Uniform,
    /// Output of [`regularize_probs`].
    Regularized,
}

impl ProbSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbSource::Oracle => "oracle",
            ProbSource::Plugin => "plugin",
            ProbSource::Uniform => "uniform",
            ProbSource::Regularized => "regularized",
        }
    }
}

/// Per-unit probabilities aligned with [`MatchedDataset::units`].
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentProbs {
    p: Vec<f64>,
    source: ProbSource,
}

impl AssignmentProbs {
    /// Validates that every `p` lies in (0, 1) and each set sums to its
    /// treated count within 1e-10.
    pub fn new(ds: &MatchedDataset, p: Vec<f64>, source: ProbSource) -> Result<Self> {
        if p.len() != ds.n_units() {
            return Err(Error::Domain(format!(
                "{} probabilities for {} units",
                p.len(),
                ds.n_units()
            )));
        }
        if let Some((j, v)) = p.iter().enumerate().find(|(_, v)| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::Domain(format!("probability {v} for unit {j} is outside (0, 1)")));
        }
        for s in ds.sets() {
            let total: f64 = s.units.iter().map(|&j| p[j]).sum();
            if (total - s.treated as f64).abs() > 1e-10 * s.size() as f64 {
                return Err(Error::Domain(format!(
                    "probabilities in set `{}` sum to {total}, expected {}",
                    s.id, s.treated
                )));
            }
        }
        Ok(Self { p, source })
    }

    /// `m_i / n_i` for every unit.
    pub fn uniform(ds: &MatchedDataset) -> Self {
        let mut p = vec![0.0; ds.n_units()];
        for s in ds.sets() {
            let v = s.treated as f64 / s.size() as f64;
            for &j in &s.units {
                p[j] = v;
            }
        }
        Self {
            p,
            source: ProbSource::Uniform,
        }
    }

    /// Reads the `p_hat` column of the dataset.
    pub fn from_p_hat(ds: &MatchedDataset) -> Result<Self> {
        let p = ds.column(|u| u.p_hat).ok_or(Error::MissingField("p_hat"))?;
        Self::new(ds, p, ProbSource::Plugin)
    }

    pub fn values(&self) -> &[f64] {
        &self.p
    }

    pub fn source(&self) -> ProbSource {
        self.source
    }

    pub fn with_source(mut self, source: ProbSource) -> Self {
        self.source = source;
        self
    }
}

fn check_propensities(e: &[f64]) -> Result<()> {
    if e.len() < 2 {
        return Err(Error::Domain(format!("set of size {} needs at least 2 units", e.len())));
    }
    match e.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        Some(v) => Err(Error::Domain(format!("propensity {v} is outside (0, 1)"))),
        None => Ok(()),
    }
}

/// Normalises `weight_j = a_j * prod_{k != j} b_k` over `j`.
///
/// Small sets use the products directly. From four units on, the ratio is
/// rewritten as a softmax of `ln a_j - ln b_j`, which cannot underflow.
fn leave_one_out_shares(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len();
    if n < 4 {
        let w: Vec<f64> = (0..n)
            .map(|j| {
                (0..n)
                    .filter(|&k| k != j)
                    .fold(a[j], |acc, k| acc * b[k])
            })
            .collect();
        let total: f64 = w.iter().sum();
        return w.into_iter().map(|v| v / total).collect();
    }
    let log_odds: Vec<f64> = a.iter().zip(b).map(|(x, y)| x.ln() - y.ln()).collect();
    let max = log_odds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_odds.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Keeps a probability inside (0, 1) when extreme scores make the exact value
/// round to an endpoint.
fn open_unit(p: f64) -> f64 {
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Probabilities for a set with one treated unit; they sum to 1.
pub fn probs_one_treated(e: &[f64]) -> Result<Vec<f64>> {
    check_propensities(e)?;
    let not_e: Vec<f64> = e.iter().map(|v| 1.0 - v).collect();
    Ok(leave_one_out_shares(e, &not_e).into_iter().map(open_unit).collect())
}

/// Probabilities for a set with one control unit; they sum to `n - 1`.
pub fn probs_one_control(e: &[f64]) -> Result<Vec<f64>> {
    check_propensities(e)?;
    let not_e: Vec<f64> = e.iter().map(|v| 1.0 - v).collect();
    Ok(leave_one_out_shares(&not_e, e)
        .into_iter()
        .map(|q| open_unit(1.0 - q))
        .collect())
}

/// Post-matching probabilities for every unit of a dataset from the aligned
/// propensity vector `e`. Sets with one treated unit (pairs included) use the
/// one-treated form, sets with one control the one-control form.
pub fn post_match_probs(ds: &MatchedDataset, e: &[f64], source: ProbSource) -> Result<AssignmentProbs> {
    if e.len() != ds.n_units() {
        return Err(Error::Domain(format!(
            "{} propensities for {} units",
            e.len(),
            ds.n_units()
        )));
    }
    ds.require_supported()?;
    let mut p = vec![0.0; ds.n_units()];
    for s in ds.sets() {
        let es: Vec<f64> = s.units.iter().map(|&j| e[j]).collect();
        let ps = if s.treated == 1 {
            probs_one_treated(&es)?
        } else {
            probs_one_control(&es)?
        };
        for (&j, v) in s.units.iter().zip(ps) {
            p[j] = v;
        }
    }
    AssignmentProbs::new(ds, p, source)
}

/// Exact distribution of a set's assignment vector.
#[derive(Debug, Clone)]
pub struct SetAssignmentDistribution {
    /// Every 0/1 vector of length n with exactly m ones.
    pub assignments: Vec<Vec<bool>>,
    pub probs: Vec<f64>,
}

impl SetAssignmentDistribution {
    /// `P(Z_j = 1)` for each unit.
    pub fn marginals(&self) -> Vec<f64> {
        let n = self.assignments.first().map_or(0, Vec::len);
        let mut out = vec![0.0; n];
        for (a, &pr) in self.assignments.iter().zip(&self.probs) {
            for (o, &z) in out.iter_mut().zip(a) {
                if z {
                    *o += pr;
                }
            }
        }
        out
    }
}

pub const ENUMERATION_LIMIT: usize = 20;

/// Brute-force distribution: each assignment `z` with `sum z = m` gets weight
/// `prod e_j^z_j (1 - e_j)^(1 - z_j)`, renormalised.
pub fn enumerate_assignment_dist(e: &[f64], m: usize) -> Result<SetAssignmentDistribution> {
    let n = e.len();
    if n > ENUMERATION_LIMIT {
        return Err(Error::TooLarge {
            size: n,
            limit: ENUMERATION_LIMIT,
        });
    }
    if m > n {
        return Err(Error::Domain(format!("{m} treated in a set of {n}")));
    }
    let mut assignments = Vec::new();
    let mut weights = Vec::new();
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize != m {
            continue;
        }
        let z: Vec<bool> = (0..n).map(|j| mask & (1 << j) != 0).collect();
        let w = z
            .iter()
            .zip(e)
            .fold(1.0, |acc, (&zj, &ej)| acc * if zj { ej } else { 1.0 - ej });
        assignments.push(z);
        weights.push(w);
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Domain("all assignments have zero probability".into()));
    }
    Ok(SetAssignmentDistribution {
        assignments,
        probs: weights.into_iter().map(|w| w / total).collect(),
    })
}

/// Replaces a whole set's probabilities with `m_i / n_i` when any of them is
/// within `gamma` of 0 or 1.
pub fn regularize_probs(p: &AssignmentProbs, ds: &MatchedDataset, gamma: f64) -> Result<AssignmentProbs> {
    if !(gamma > 0.0 && gamma < 0.5) {
        return Err(Error::Domain(format!("gamma {gamma} must lie in (0, 0.5)")));
    }
    let mut out = p.p.clone();
    for s in ds.sets() {
        let (lo, hi) = s
            .units
            .iter()
            .map(|&j| p.p[j])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if lo <= gamma || hi >= 1.0 - gamma {
            let v = s.treated as f64 / s.size() as f64;
            for &j in &s.units {
                out[j] = v;
            }
        }
    }
    Ok(AssignmentProbs {
        p: out,
        source: ProbSource::Regularized,
    })
}
