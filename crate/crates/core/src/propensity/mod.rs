//! Propensity-score learners used by the plug-in strategy.

mod gbm;
mod logistic;

pub use gbm::{fit_gbm, GbmModel};
pub use logistic::{fit_logistic, LogisticFit};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Learner {
    Logistic,
    Gbm,
    /// Scores supplied by the caller (the `e_hat` column).
    External,
}

impl std::str::FromStr for Learner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(Learner::Logistic),
            "gbm" => Ok(Learner::Gbm),
            "external" => Ok(Learner::External),
            other => Err(Error::Config(format!("unknown learner `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModelSpec {
    pub learner: Learner,
    pub gbm_rounds: usize,
    pub gbm_depth: usize,
    pub gbm_eta: f64,
    /// Minimum hessian mass per leaf.
    pub gbm_min_child_weight: f64,
    /// L2 penalty on leaf values.
    pub gbm_lambda: f64,
    pub irls_max_iter: usize,
    /// Ridge penalty used when the unpenalised IRLS step is singular or diverges.
    pub ridge: f64,
    pub clamp_rho: f64,
}

impl Default for PropensityModelSpec {
    fn default() -> Self {
        Self {
            learner: Learner::Gbm,
            gbm_rounds: 100,
            gbm_depth: 3,
            gbm_eta: 0.1,
            gbm_min_child_weight: 1.0,
            gbm_lambda: 1.0,
            irls_max_iter: 100,
            ridge: 1e-3,
            clamp_rho: 0.1,
        }
    }
}

impl PropensityModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.gbm_rounds == 0 || self.gbm_depth == 0 {
            return Err(Error::Config("gbm rounds and depth must be at least 1".into()));
        }
        if !(self.gbm_eta > 0.0) || !(self.gbm_lambda >= 0.0) || !(self.gbm_min_child_weight >= 0.0) {
            return Err(Error::Config("gbm eta must be positive, lambda and min child weight non-negative".into()));
        }
        if self.irls_max_iter == 0 || !(self.ridge > 0.0) {
            return Err(Error::Config("IRLS iterations and ridge must be positive".into()));
        }
        if !(self.clamp_rho > 0.0 && self.clamp_rho < 0.5) {
            return Err(Error::Config(format!("clamp rho {} must lie in (0, 0.5)", self.clamp_rho)));
        }
        Ok(())
    }

    /// Fits the configured learner on row-major covariates `x` and returns
    /// in-sample probabilities. `External` is an error here: there is nothing to fit.
    /// Fitted scores are truncated to `[SCORE_FLOOR, 1 - SCORE_FLOOR]`.
    pub fn fit(&self, x: &[Vec<f64>], z: &[bool]) -> Result<Vec<f64>> {
        self.validate()?;
        let e = match self.learner {
            Learner::Logistic => fit_logistic(x, z, self)?.fitted,
            Learner::Gbm => fit_gbm(x, z, self)?.predict_all(x),
            Learner::External => return Err(Error::Config("external scores cannot be fitted".into())),
        };
        Ok(clamp_scores(&e, SCORE_FLOOR))
    }
}

/// Scores closer to 0 or 1 than this round to exactly 0 or 1 in a logistic
/// link, where post-matching probabilities are undefined.
pub const SCORE_FLOOR: f64 = 1e-12;

/// Truncates scores to `[rho, 1 - rho]`.
pub fn clamp_scores(e_hat: &[f64], rho: f64) -> Vec<f64> {
    e_hat.iter().map(|&e| e.clamp(rho, 1.0 - rho)).collect()
}
