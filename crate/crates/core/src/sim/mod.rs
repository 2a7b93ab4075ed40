//! Monte-Carlo harness for matched-design inference.

pub mod dgp;
pub mod rng;
mod report;
mod study;

pub use report::{format_sig, summarize, write_replications, SummaryRow};
pub use study::{run_replication, run_study, RepRecord, SimulationReport};

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::matching::MatchSpec;
use crate::propensity::{Learner, PropensityModelSpec};
use dgp::TreatmentModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    Ate,
    Iv,
}

impl Study {
    pub fn as_str(self) -> &'static str {
        match self {
            Study::Ate => "ate",
            Study::Iv => "iv",
        }
    }

    /// Estimators reported by default, in table order.
    pub fn default_estimators(self) -> Vec<String> {
        let names: &[&str] = match self {
            Study::Ate => &["fpw", "dim", "ippw", "ippw_oracle"],
            Study::Iv => &["classical", "bc", "bc_oracle"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

fn known_estimators(study: Study) -> &'static [&'static str] {
    match study {
        Study::Ate => &["fpw", "dim", "ippw", "ippw_oracle"],
        Study::Iv => &["classical", "bc", "bc_oracle"],
    }
}

/// Human-readable row label.
pub fn estimator_label(name: &str) -> &'static str {
    match name {
        "fpw" => "Conventional (without matching)",
        "dim" => "Conventional (post-matching)",
        "ippw" => "IPPW",
        "ippw_oracle" => "Oracle IPPW",
        "classical" => "Classical Wald",
        "bc" => "Bias-corrected Wald",
        "bc_oracle" => "Bias-corrected Wald (oracle)",
        _ => "unknown",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub n: usize,
    pub model: TreatmentModel,
    pub study: Study,
    pub caliper: bool,
    /// Caliper width as a multiple of SD(e_hat). Boosted scores nearly
    /// separate the groups, so narrow calipers keep too few units to pass
    /// the balance gate.
    pub caliper_sd: f64,
    pub reps: usize,
    pub balance_threshold: f64,
    pub seed: u64,
    pub estimators: Vec<String>,
    pub alpha: f64,
    pub gamma: f64,
    pub clamp_rho: f64,
    /// Largest matched set. Smaller than the library default: large sets
    /// widen the post-matching intervals enough to hide matching bias. Raised
    /// per data set to the smallest size that can match every unit.
    pub max_set_size: usize,
    /// Data sets allowed per replication on average; the study aborts once
    /// `max_attempts * reps` draws have been used.
    pub max_attempts: usize,
    /// Regularise oracle probabilities with `gamma` as well; defaults to true
    /// for IV studies and false for ATE studies.
    pub regularize_oracle: bool,
    pub propensity: PropensityModelSpec,
}

impl ScenarioConfig {
    pub fn new(study: Study, model: TreatmentModel) -> Self {
        Self {
            n: 400,
            model,
            study,
            caliper: false,
            caliper_sd: 1.0,
            reps: 1000,
            balance_threshold: 0.2,
            seed: 1,
            estimators: study.default_estimators(),
            alpha: 0.05,
            gamma: 0.1,
            clamp_rho: 0.1,
            max_set_size: 4,
            max_attempts: 100,
            regularize_oracle: study == Study::Iv,
            propensity: PropensityModelSpec {
                learner: Learner::Gbm,
                ..PropensityModelSpec::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n < 20 {
            return bad(format!("N must be at least 20, got {}", self.n));
        }
        if self.reps < 1 {
            return bad("reps must be at least 1".into());
        }
        if self.estimators.is_empty() {
            return bad("estimator list is empty".into());
        }
        let known = known_estimators(self.study);
        if let Some(e) = self.estimators.iter().find(|e| !known.contains(&e.as_str())) {
            return bad(format!(
                "estimator `{e}` is not available for the {} study (choose from {})",
                self.study.as_str(),
                known.join(", ")
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return bad(format!("alpha {} must lie in (0, 0.5)", self.alpha));
        }
        if !(self.gamma > 0.0 && self.gamma < 0.5) {
            return bad(format!("gamma {} must lie in (0, 0.5)", self.gamma));
        }
        if !(self.balance_threshold > 0.0) {
            return bad("balance_threshold must be positive".into());
        }
        if !(self.caliper_sd > 0.0) {
            return bad("caliper_sd must be positive".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1".into());
        }
        if self.reps > u32::MAX as usize || self.attempt_budget() > rng::MAX_ATTEMPT as usize + 1 {
            return bad(format!(
                "max_attempts * reps must not exceed {}",
                rng::MAX_ATTEMPT as u64 + 1
            ));
        }
        if self.propensity.learner == Learner::External {
            return bad("simulations need a fitted learner (logistic or gbm)".into());
        }
        let mut p = self.propensity.clone();
        p.clamp_rho = self.clamp_rho;
        p.validate()?;
        MatchSpec {
            caliper: None,
            max_set_size: self.max_set_size,
        }
        .validate()
    }

    /// Total number of data sets the study may draw.
    pub fn attempt_budget(&self) -> usize {
        self.max_attempts.saturating_mul(self.reps)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        fn on_off(key: &str, v: &str) -> Result<bool> {
            match v {
                "on" | "true" | "yes" | "1" => Ok(true),
                "off" | "false" | "no" | "0" => Ok(false),
                _ => Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
            }
        }
        match key {
            "n" | "N" => self.n = parse(key, value)?,
            "model" => {
                self.model = match value {
                    "1" | "logistic" => TreatmentModel::Logistic,
                    "2" | "selection" => TreatmentModel::Selection,
                    _ => return Err(Error::Config(format!("unknown model `{value}`"))),
                }
            }
            "study" => {
                let study = match value {
                    "ate" => Study::Ate,
                    "iv" => Study::Iv,
                    _ => return Err(Error::Config(format!("unknown study `{value}`"))),
                };
                if study != self.study {
                    self.study = study;
                    self.estimators = study.default_estimators();
                    self.regularize_oracle = study == Study::Iv;
                }
            }
            "caliper" => self.caliper = on_off(key, value)?,
            "caliper_sd" => self.caliper_sd = parse(key, value)?,
            "reps" => self.reps = parse(key, value)?,
            "balance_threshold" => self.balance_threshold = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "estimators" => {
                self.estimators = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "alpha" => self.alpha = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "clamp_rho" => self.clamp_rho = parse(key, value)?,
            "max_set_size" => self.max_set_size = parse(key, value)?,
            "max_attempts" => self.max_attempts = parse(key, value)?,
            "regularize_oracle" => self.regularize_oracle = on_off(key, value)?,
            "learner" => self.propensity.learner = value.parse()?,
            "gbm_rounds" => self.propensity.gbm_rounds = parse(key, value)?,
            "gbm_depth" => self.propensity.gbm_depth = parse(key, value)?,
            "gbm_eta" => self.propensity.gbm_eta = parse(key, value)?,
            "gbm_lambda" => self.propensity.gbm_lambda = parse(key, value)?,
            "gbm_min_child_weight" => self.propensity.gbm_min_child_weight = parse(key, value)?,
            "ridge" => self.propensity.ridge = parse(key, value)?,
            "irls_max_iter" => self.propensity.irls_max_iter = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key = value` text; `#` starts a comment. Keys are applied
    /// in order, so `study` should precede `estimators`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Canonical `key = value` listing of every setting.
    pub fn to_text(&self) -> String {
        let p = &self.propensity;
        let model = match self.model {
            TreatmentModel::Logistic => "1",
            TreatmentModel::Selection => "2",
        };
        let learner = match p.learner {
            Learner::Logistic => "logistic",
            Learner::Gbm => "gbm",
            Learner::External => "external",
        };
        let onoff = |b: bool| if b { "on" } else { "off" };
        [
            ("study", self.study.as_str().to_string()),
            ("model", model.to_string()),
            ("n", self.n.to_string()),
            ("caliper", onoff(self.caliper).to_string()),
            ("caliper_sd", format!("{:?}", self.caliper_sd)),
            ("reps", self.reps.to_string()),
            ("seed", self.seed.to_string()),
            ("estimators", self.estimators.join(",")),
            ("alpha", format!("{:?}", self.alpha)),
            ("gamma", format!("{:?}", self.gamma)),
            ("clamp_rho", format!("{:?}", self.clamp_rho)),
            ("balance_threshold", format!("{:?}", self.balance_threshold)),
            ("max_set_size", self.max_set_size.to_string()),
            ("max_attempts", self.max_attempts.to_string()),
            ("regularize_oracle", onoff(self.regularize_oracle).to_string()),
            ("learner", learner.to_string()),
            ("gbm_rounds", p.gbm_rounds.to_string()),
            ("gbm_depth", p.gbm_depth.to_string()),
            ("gbm_eta", format!("{:?}", p.gbm_eta)),
            ("gbm_lambda", format!("{:?}", p.gbm_lambda)),
            ("gbm_min_child_weight", format!("{:?}", p.gbm_min_child_weight)),
            ("ridge", format!("{:?}", p.ridge)),
            ("irls_max_iter", p.irls_max_iter.to_string()),
        ]
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
    }
}
