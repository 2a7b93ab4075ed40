use rayon::prelude::*;

use super::dgp::{gen_ate_sample, gen_iv_sample, N_COVARIATES};
use super::report::{summarize_records, SummaryRow};
use super::{ScenarioConfig, Study};
use crate::ate::{analyze_ate, fpw_estimate, DesignMatrixSpec, Estimator};
use crate::design::{MatchedDataset, UnitRecord};
use crate::error::{Error, Result};
use crate::iv::{analyze_iv, ConfidenceSet, IvEstimator};
use crate::matching::{apply_balance_gate, full_match, MatchSpec};
use crate::probability::{post_match_probs, regularize_probs, AssignmentProbs, ProbSource};
use crate::propensity::{clamp_scores, SCORE_FLOOR};

/// One estimator's result in one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct RepRecord {
    pub rep: usize,
    pub estimator: String,
    /// Data sets drawn for this replication (1 if the first one passed).
    pub attempts: usize,
    /// Units entering the estimator.
    pub n_units: usize,
    pub truth: f64,
    pub estimate: Option<f64>,
    pub shape: &'static str,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub covered: bool,
    /// Bounded intervals only.
    pub ci_length: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport {
    pub config: ScenarioConfig,
    /// Replication-major, estimators in configured order.
    pub records: Vec<RepRecord>,
    pub gate_rejections: usize,
    pub summary: Vec<SummaryRow>,
}

fn sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

struct Matched {
    ds: MatchedDataset,
    /// Original index of every dataset unit.
    index: Vec<usize>,
    e_hat: Vec<f64>,
}

/// Fit, match and gate one draw; `None` means the draw is rejected.
/// One more than the majority-to-minority ratio, rounded up: the smallest
/// cap under which every unit can join a set.
fn smallest_feasible_cap(z: &[bool]) -> usize {
    let t = z.iter().filter(|&&v| v).count();
    let (lo, hi) = (t.min(z.len() - t), t.max(z.len() - t));
    if lo == 0 {
        2
    } else {
        1 + hi.div_ceil(lo)
    }
}

fn match_and_gate(cfg: &ScenarioConfig, units: Vec<UnitRecord>, x: &[Vec<f64>], z: &[bool]) -> Result<Option<Matched>> {
    let e_hat = match cfg.propensity.fit(x, z) {
        Ok(e) => e,
        Err(Error::Domain(_) | Error::NonConvergence { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let spec = MatchSpec {
        caliper: cfg.caliper.then(|| cfg.caliper_sd * sd(&e_hat)),
        max_set_size: cfg.max_set_size.max(smallest_feasible_cap(z)),
    };
    let outcome = match full_match(&e_hat, z, &spec) {
        Ok(m) => m,
        Err(Error::Infeasible(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let names = (1..=N_COVARIATES).map(|k| format!("x{k}")).collect();
    let ds = outcome.to_dataset(&units, names)?;
    if !apply_balance_gate(&ds, Some(&units), cfg.balance_threshold)? {
        return Ok(None);
    }
    let index: Vec<usize> = outcome.sets.iter().flatten().copied().collect();
    Ok(Some(Matched { ds, index, e_hat }))
}

fn probs(
    ds: &MatchedDataset,
    e: &[f64],
    source: ProbSource,
    gamma: Option<f64>,
) -> Result<AssignmentProbs> {
    let p = post_match_probs(ds, e, source)?;
    match gamma {
        Some(g) => Ok(regularize_probs(&p, ds, g)?.with_source(source)),
        None => Ok(p),
    }
}

fn oracle_scores(e: &[f64], index: &[usize]) -> Vec<f64> {
    index
        .iter()
        .map(|&k| e[k].clamp(SCORE_FLOOR, 1.0 - SCORE_FLOOR))
        .collect()
}

fn ate_replication(cfg: &ScenarioConfig, rep: usize) -> Result<(Vec<RepRecord>, usize)> {
    for attempt in 0..cfg.attempt_budget() {
        let s = gen_ate_sample(cfg.seed, rep as u32, attempt as u32, cfg.n, cfg.model);
        let y = s.observed_y();
        let units: Vec<UnitRecord> = (0..cfg.n)
            .map(|k| UnitRecord::new("", s.z[k], y[k], s.x[k].clone()))
            .collect();
        let Some(m) = match_and_gate(cfg, units, &s.x, &s.z)? else {
            continue;
        };
        let truth_all = s.effect_over(&(0..cfg.n).collect::<Vec<_>>());
        let truth = s.effect_over(&m.index);
        let e_hat_m: Vec<f64> = m.index.iter().map(|&k| m.e_hat[k]).collect();
        let q = DesignMatrixSpec::default();
        let mut out = Vec::with_capacity(cfg.estimators.len());
        for name in &cfg.estimators {
            let (result, t) = match name.as_str() {
                "fpw" => (
                    fpw_estimate(&s.z, &y, &clamp_scores(&m.e_hat, cfg.clamp_rho), cfg.alpha)?,
                    truth_all,
                ),
                "dim" => (
                    analyze_ate(&m.ds, &AssignmentProbs::uniform(&m.ds), &q, cfg.alpha, Estimator::DiffInMeans)?,
                    truth,
                ),
                "ippw" => {
                    let p = probs(&m.ds, &e_hat_m, ProbSource::Plugin, Some(cfg.gamma))?;
                    (analyze_ate(&m.ds, &p, &q, cfg.alpha, Estimator::Ippw)?, truth)
                }
                "ippw_oracle" => {
                    let gamma = cfg.regularize_oracle.then_some(cfg.gamma);
                    let p = probs(&m.ds, &oracle_scores(&s.e, &m.index), ProbSource::Oracle, gamma)?;
                    (analyze_ate(&m.ds, &p, &q, cfg.alpha, Estimator::IppwOracle)?, truth)
                }
                other => return Err(Error::Config(format!("unknown estimator `{other}`"))),
            };
            out.push(RepRecord {
                rep,
                estimator: name.clone(),
                attempts: attempt + 1,
                n_units: result.n_units,
                truth: t,
                estimate: Some(result.estimate),
                shape: "interval",
                ci_lower: result.ci_lower,
                ci_upper: result.ci_upper,
                covered: result.covers(t),
                ci_length: Some(result.ci_length()),
            });
        }
        return Ok((out, attempt));
    }
    Err(Error::GateExhausted {
        rep,
        attempts: cfg.attempt_budget(),
    })
}

fn bounds(cs: &ConfidenceSet) -> (f64, f64) {
    match *cs {
        ConfidenceSet::Interval { lower, upper } | ConfidenceSet::Complement { lower, upper } => (lower, upper),
        ConfidenceSet::RayBelow { upper } => (f64::NEG_INFINITY, upper),
        ConfidenceSet::RayAbove { lower } => (lower, f64::INFINITY),
        ConfidenceSet::WholeLine => (f64::NEG_INFINITY, f64::INFINITY),
        ConfidenceSet::Empty => (f64::NAN, f64::NAN),
    }
}

fn iv_replication(cfg: &ScenarioConfig, rep: usize) -> Result<(Vec<RepRecord>, usize)> {
    for attempt in 0..cfg.attempt_budget() {
        let s = gen_iv_sample(cfg.seed, rep as u32, attempt as u32, cfg.n, cfg.model);
        let (d, y) = s.observed();
        let units: Vec<UnitRecord> = (0..cfg.n)
            .map(|k| UnitRecord::new("", s.z[k], y[k], s.x[k].clone()).with_dose(d[k]))
            .collect();
        let Some(m) = match_and_gate(cfg, units, &s.x, &s.z)? else {
            continue;
        };
        let Some(truth) = s.effect_ratio_over(&m.index) else {
            continue;
        };
        let e_hat_m: Vec<f64> = m.index.iter().map(|&k| m.e_hat[k]).collect();
        let mut out = Vec::with_capacity(cfg.estimators.len());
        for name in &cfg.estimators {
            let result = match name.as_str() {
                "classical" => analyze_iv(&m.ds, &AssignmentProbs::uniform(&m.ds), cfg.alpha, IvEstimator::Classical)?,
                "bc" => {
                    let p = probs(&m.ds, &e_hat_m, ProbSource::Plugin, Some(cfg.gamma))?;
                    analyze_iv(&m.ds, &p, cfg.alpha, IvEstimator::BiasCorrected)?
                }
                "bc_oracle" => {
                    let gamma = cfg.regularize_oracle.then_some(cfg.gamma);
                    let p = probs(&m.ds, &oracle_scores(&s.e, &m.index), ProbSource::Oracle, gamma)?;
                    analyze_iv(&m.ds, &p, cfg.alpha, IvEstimator::BiasCorrectedOracle)?
                }
                other => return Err(Error::Config(format!("unknown estimator `{other}`"))),
            };
            let (ci_lower, ci_upper) = bounds(&result.confidence_set);
            out.push(RepRecord {
                rep,
                estimator: name.clone(),
                attempts: attempt + 1,
                n_units: result.n_units,
                truth,
                estimate: result.point_estimate,
                shape: result.confidence_set.shape(),
                ci_lower,
                ci_upper,
                covered: result.confidence_set.contains(truth),
                ci_length: result.confidence_set.length(),
            });
        }
        return Ok((out, attempt));
    }
    Err(Error::GateExhausted {
        rep,
        attempts: cfg.attempt_budget(),
    })
}

/// Runs replication `rep`, returning its records and the number of rejected
/// draws that preceded the accepted one. A single replication may use the
/// whole study budget.
pub fn run_replication(cfg: &ScenarioConfig, rep: usize) -> Result<(Vec<RepRecord>, usize)> {
    match cfg.study {
        Study::Ate => ate_replication(cfg, rep),
        Study::Iv => iv_replication(cfg, rep),
    }
}

/// Runs every replication on a pool of `workers` threads. Results are merged
/// in replication order, so the report does not depend on `workers`.
pub fn run_study(cfg: &ScenarioConfig, workers: usize) -> Result<SimulationReport> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<(Vec<RepRecord>, usize)>> =
        pool.install(|| (0..cfg.reps).into_par_iter().map(|r| run_replication(cfg, r)).collect());
    let mut records = Vec::with_capacity(cfg.reps * cfg.estimators.len());
    let mut gate_rejections = 0;
    for (rep, r) in results.into_iter().enumerate() {
        let (recs, rejected) = r?;
        records.extend(recs);
        gate_rejections += rejected;
        if gate_rejections + rep + 1 > cfg.attempt_budget() {
            return Err(Error::GateExhausted {
                rep,
                attempts: gate_rejections + rep + 1,
            });
        }
    }
    let summary = summarize_records(&cfg.estimators, &records);
    Ok(SimulationReport {
        config: cfg.clone(),
        records,
        gate_rejections,
        summary,
    })
}
