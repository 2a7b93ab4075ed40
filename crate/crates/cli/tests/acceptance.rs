//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use riim::ate::{analyze_ate, build_design_matrix, variance_estimator, DesignMatrixSpec, Estimator, QKind};
use riim::design::{MatchedDataset, UnitRecord};
use riim::iv::{ar_statistic, bc_wald, classical_wald, effect_ratio_confidence_set, grid_scan};
use riim::matching::{brute_force_full_match, full_match, MatchSpec};
use riim::probability::{
    enumerate_assignment_dist, post_match_probs, probs_one_control, probs_one_treated, AssignmentProbs, ProbSource,
};
use riim::sim::dgp::TreatmentModel;
use riim::sim::{run_study, ScenarioConfig, Study, SummaryRow};

const PROB_TOL: f64 = 1e-12;
const UNBIASED_TOL: f64 = 1e-10;
const CONSERVATIVE_TOL: f64 = 1e-10;
const COVERAGE_BAND: (f64, f64) = (0.92, 0.98);
const COVERAGE_GAP: f64 = 0.05;
const MC_SLACK: f64 = 0.02;
const ROOT_TOL: f64 = 1e-8;
const WALD_TOL: f64 = 1e-10;
const GRID_POINTS: usize = 2001;
const VARIANCE_TOL: f64 = 1e-12;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn check(name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut out = f();
    let took = start.elapsed();
    if let Some(limit) = limit {
        if took > limit {
            out.pass = false;
            out.detail.push_str(&format!("; over the {limit:?} budget"));
        }
    }
    println!(
        "{} {name}: {} [{:.1}s]",
        if out.pass { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64()
    );
    out.pass
}

fn random_e(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.01..0.99)).collect()
}

fn probability_formulas() -> Outcome {
    let mut rng = ChaCha12Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = rng.random_range(2..=8);
        let e = random_e(&mut rng, n);
        let one_treated = n == 2 || rng.random_bool(0.5);
        let (m, formula) = if one_treated {
            (1, probs_one_treated(&e).unwrap())
        } else {
            (n - 1, probs_one_control(&e).unwrap())
        };
        let oracle = enumerate_assignment_dist(&e, m).unwrap().marginals();
        for (a, b) in formula.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(worst <= PROB_TOL, format!("500 sets, max |formula - enumeration| = {worst:.2e} (tol {PROB_TOL:.0e})"))
}

/// A small matched design with fixed potential outcomes and true scores.
struct Toy {
    sets: Vec<ToySet>,
}

struct ToySet {
    e: Vec<f64>,
    y0: Vec<f64>,
    y1: Vec<f64>,
    x: Vec<f64>,
    treated: usize,
}

fn toy(rng: &mut ChaCha12Rng, min_sets: usize) -> Toy {
    let i = rng.random_range(min_sets..=4);
    let sets = (0..i)
        .map(|_| {
            let n = rng.random_range(2..=4);
            let treated = if n == 2 || rng.random_bool(0.5) { 1 } else { n - 1 };
            let y0: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y1 = y0.iter().map(|v| v + rng.random_range(-1.0..3.0)).collect();
            ToySet {
                e: random_e(rng, n),
                y0,
                y1,
                x: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                treated,
            }
        })
        .collect();
    Toy { sets }
}

impl Toy {
    fn effect(&self) -> f64 {
        let (sum, n) = self.sets.iter().fold((0.0, 0usize), |(s, n), set| {
            let d: f64 = set.y1.iter().zip(&set.y0).map(|(a, b)| a - b).sum();
            (s + d, n + set.e.len())
        });
        sum / n as f64
    }

    /// Every joint assignment with its probability.
    fn assignments(&self) -> Vec<(Vec<Vec<bool>>, f64)> {
        let mut out = vec![(Vec::new(), 1.0)];
        for set in &self.sets {
            let dist = enumerate_assignment_dist(&set.e, set.treated).unwrap();
            let mut next = Vec::new();
            for (prefix, pr) in &out {
                for (z, q) in dist.assignments.iter().zip(&dist.probs) {
                    let mut v: Vec<Vec<bool>> = prefix.clone();
                    v.push(z.clone());
                    next.push((v, pr * q));
                }
            }
            out = next;
        }
        out
    }

    fn dataset(&self, z: &[Vec<bool>]) -> (MatchedDataset, Vec<f64>) {
        let mut units = Vec::new();
        let mut e = Vec::new();
        for (k, (set, zs)) in self.sets.iter().zip(z).enumerate() {
            for j in 0..set.e.len() {
                let y = if zs[j] { set.y1[j] } else { set.y0[j] };
                units.push(UnitRecord::new(format!("S{k}"), zs[j], y, vec![set.x[j]]));
                e.push(set.e[j]);
            }
        }
        (MatchedDataset::from_units(units, vec!["x1".into()]).unwrap(), e)
    }
}

/// Exact mean and variance of the oracle estimator and the mean of its
/// variance estimate over the randomization distribution.
fn exact_moments(t: &Toy, q: QKind) -> Option<(f64, f64, f64)> {
    let (mut m1, mut m2, mut ms2) = (0.0, 0.0, 0.0);
    for (z, pr) in t.assignments() {
        let (ds, e) = t.dataset(&z);
        let p = post_match_probs(&ds, &e, ProbSource::Oracle).unwrap();
        let r = analyze_ate(&ds, &p, &DesignMatrixSpec::new(q), 0.05, Estimator::IppwOracle).ok()?;
        m1 += pr * r.estimate;
        m2 += pr * r.estimate * r.estimate;
        ms2 += pr * r.variance;
    }
    Some((m1, m2 - m1 * m1, ms2))
}

fn unbiasedness() -> Outcome {
    let mut rng = ChaCha12Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let t = toy(&mut rng, 2);
        let (mean, _, _) = exact_moments(&t, QKind::Unit).unwrap();
        worst = worst.max((mean - t.effect()).abs());
    }
    outcome(
        worst <= UNBIASED_TOL,
        format!("50 toy designs, max |E(estimate) - effect| = {worst:.2e} (tol {UNBIASED_TOL:.0e})"),
    )
}

fn conservativeness() -> Outcome {
    let mut rng = ChaCha12Rng::seed_from_u64(202);
    let (mut worst, mut checked, mut skipped) = (f64::INFINITY, 0, 0);
    for _ in 0..50 {
        let t = toy(&mut rng, 2);
        for q in [QKind::Unit, QKind::InterceptCovmeans] {
            match exact_moments(&t, q) {
                Some((_, var, es2)) => {
                    worst = worst.min(es2 - var);
                    checked += 1;
                }
                // An intercept plus a covariate mean is not estimable with
                // two sets, and can be too close to saturated with three.
                None if q == QKind::InterceptCovmeans => skipped += 1,
                None => return outcome(false, "unit design failed".into()),
            }
        }
    }
    outcome(
        worst >= -CONSERVATIVE_TOL && checked >= 50,
        format!(
            "{checked} design/Q pairs ({skipped} covmeans cases not estimable), min E(S2) - Var = {worst:.3e} (tol -{CONSERVATIVE_TOL:.0e})"
        ),
    )
}

fn ate_coverage() -> Outcome {
    let cfg = ScenarioConfig::new(Study::Ate, TreatmentModel::Logistic);
    let report = match run_study(&cfg, workers()) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("study failed: {e}")),
    };
    let row = |name: &str| report.summary.iter().find(|r| r.estimator == name).unwrap().clone();
    let (fpw, dim, ippw, oracle) = (row("fpw"), row("dim"), row("ippw"), row("ippw_oracle"));
    let checks = [
        (
            "oracle coverage in band",
            (COVERAGE_BAND.0..=COVERAGE_BAND.1).contains(&oracle.coverage),
        ),
        ("post-matching coverage gap", dim.coverage <= oracle.coverage - COVERAGE_GAP),
        ("bias fpw >= dim", fpw.bias >= dim.bias - MC_SLACK),
        ("bias dim >= ippw", dim.bias >= ippw.bias - MC_SLACK),
        ("bias ippw >= oracle", ippw.bias >= oracle.bias - MC_SLACK),
    ];
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    outcome(
        failed.is_empty(),
        format!(
            "{} (reps {}, gate rejections {}) {}",
            table(&[fpw, dim, ippw, oracle]),
            cfg.reps,
            report.gate_rejections,
            verdict(&failed)
        ),
    )
}

fn iv_coverage() -> Outcome {
    let cfg = ScenarioConfig::new(Study::Iv, TreatmentModel::Logistic);
    let report = match run_study(&cfg, workers()) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("study failed: {e}")),
    };
    let row = |name: &str| report.summary.iter().find(|r| r.estimator == name).unwrap().clone();
    let (cl, bc, or) = (row("classical"), row("bc"), row("bc_oracle"));
    let checks = [
        ("coverage classical < bc", cl.coverage < bc.coverage),
        ("coverage bc < oracle", bc.coverage < or.coverage),
        ("oracle coverage gap", or.coverage >= cl.coverage + COVERAGE_GAP),
        ("bias classical >= bc", cl.bias >= bc.bias - MC_SLACK),
        ("bias bc >= oracle", bc.bias >= or.bias - MC_SLACK),
    ];
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    outcome(
        failed.is_empty(),
        format!(
            "{} (reps {}, gate rejections {}) {}",
            table(&[cl, bc, or]),
            cfg.reps,
            report.gate_rejections,
            verdict(&failed)
        ),
    )
}

fn table(rows: &[SummaryRow]) -> String {
    rows.iter()
        .map(|r| format!("{} bias {:.3} cover {:.3}", r.estimator, r.bias, r.coverage))
        .collect::<Vec<_>>()
        .join("; ")
}

fn verdict(failed: &[&str]) -> String {
    if failed.is_empty() {
        "all orderings hold".into()
    } else {
        format!("violated: {}", failed.join(", "))
    }
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn iv_dataset(rng: &mut ChaCha12Rng) -> (MatchedDataset, AssignmentProbs) {
    let i = rng.random_range(4..=30);
    let compliance = rng.random_range(0.0..1.0);
    let theta = rng.random_range(-3.0..3.0);
    let mut units = Vec::new();
    let mut e = Vec::new();
    for k in 0..i {
        let n = rng.random_range(2..=4);
        let treated = if n == 2 || rng.random_bool(0.5) { 1 } else { n - 1 };
        let mut z: Vec<bool> = (0..n).map(|j| j < treated).collect();
        z.shuffle(rng);
        for &zj in &z {
            let d = if rng.random_bool(compliance) { zj } else { rng.random_bool(0.5) };
            let d = f64::from(u8::from(d));
            let y = theta * d + rng.random_range(-1.0..1.0);
            units.push(UnitRecord::new(format!("S{k}"), zj, y, vec![]).with_dose(d));
            e.push(rng.random_range(0.05..0.95));
        }
    }
    let ds = MatchedDataset::from_units(units, vec![]).unwrap();
    let p = post_match_probs(&ds, &e, ProbSource::Plugin).unwrap();
    (ds, p)
}

fn iv_identities() -> Outcome {
    let mut rng = ChaCha12Rng::seed_from_u64(505);
    let (mut root, mut wald, mut disagreements, mut weak) = (0.0f64, 0.0f64, 0usize, 0usize);
    let mut shapes = std::collections::BTreeMap::new();
    for _ in 0..200 {
        let (ds, p) = iv_dataset(&mut rng);
        match bc_wald(&ds, &p) {
            Ok(theta) => root = root.max(ar_statistic(&ds, &p, theta).unwrap().value.abs()),
            Err(_) => weak += 1,
        }
        let uniform = AssignmentProbs::uniform(&ds);
        if let (Ok(a), Ok(b)) = (bc_wald(&ds, &uniform), classical_wald(&ds)) {
            wald = wald.max((a - b).abs());
        }
        let set = effect_ratio_confidence_set(&ds, &p, 0.05).unwrap();
        *shapes.entry(set.shape()).or_insert(0) += 1;
        for (theta, accepted) in grid_scan(&ds, &p, 0.05, (-10.0, 10.0), GRID_POINTS).unwrap() {
            if set.contains(theta) != accepted {
                disagreements += 1;
            }
        }
    }
    outcome(
        root <= ROOT_TOL && wald <= WALD_TOL && disagreements == 0,
        format!(
            "200 datasets: max |A(theta_hat)| = {root:.2e} (tol {ROOT_TOL:.0e}, {weak} without root), max |bc - classical| under uniform = {wald:.2e} (tol {WALD_TOL:.0e}), {disagreements} grid disagreements, shapes {shapes:?}"
        ),
    )
}

fn matching_optimality() -> Outcome {
    let mut rng = ChaCha12Rng::seed_from_u64(707);
    let (mut mismatches, mut infeasible) = (0, 0);
    for _ in 0..200 {
        let n = rng.random_range(2..=8);
        let mut z: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        z[0] = true;
        z[1] = false;
        z.shuffle(&mut rng);
        let e: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let spec = MatchSpec {
            caliper: rng.random_bool(0.3).then(|| rng.random_range(0.05..0.5)),
            max_set_size: rng.random_range(2..=n.max(2)),
        };
        match (full_match(&e, &z, &spec), brute_force_full_match(&e, &z, &spec)) {
            (Ok(a), Ok(b)) => {
                if (a.dropped.len(), a.cost_units) != (b.dropped.len(), b.cost_units) {
                    mismatches += 1;
                }
            }
            (Err(_), Err(_)) => infeasible += 1,
            _ => mismatches += 1,
        }
    }
    outcome(
        mismatches == 0,
        format!("200 instances (N <= 8), {mismatches} objective mismatches, {infeasible} infeasible for both"),
    )
}

fn variance_identity() -> Outcome {
    let mut rng = ChaCha12Rng::seed_from_u64(808);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let i = rng.random_range(2..=40);
        let n = rng.random_range(2..=5);
        let mut units = Vec::new();
        for k in 0..i {
            for j in 0..n {
                units.push(UnitRecord::new(format!("S{k}"), j == 0, 0.0, vec![]));
            }
        }
        let ds = MatchedDataset::from_units(units, vec![]).unwrap();
        let tau: Vec<f64> = (0..i).map(|_| rng.random_range(-5.0..5.0)).collect();
        let q = build_design_matrix(&ds, &DesignMatrixSpec::new(QKind::Unit)).unwrap();
        let s2 = variance_estimator(&tau, &ds, &q).unwrap();
        let mean = tau.iter().sum::<f64>() / i as f64;
        let direct = tau.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (i * (i - 1)) as f64;
        worst = worst.max((s2 - direct).abs());
    }
    outcome(
        worst <= VARIANCE_TOL,
        format!("100 inputs, max |S2 - sample variance / I| = {worst:.2e} (tol {VARIANCE_TOL:.0e})"),
    )
}

fn simulate(dir: &Path, tag: &str, args: &[&str], workers: usize) -> Result<(Vec<u8>, Vec<u8>), String> {
    let out = dir.join(format!("{tag}-{workers}.csv"));
    let reps = dir.join(format!("{tag}-{workers}-reps.csv"));
    let status = Command::new(env!("CARGO_BIN_EXE_riim"))
        .arg("simulate")
        .args(args)
        .arg("--workers")
        .arg(workers.to_string())
        .arg("--out")
        .arg(&out)
        .arg("--replications")
        .arg(&reps)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    Ok((
        std::fs::read(&out).map_err(|e| e.to_string())?,
        std::fs::read(&reps).map_err(|e| e.to_string())?,
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let configs: [(&str, &[&str]); 3] = [
        ("ate1", &["--study", "ate", "--model", "1", "--reps", "50", "--seed", "7"]),
        (
            "iv2",
            &["--study", "iv", "--model", "2", "--caliper", "on", "--reps", "12", "--seed", "11"],
        ),
        (
            "ate2",
            &["--study", "ate", "--model", "2", "--caliper", "on", "--reps", "12", "--n", "300", "--seed", "3"],
        ),
    ];
    let mut notes = Vec::new();
    let mut pass = true;
    for (tag, args) in configs {
        let runs: Result<Vec<_>, String> = [1, 1, 3, 8].iter().map(|&w| simulate(dir.path(), tag, args, w)).collect();
        match runs {
            Ok(runs) => {
                let same = runs.windows(2).all(|w| w[0] == w[1]);
                pass &= same;
                notes.push(format!("{tag} {}", if same { "identical" } else { "differs" }));
            }
            Err(e) => {
                pass = false;
                notes.push(format!("{tag} failed: {}", e.trim()));
            }
        }
    }
    outcome(
        pass,
        format!("3 configurations x workers 1,1,3,8, summary and replication files: {}", notes.join(", ")),
    )
}

fn main() {
    let secs = Duration::from_secs;
    let results = [
        check("1 probability formulas vs enumeration", Some(secs(5)), probability_formulas),
        check("2 exact unbiasedness of oracle IPPW", Some(secs(10)), unbiasedness),
        check("3 conservative variance estimator", Some(secs(30)), conservativeness),
        check("4 ATE simulation coverage and bias ordering", None, ate_coverage),
        check("5 effect-ratio identities and grid agreement", Some(secs(10)), iv_identities),
        check("6 effect-ratio simulation coverage and bias ordering", None, iv_coverage),
        check("7 full matching optimality vs brute force", Some(secs(20)), matching_optimality),
        check("8 unit-Q variance identity", Some(secs(1)), variance_identity),
        check("9 simulate determinism across worker counts", None, determinism),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
