use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use riim::ate::{analyze_ate, DesignMatrixSpec, Estimator};
use riim::design::{read_units, write_units, ColumnMap, MatchedDataset, UnitRecord};
use riim::probability::{enumerate_assignment_dist, post_match_probs, ProbSource};
use riim::sim::dgp::TreatmentModel;
use riim::sim::{run_study, summarize, ScenarioConfig, Study};

/// A fixed finite population of matched sets: (scores, potential outcomes,
/// treated count) per set.
struct Population {
    sets: Vec<(Vec<f64>, Vec<(f64, f64)>, usize)>,
}

fn population(exact: bool, rng: &mut ChaCha12Rng) -> Population {
    let sets = (0..20)
        .map(|i| {
            let n = 2 + i % 4;
            let m = if i % 3 == 0 && n > 2 { n - 1 } else { 1 };
            let base: f64 = rng.random_range(0.2..0.8);
            let e: Vec<f64> = (0..n)
                .map(|_| if exact { base } else { (base + rng.random_range(-0.15..0.15)).clamp(0.05, 0.95) })
                .collect();
            let x = 4.0 * base;
            let po = (0..n)
                .map(|_| {
                    let y0 = x + rng.random_range(-1.0..1.0);
                    (y0, y0 + 1.0 + x * x)
                })
                .collect();
            (e, po, m)
        })
        .collect();
    Population { sets }
}

fn draw(pop: &Population, rng: &mut ChaCha12Rng) -> (MatchedDataset, Vec<f64>, f64) {
    let mut units = Vec::new();
    let mut e_all = Vec::new();
    let mut effects = 0.0;
    for (i, (e, po, m)) in pop.sets.iter().enumerate() {
        let dist = enumerate_assignment_dist(e, *m).unwrap();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = dist.probs.len() - 1;
        for (j, p) in dist.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                k = j;
                break;
            }
        }
        for (j, &z) in dist.assignments[k].iter().enumerate() {
            let (y0, y1) = po[j];
            units.push(UnitRecord::new(format!("S{i}"), z, if z { y1 } else { y0 }, vec![e[j]]));
            e_all.push(e[j]);
            effects += y1 - y0;
        }
    }
    let n = units.len() as f64;
    (MatchedDataset::from_units(units, vec!["x1".into()]).unwrap(), e_all, effects / n)
}

fn oracle_bias_is_null(exact: bool, seed: u64) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let pop = population(exact, &mut rng);
    let reps = 1000;
    let errors: Vec<f64> = (0..reps)
        .map(|_| {
            let (ds, e, truth) = draw(&pop, &mut rng);
            let p = post_match_probs(&ds, &e, ProbSource::Oracle).unwrap();
            let r = analyze_ate(&ds, &p, &DesignMatrixSpec::default(), 0.05, Estimator::IppwOracle).unwrap();
            r.estimate - truth
        })
        .collect();
    let mean = errors.iter().sum::<f64>() / reps as f64;
    let sd = (errors.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    let se = sd / (reps as f64).sqrt();
    assert!(mean.abs() < 3.0 * se, "mean error {mean} vs standard error {se}");
}

#[test]
fn oracle_ippw_is_unbiased_under_exact_matching() {
    oracle_bias_is_null(true, 11);
}

#[test]
fn oracle_ippw_is_unbiased_under_inexact_matching() {
    oracle_bias_is_null(false, 12);
}

#[test]
fn csv_round_trip_preserves_estimates() {
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let pop = population(false, &mut rng);
    let (ds, _, _) = draw(&pop, &mut rng);
    let file = tempfile::NamedTempFile::new().unwrap();
    write_units(file.reopen().unwrap(), ds.units(), ds.covariate_names()).unwrap();
    let (units, names) = read_units(file.reopen().unwrap(), &ColumnMap::default(), true).unwrap();
    let back = MatchedDataset::from_units(units, names).unwrap();
    let uniform = |d: &MatchedDataset| {
        analyze_ate(
            d,
            &riim::probability::AssignmentProbs::uniform(d),
            &DesignMatrixSpec::default(),
            0.05,
            Estimator::DiffInMeans,
        )
        .unwrap()
    };
    assert_eq!(uniform(&ds), uniform(&back));
}

#[test]
fn single_replication_summary_is_the_raw_error() {
    let mut cfg = ScenarioConfig::new(Study::Ate, TreatmentModel::Logistic);
    cfg.n = 120;
    cfg.reps = 1;
    cfg.estimators = vec!["ippw_oracle".into()];
    let report = run_study(&cfg, 1).unwrap();
    let rec = &report.records[0];
    let row = &report.summary[0];
    assert_eq!(row.mean_error, rec.estimate.unwrap() - rec.truth);
    assert!(row.coverage == 0.0 || row.coverage == 1.0);
    let (csv, text) = summarize(&report);
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("study,model,caliper,estimator,bias,ci_length,coverage"));
    assert!(text.contains("Oracle IPPW"));
}

#[test]
fn iv_study_runs_for_both_models_with_caliper() {
    for model in [TreatmentModel::Logistic, TreatmentModel::Selection] {
        let mut cfg = ScenarioConfig::new(Study::Iv, model);
        cfg.reps = 2;
        cfg.caliper = true;
        let report = run_study(&cfg, 2).unwrap();
        assert_eq!(report.summary.len(), 3);
        for row in &report.summary {
            assert!((0.0..=1.0).contains(&row.coverage));
        }
    }
}
