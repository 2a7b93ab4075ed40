use std::fs::File;
use std::path::Path;

use riim::ate::{analyze_ate, fpw_estimate, AteResult, DesignMatrixSpec, Estimator, QKind};
use riim::design::{
    balance_table, load_dataset, read_units, validate_design, write_balance, write_units, ColumnMap, MatchedDataset,
    UnitRecord,
};
use riim::iv::{analyze_iv, grid_scan, EffectRatioResult, IvEstimator};
use riim::matching::{full_match, MatchSpec};
use riim::probability::{post_match_probs, regularize_probs, AssignmentProbs, ProbSource};
use riim::propensity::{clamp_scores, Learner, PropensityModelSpec};
use riim::sim::{run_study, summarize, write_replications, ScenarioConfig};
use riim::{Error, Result};
use serde_json::{json, Map, Value};

use crate::output::{to_json, write_atomic, RunManifest, REPORT_SCHEMA, VERSION};
use crate::{Cli, Command, GlobalArgs};

const DEFAULT_ALPHA: f64 = 0.05;
const DEFAULT_SEED: u64 = 1;

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::AnalyzeAte { estimator } => analyze_ate_cmd(g, estimator),
        Command::AnalyzeIv {
            estimator,
            grid_range,
            grid_points,
        } => analyze_iv_cmd(g, estimator, grid_range.as_deref(), *grid_points),
        Command::Match {
            caliper,
            max_set_size,
            dropped,
        } => match_cmd(g, *caliper, *max_set_size, dropped.as_deref()),
        Command::Simulate {
            config,
            study,
            model,
            caliper,
            reps,
            n,
            estimators,
            max_set_size,
            replications,
            workers,
        } => {
            let mut settings: Vec<(&str, String)> = Vec::new();
            let mut push = |k: &'static str, v: Option<String>| {
                if let Some(v) = v {
                    settings.push((k, v));
                }
            };
            push("study", study.clone());
            push("model", model.clone());
            push("caliper", caliper.clone());
            push("reps", reps.map(|v| v.to_string()));
            push("n", n.map(|v| v.to_string()));
            push("estimators", estimators.clone());
            push("max_set_size", max_set_size.map(|v| v.to_string()));
            simulate_cmd(g, config.as_deref(), settings, replications.as_deref(), *workers)
        }
        Command::Balance { pre } => balance_cmd(g, pre.as_deref()),
    }
}

fn input(g: &GlobalArgs) -> Result<&Path> {
    g.input
        .as_deref()
        .ok_or_else(|| Error::Config("--input is required".into()))
}

fn required_out(g: &GlobalArgs) -> Result<&Path> {
    g.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
}

fn alpha(g: &GlobalArgs) -> Result<f64> {
    let a = g.alpha.unwrap_or(DEFAULT_ALPHA);
    if a > 0.0 && a < 1.0 {
        Ok(a)
    } else {
        Err(Error::Config(format!("alpha {a} must lie in (0, 1)")))
    }
}

fn propensity_spec(g: &GlobalArgs, has_e_hat: bool) -> Result<PropensityModelSpec> {
    let mut spec = PropensityModelSpec::default();
    spec.learner = match g.learner.as_deref() {
        Some(l) => l.parse()?,
        None if has_e_hat => Learner::External,
        None => Learner::Gbm,
    };
    if let Some(v) = g.gbm_rounds {
        spec.gbm_rounds = v;
    }
    if let Some(v) = g.gbm_depth {
        spec.gbm_depth = v;
    }
    if let Some(v) = g.gbm_eta {
        spec.gbm_eta = v;
    }
    if let Some(v) = g.ridge {
        spec.ridge = v;
    }
    if let Some(v) = g.clamp_rho {
        spec.clamp_rho = v;
    }
    spec.validate()?;
    Ok(spec)
}

fn learner_name(l: Learner) -> &'static str {
    match l {
        Learner::Logistic => "logistic",
        Learner::Gbm => "gbm",
        Learner::External => "external",
    }
}

fn propensity_options(spec: &PropensityModelSpec) -> Value {
    json!({
        "learner": learner_name(spec.learner),
        "gbm_rounds": spec.gbm_rounds,
        "gbm_depth": spec.gbm_depth,
        "gbm_eta": spec.gbm_eta,
        "gbm_min_child_weight": spec.gbm_min_child_weight,
        "gbm_lambda": spec.gbm_lambda,
        "ridge": spec.ridge,
        "irls_max_iter": spec.irls_max_iter,
        "clamp_rho": spec.clamp_rho,
    })
}

/// Propensity scores for `units`: the `e_hat` column or a fitted learner.
fn scores(units: &[UnitRecord], spec: &PropensityModelSpec) -> Result<Vec<f64>> {
    if spec.learner == Learner::External {
        return units
            .iter()
            .map(|u| u.e_hat.ok_or(Error::MissingField("e_hat")))
            .collect();
    }
    if units.first().is_none_or(|u| u.x.is_empty()) {
        return Err(Error::Config("fitting propensities needs covariate columns x1..xK".into()));
    }
    let x: Vec<Vec<f64>> = units.iter().map(|u| u.x.clone()).collect();
    let z: Vec<bool> = units.iter().map(|u| u.z).collect();
    spec.fit(&x, &z)
}

struct Probabilities {
    probs: AssignmentProbs,
    oracle: bool,
}

fn probabilities(g: &GlobalArgs, ds: &MatchedDataset, spec: &PropensityModelSpec) -> Result<Probabilities> {
    let source = g.prob_source.as_deref().unwrap_or("plugin");
    let (p, oracle) = match source {
        "uniform" => (AssignmentProbs::uniform(ds), false),
        "plugin" => (post_match_probs(ds, &scores(ds.units(), spec)?, ProbSource::Plugin)?, false),
        "oracle-file" => (AssignmentProbs::from_p_hat(ds)?.with_source(ProbSource::Oracle), true),
        other => return Err(Error::Config(format!("unknown probability source `{other}`"))),
    };
    let probs = match g.gamma {
        Some(gamma) => {
            let source = p.source();
            regularize_probs(&p, ds, gamma)?.with_source(source)
        }
        None => p,
    };
    Ok(Probabilities { probs, oracle })
}

fn ate_json(r: &AteResult) -> Value {
    json!({
        "estimate": r.estimate,
        "variance": r.variance,
        "ci": [r.ci_lower, r.ci_upper],
        "alpha": r.alpha,
        "estimator": r.estimator.as_str(),
        "q_spec": r.q_spec.map(QKind::as_str),
        "prob_source": r.prob_source.map(ProbSource::as_str),
        "I": r.n_sets,
        "N": r.n_units,
    })
}

fn iv_json(r: &EffectRatioResult) -> Result<Value> {
    Ok(json!({
        "estimator": r.estimator.as_str(),
        "point_estimate": r.point_estimate,
        "confidence_set": serde_json::to_value(r.confidence_set).map_err(|e| Error::Domain(e.to_string()))?,
        "alpha": r.alpha,
        "prob_source": r.prob_source.as_str(),
        "weak_iv_flag": r.weak_iv_flag,
        "I": r.n_sets,
        "N": r.n_units,
    }))
}

/// Writes the report (and its manifest) or prints it with the manifest
/// embedded when there is no `--out`.
fn emit_report(g: &GlobalArgs, mut report: Map<String, Value>, mut manifest: RunManifest) -> Result<()> {
    match &g.out {
        Some(out) => {
            write_atomic(out, to_json(&report)?.as_bytes())?;
            manifest.outputs.push(out.display().to_string());
            manifest.write_beside(out)
        }
        None => {
            let m = serde_json::to_value(&manifest).map_err(|e| Error::Domain(e.to_string()))?;
            report.insert("manifest".into(), m);
            print!("{}", to_json(&report)?);
            Ok(())
        }
    }
}

fn base_report(command: &str, manifest: &RunManifest, ds: &MatchedDataset) -> Map<String, Value> {
    let mut r = Map::new();
    r.insert("schema".into(), json!(REPORT_SCHEMA));
    r.insert("command".into(), json!(command));
    r.insert("tool_version".into(), json!(VERSION));
    r.insert("input".into(), json!(manifest.inputs[0]));
    r.insert("I".into(), json!(ds.n_sets()));
    r.insert("N".into(), json!(ds.n_units()));
    r.insert("warnings".into(), json!(validate_design(ds)));
    r
}

fn analyze_ate_cmd(g: &GlobalArgs, estimators: &[String]) -> Result<()> {
    let path = input(g)?;
    let ds = load_dataset(path, &ColumnMap::default())?;
    let alpha = alpha(g)?;
    let spec = propensity_spec(g, ds.column(|u| u.e_hat).is_some())?;
    let q: QKind = g.q.as_deref().unwrap_or("unit").parse()?;
    let q_spec = DesignMatrixSpec::new(q);

    let mut results = Vec::new();
    for name in estimators {
        let r = match name.as_str() {
            "dim" => analyze_ate(&ds, &AssignmentProbs::uniform(&ds), &q_spec, alpha, Estimator::DiffInMeans)?,
            "ippw" => {
                let p = probabilities(g, &ds, &spec)?;
                let est = if p.oracle { Estimator::IppwOracle } else { Estimator::Ippw };
                analyze_ate(&ds, &p.probs, &q_spec, alpha, est)?
            }
            "fpw" => {
                let e = clamp_scores(&scores(ds.units(), &spec)?, spec.clamp_rho);
                let z: Vec<bool> = ds.units().iter().map(|u| u.z).collect();
                let y: Vec<f64> = ds.units().iter().map(|u| u.y).collect();
                fpw_estimate(&z, &y, &e, alpha)?
            }
            other => return Err(Error::Config(format!("unknown ATE estimator `{other}` (use dim, ippw, fpw)"))),
        };
        results.push(ate_json(&r));
    }

    let options = json!({
        "estimators": estimators,
        "alpha": alpha,
        "gamma": g.gamma,
        "q": q.as_str(),
        "prob_source": g.prob_source.as_deref().unwrap_or("plugin"),
        "propensity": propensity_options(&spec),
    });
    let mut manifest = RunManifest::new("analyze-ate", g.seed.unwrap_or(DEFAULT_SEED), object(options));
    manifest.add_input(path)?;
    let mut report = base_report("analyze-ate", &manifest, &ds);
    report.insert("results".into(), Value::Array(results));
    emit_report(g, report, manifest)
}

fn parse_range(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::Config(format!("--grid-range expects `lo,hi`, got `{s}`"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    let lo: f64 = a.trim().parse().map_err(|_| bad())?;
    let hi: f64 = b.trim().parse().map_err(|_| bad())?;
    if lo < hi {
        Ok((lo, hi))
    } else {
        Err(bad())
    }
}

fn analyze_iv_cmd(g: &GlobalArgs, estimators: &[String], grid: Option<&str>, grid_points: usize) -> Result<()> {
    let path = input(g)?;
    let ds = load_dataset(path, &ColumnMap::default())?;
    if !ds.has_dose() {
        return Err(Error::MissingColumn("d".into()));
    }
    let alpha = alpha(g)?;
    let range = grid.map(parse_range).transpose()?;
    let spec = propensity_spec(g, ds.column(|u| u.e_hat).is_some())?;

    let mut results = Vec::new();
    for name in estimators {
        let (r, probs) = match name.as_str() {
            "classical" => {
                let u = AssignmentProbs::uniform(&ds);
                (analyze_iv(&ds, &u, alpha, IvEstimator::Classical)?, u)
            }
            "bc" => {
                let p = probabilities(g, &ds, &spec)?;
                let est = if p.oracle {
                    IvEstimator::BiasCorrectedOracle
                } else {
                    IvEstimator::BiasCorrected
                };
                (analyze_iv(&ds, &p.probs, alpha, est)?, p.probs)
            }
            other => return Err(Error::Config(format!("unknown IV estimator `{other}` (use classical, bc)"))),
        };
        let mut v = iv_json(&r)?;
        if let Some((lo, hi)) = range {
            let scan = grid_scan(&ds, &probs, alpha, (lo, hi), grid_points)?;
            let accepted = scan.iter().filter(|(_, a)| *a).count();
            let disagreements = scan
                .iter()
                .filter(|(t, a)| r.confidence_set.contains(*t) != *a)
                .count();
            v["grid"] = json!({
                "range": [lo, hi],
                "points": grid_points,
                "accepted": accepted,
                "disagreements": disagreements,
            });
        }
        results.push(v);
    }

    let options = json!({
        "estimators": estimators,
        "alpha": alpha,
        "gamma": g.gamma,
        "prob_source": g.prob_source.as_deref().unwrap_or("plugin"),
        "grid_range": range.map(|(a, b)| [a, b]),
        "grid_points": grid_points,
        "propensity": propensity_options(&spec),
    });
    let mut manifest = RunManifest::new("analyze-iv", g.seed.unwrap_or(DEFAULT_SEED), object(options));
    manifest.add_input(path)?;
    let mut report = base_report("analyze-iv", &manifest, &ds);
    report.insert("results".into(), Value::Array(results));
    emit_report(g, report, manifest)
}

fn match_cmd(g: &GlobalArgs, caliper: Option<f64>, max_set_size: usize, dropped: Option<&Path>) -> Result<()> {
    let path = input(g)?;
    let out = required_out(g)?;
    let (mut units, names) = read_units(File::open(path)?, &ColumnMap::default(), false)?;
    let spec = propensity_spec(g, units.iter().all(|u| u.e_hat.is_some()))?;
    let e = scores(&units, &spec)?;
    let z: Vec<bool> = units.iter().map(|u| u.z).collect();
    let match_spec = MatchSpec { caliper, max_set_size };
    let outcome = full_match(&e, &z, &match_spec)?;
    for (u, &v) in units.iter_mut().zip(&e) {
        u.e_hat = Some(v);
    }
    let ds = outcome.to_dataset(&units, names.clone())?;

    let mut buf = Vec::new();
    write_units(&mut buf, ds.units(), &names)?;
    write_atomic(out, &buf)?;

    let dropped_path = dropped
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_file_name("dropped.csv"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["row", "z", "e_hat"])?;
    for &k in &outcome.dropped {
        w.write_record([(k + 1).to_string(), u8::from(z[k]).to_string(), format!("{:?}", e[k])])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&dropped_path, &bytes)?;

    eprintln!(
        "matched {} of {} units into {} sets; {} dropped; total distance {}",
        ds.n_units(),
        units.len(),
        ds.n_sets(),
        outcome.dropped.len(),
        outcome.cost
    );

    let options = json!({
        "caliper": caliper,
        "max_set_size": max_set_size,
        "propensity": propensity_options(&spec),
    });
    let mut manifest = RunManifest::new("match", g.seed.unwrap_or(DEFAULT_SEED), object(options));
    manifest.add_input(path)?;
    manifest.outputs.push(out.display().to_string());
    manifest.outputs.push(dropped_path.display().to_string());
    manifest.write_beside(out)
}

fn simulate_cmd(
    g: &GlobalArgs,
    config: Option<&Path>,
    settings: Vec<(&str, String)>,
    replications: Option<&Path>,
    workers: Option<usize>,
) -> Result<()> {
    let out = required_out(g)?;
    let mut cfg = ScenarioConfig::new(riim::sim::Study::Ate, riim::sim::dgp::TreatmentModel::Logistic);
    if let Some(path) = config {
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
    }
    for (k, v) in &settings {
        cfg.set(k, v)?;
    }
    let globals = [
        ("seed", g.seed.map(|v| v.to_string())),
        ("alpha", g.alpha.map(|v| v.to_string())),
        ("gamma", g.gamma.map(|v| v.to_string())),
        ("clamp_rho", g.clamp_rho.map(|v| v.to_string())),
        ("learner", g.learner.clone()),
        ("gbm_rounds", g.gbm_rounds.map(|v| v.to_string())),
        ("gbm_depth", g.gbm_depth.map(|v| v.to_string())),
        ("gbm_eta", g.gbm_eta.map(|v| v.to_string())),
        ("ridge", g.ridge.map(|v| v.to_string())),
    ];
    for (k, v) in globals {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    cfg.validate()?;
    let workers = workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);

    let report = run_study(&cfg, workers)?;
    let (csv, text) = summarize(&report);
    write_atomic(out, csv.as_bytes())?;
    print!("{text}");

    let options = json!({ "config": cfg.to_text(), "workers": workers });
    let mut manifest = RunManifest::new("simulate", cfg.seed, object(options));
    if let Some(path) = config {
        manifest.add_input(path)?;
    }
    manifest.outputs.push(out.display().to_string());
    if let Some(path) = replications {
        let mut buf = Vec::new();
        write_replications(&mut buf, &report.records)?;
        write_atomic(path, &buf)?;
        manifest.outputs.push(path.display().to_string());
    }
    manifest.write_beside(out)
}

fn balance_cmd(g: &GlobalArgs, pre: Option<&Path>) -> Result<()> {
    let path = input(g)?;
    let out = required_out(g)?;
    let ds = load_dataset(path, &ColumnMap::default())?;
    let pre_units = match pre {
        Some(p) => Some(read_units(File::open(p)?, &ColumnMap::default(), false)?.0),
        None => None,
    };
    let rows = balance_table(&ds, pre_units.as_deref())?;
    let mut buf = Vec::new();
    write_balance(&mut buf, &rows)?;
    write_atomic(out, &buf)?;

    let mut manifest = RunManifest::new(
        "balance",
        g.seed.unwrap_or(DEFAULT_SEED),
        object(json!({ "pre": pre.map(|p| p.display().to_string()) })),
    );
    manifest.add_input(path)?;
    if let Some(p) = pre {
        manifest.add_input(p)?;
    }
    manifest.outputs.push(out.display().to_string());
    manifest.write_beside(out)
}

fn object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}
