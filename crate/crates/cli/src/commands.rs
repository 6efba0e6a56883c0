//! Subcommand implementations; each returns its one-line summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hishrink::dataset::{self, LogFormat, ParseOptions, SessionizeConfig};
use hishrink::features::{apply_standardizer, build_features, fit_standardizer};
use hishrink::pipeline::{evaluate_split, fit_split, run_pipeline, GridOverrides, PipelineConfig};
use hishrink::simulate::{simulate, SimConfig};
use hishrink::tuning::{predictor_importance, SearchOptions};
use hishrink::{BcdConfig, Family, FeatureConfig, GbtParams, ModelFile, SplitFractions};

use crate::config::{parse_list, pick, require, FileConfig};
use crate::{Cli, Command, FeatureArgs, ModelArgs, UsageError};

pub fn dispatch(cli: Cli) -> Result<String> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path).map_err(|e| UsageError(format!("{e:#}")))?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Sessionize(a) => sessionize(a, &file),
        Command::Split(a) => split(a, &file),
        Command::Features(a) => features(a, &file),
        Command::Fit(a) => fit(a, &file),
        Command::Predict(a) => predict(a, &file),
        Command::Evaluate(a) => evaluate(a, &file),
        Command::Report(a) => report(a, &file),
        Command::Simulate(a) => simulate_cmd(a, &file),
    }
}

fn usage<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| UsageError(e.to_string()).into())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn sessionize(a: crate::SessionizeArgs, file: &FileConfig) -> Result<String> {
    let input = require(a.input, file.input.clone(), "input")?;
    let out = require(a.out, file.out.clone(), "out")?;
    let format: LogFormat = match pick(a.format, file.format.clone()) {
        Some(f) => usage(f.parse())?,
        None => LogFormat::default(),
    };
    let cfg = SessionizeConfig {
        gap_threshold: pick(a.gap_seconds, file.gap_seconds).unwrap_or(dataset::DEFAULT_GAP_SECONDS),
        min_session_length: pick(a.min_session_seconds, file.min_session_seconds)
            .unwrap_or(dataset::DEFAULT_MIN_SESSION_SECONDS),
    };
    let log = dataset::parse_event_log(
        &input,
        &ParseOptions {
            format,
            ..ParseOptions::default()
        },
    )?;
    let (sessions, report) = dataset::sessionize(&log.users, &cfg)?;
    ensure_parent(&out)?;
    dataset::write_sessions(&out, sessions.iter())?;
    Ok(format!(
        "sessionize: events={} malformed={} users={} {report} -> {}",
        log.n_events(),
        log.malformed,
        sessions.n_users(),
        out.display()
    ))
}

fn split(a: crate::SplitArgs, file: &FileConfig) -> Result<String> {
    let input = require(a.input, file.input.clone(), "input")?;
    let out = require(a.out, file.out.clone(), "out")?;
    let fractions: SplitFractions = match pick(a.fractions, file.fractions.clone()) {
        Some(f) => usage(f.parse())?,
        None => SplitFractions::default(),
    };
    let sessions = dataset::read_sessions(&input)?;
    let (split, report) = dataset::chronological_split(&sessions, fractions)?;
    dataset::write_split(&out, &split, &report)?;
    Ok(format!(
        "split: train={} valid={} test={} removed_valid={} removed_test={} -> {}",
        split.train.n_sessions(),
        split.valid.n_sessions(),
        split.test.n_sessions(),
        report.removed_valid,
        report.removed_test,
        out.display()
    ))
}

fn feature_config(a: &FeatureArgs, file: &FileConfig) -> Result<FeatureConfig> {
    let mut cfg = FeatureConfig::default();
    if let Some(cols) = pick(a.columns.clone(), file.columns.clone()) {
        cfg.columns = cols
            .split(',')
            .map(|c| c.trim().to_owned())
            .filter(|c| !c.is_empty())
            .collect();
    }
    if let Some(path) = pick(a.attributes.clone(), file.attributes.clone()) {
        cfg = cfg.with_attribute_file(path)?;
    }
    Ok(cfg)
}

fn split_dir(a: &FeatureArgs, file: &FileConfig) -> Result<PathBuf> {
    require(a.split.clone(), file.split.clone(), "split")
}

fn features(a: crate::FeaturesArgs, file: &FileConfig) -> Result<String> {
    let dir = split_dir(&a.features, file)?;
    let out = require(a.out, file.out.clone(), "out")?;
    let cfg = feature_config(&a.features, file)?;
    let split = dataset::read_split(&dir)?;
    let tables = build_features(&split, &cfg)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let (std, train_x) = fit_standardizer(&tables.train)?;
    for (name, table) in [
        ("train", &tables.train),
        ("valid", &tables.valid),
        ("test", &tables.test),
    ] {
        table.write_csv(out.join(format!("features_{name}.csv")))?;
        let design = if name == "train" {
            train_x.clone()
        } else {
            apply_standardizer(&std, table)?
        };
        design.write_csv(out.join(format!("design_{name}.csv")))?;
    }
    fs::write(out.join("standardizer.json"), serde_json::to_string_pretty(&std)?)?;
    Ok(format!(
        "features: rows={}/{}/{} columns={} dropped={} -> {}",
        tables.train.n_rows(),
        tables.valid.n_rows(),
        tables.test.n_rows(),
        std.columns.len(),
        std.dropped.len(),
        out.display()
    ))
}

fn list_arg(flag: &Option<String>, file: &Option<crate::NumList>) -> Result<Option<Vec<f64>>> {
    match (flag, file) {
        (Some(s), _) => Ok(Some(parse_list(s)?)),
        (None, Some(l)) => Ok(Some(l.values()?)),
        (None, None) => Ok(None),
    }
}

fn family_of(flag: Option<String>, file: &FileConfig) -> Result<Family> {
    usage(require(flag, file.family.clone(), "family")?.parse())
}

fn pipeline_config(family: Family, features: &FeatureArgs, m: &ModelArgs, file: &FileConfig) -> Result<PipelineConfig> {
    let trees = list_arg(&m.trees, &file.trees)?;
    let depth = list_arg(&m.depth, &file.depth)?;
    let rate = list_arg(&m.learning_rate, &file.learning_rate)?;
    let gbt = if trees.is_some() || depth.is_some() || rate.is_some() {
        let trees = trees.unwrap_or_else(|| vec![10.0, 15.0, 50.0, 100.0]);
        let depth = depth.unwrap_or_else(|| vec![6.0, 10.0]);
        let rate = rate.unwrap_or_else(|| vec![0.1, 0.05]);
        let mut grid = Vec::new();
        for &t in &trees {
            for &d in &depth {
                for &r in &rate {
                    if t < 0.0 || d < 0.0 || t.fract() != 0.0 || d.fract() != 0.0 {
                        return Err(UsageError("trees and depth must be non-negative integers".into()).into());
                    }
                    grid.push(GbtParams::new(t as usize, d as usize, r));
                }
            }
        }
        Some(grid)
    } else {
        None
    };
    let bcd = BcdConfig {
        epsilon: pick(m.epsilon, file.epsilon).unwrap_or(0.01),
        max_iters: pick(m.max_iters, file.max_iters).unwrap_or(100),
        ..BcdConfig::default()
    };
    Ok(PipelineConfig {
        family,
        features: feature_config(features, file)?,
        grid: GridOverrides {
            lambdas: list_arg(&m.lambda, &file.lambda)?,
            alphas: list_arg(&m.alpha, &file.alpha)?,
            deltas: list_arg(&m.delta, &file.delta)?,
            gbt,
        },
        search: SearchOptions {
            bcd,
            threads: pick(m.threads, file.threads).unwrap_or(0),
            ..SearchOptions::default()
        },
        lognormal_correction: m.lognormal || file.lognormal.unwrap_or(false),
    })
}

fn fit(a: crate::FitArgs, file: &FileConfig) -> Result<String> {
    let dir = split_dir(&a.features, file)?;
    let out = require(a.out, file.out.clone(), "out")?;
    let family = family_of(a.model.family.clone(), file)?;
    let cfg = pipeline_config(family, &a.features, &a.model, file)?;
    let split = dataset::read_split(&dir)?;
    let outcome = fit_split(&split, &cfg, &mut Vec::new())?;
    ensure_parent(&out)?;
    outcome.model.save(&out)?;
    let grid_path = out.with_extension("grid.csv");
    outcome.search.write_path_csv(&grid_path)?;
    let mut summary = format!("fit {family}:");
    if let Some(vc) = outcome.model.variance_components {
        write!(
            summary,
            " lambda_hat={:.4} sigma0_sq={:.4} sigma1_sq={:.4}",
            vc.lambda(),
            vc.sigma0_sq,
            vc.sigma1_sq
        )?;
    }
    write!(
        summary,
        " selected=[{}] valid_mae={:.3}s grid={} -> {}",
        outcome.search.best,
        outcome.search.best_mae,
        outcome.search.path.len(),
        out.display()
    )?;
    Ok(summary)
}

fn write_predictions(
    path: &Path,
    keys: &[hishrink::features::RowKey],
    actual: &[f64],
    predicted: &[f64],
) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["user_id", "session_index", "actual_seconds", "predicted_seconds"])?;
    for ((k, a), p) in keys.iter().zip(actual).zip(predicted) {
        w.write_record([
            k.user_id.clone(),
            k.session_index.to_string(),
            a.to_string(),
            p.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn predict(a: crate::PredictArgs, file: &FileConfig) -> Result<String> {
    let model_path = require(a.model, file.model.clone(), "model")?;
    let dir = require(a.split, file.split.clone(), "split")?;
    let out = require(a.out, file.out.clone(), "out")?;
    let part = pick(a.part, file.part.clone()).unwrap_or_else(|| "test".into());
    let model = ModelFile::load(&model_path)?;
    let split = dataset::read_split(&dir)?;
    let tables = build_features(&split, &model.feature_config)?;
    let (table, sessions) = match part.as_str() {
        "train" => (&tables.train, &split.train),
        "valid" => (&tables.valid, &split.valid),
        "test" => (&tables.test, &split.test),
        other => bail!(UsageError(format!(
            "unknown part `{other}`; expected train, valid or test"
        ))),
    };
    let data = hishrink::pipeline::model_data(table, model.design(table)?, sessions)?;
    let predictions = model.predict_rows(&data.x, &data.users)?;
    write_predictions(&out, &table.keys, &data.raw, &predictions)?;
    Ok(format!(
        "predict {}: part={part} rows={} -> {}",
        model.family,
        predictions.len(),
        out.display()
    ))
}

fn write_report(out: &Path, eval: &hishrink::pipeline::Evaluation, keys: &[hishrink::features::RowKey]) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("report.txt"), eval.report.to_string())?;
    eval.report.write_csv(out.join("report.csv"))?;
    write_predictions(&out.join("predictions.csv"), keys, &eval.test.raw, &eval.predictions)
}

fn evaluate(a: crate::EvaluateArgs, file: &FileConfig) -> Result<String> {
    let dir = split_dir(&a.features, file)?;
    let out = require(a.out, file.out.clone(), "out")?;
    let split = dataset::read_split(&dir)?;
    let model = match pick(a.model, file.model.clone()) {
        Some(path) => ModelFile::load(&path)?,
        None => {
            let family = family_of(a.fit.family.clone(), file)?;
            let cfg = pipeline_config(family, &a.features, &a.fit, file)?;
            fit_split(&split, &cfg, &mut Vec::new())?.model
        }
    };
    let eval = evaluate_split(&model, &split, &mut Vec::new())?;
    let keys = build_features(&split, &model.feature_config)?.test.keys;
    write_report(&out, &eval, &keys)?;
    print!("{}", eval.report);
    Ok(format!(
        "evaluate {}: normalized MAE {:.3} (MAE {:.1}s, baseline {:.1}s, n={}) -> {}",
        model.family,
        eval.report.normalized_mae,
        eval.report.mae_seconds,
        eval.report.baseline_mae_seconds,
        eval.report.n_test,
        out.display()
    ))
}

fn report(a: crate::ReportArgs, file: &FileConfig) -> Result<String> {
    let dir = split_dir(&a.features, file)?;
    let out = require(a.out, file.out.clone(), "out")?;
    let families: Vec<Family> = match pick(a.families, file.families.clone()) {
        Some(list) => list
            .split(',')
            .map(|f| usage(f.trim().parse()))
            .collect::<Result<_>>()?,
        None => vec![
            Family::Baseline,
            Family::Model1,
            Family::Ridge,
            Family::Model2L2,
            Family::Model3L2,
        ],
    };
    let split = dataset::read_split(&dir)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut text = String::from("family       normalized_mae  mae_seconds  <q10    <q20    >=q20\n");
    let mut csv = String::from("family,normalized_mae,mae_seconds,lt_q10,lt_q20,ge_q20\n");
    let mut importance = String::from("family,feature,abs_coefficient\n");
    for family in &families {
        let cfg = pipeline_config(*family, &a.features, &a.fit, file)?;
        let run = run_pipeline(&split, &cfg)?;
        let r = &run.evaluation.report;
        let group = |i: usize| r.groups.get(i).and_then(|g| g.normalized_mae);
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |v| format!("{v:.3}"));
        writeln!(
            text,
            "{:<12} {:<15.3} {:<12.1} {:<7} {:<7} {}",
            family.tag(),
            r.normalized_mae,
            r.mae_seconds,
            cell(group(0)),
            cell(group(1)),
            cell(group(2))
        )?;
        let raw = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            family.tag(),
            r.normalized_mae,
            r.mae_seconds,
            raw(group(0)),
            raw(group(1)),
            raw(group(2))
        )?;
        if let Some(std) = &run.fit.model.standardizer {
            let names: Vec<String> = std.columns.iter().map(|c| c.name.clone()).collect();
            if let Ok(ranked) = predictor_importance(&run.fit.model.predictor, &names) {
                for (name, v) in ranked {
                    writeln!(importance, "{},{name},{v}", family.tag())?;
                }
            }
        }
    }
    fs::write(out.join("comparison.txt"), &text)?;
    fs::write(out.join("comparison.csv"), &csv)?;
    fs::write(out.join("importance.csv"), &importance)?;
    print!("{text}");
    Ok(format!("report: families={} -> {}", families.len(), out.display()))
}

fn simulate_cmd(a: crate::SimulateArgs, file: &FileConfig) -> Result<String> {
    let out = require(a.out, file.out.clone(), "out")?;
    let kind = pick(a.kind, file.kind.clone()).unwrap_or_else(|| "eq2".into());
    let default_beta = vec![0.5, -0.3, 0.2];
    let beta = list_arg(&a.beta, &file.beta)?;
    let (beta, corruption_rate) = match kind.as_str() {
        "eq2" => (Vec::new(), 0.0),
        "eq5" => (beta.unwrap_or(default_beta), 0.0),
        "eq11" => (
            beta.unwrap_or(default_beta),
            pick(a.corruption_rate, file.corruption_rate).unwrap_or(0.05),
        ),
        other => bail!(UsageError(format!(
            "unknown simulation kind `{other}`; expected eq2, eq5 or eq11"
        ))),
    };
    let defaults = SimConfig::default();
    let cfg = SimConfig {
        n_users: pick(a.users, file.users).unwrap_or(defaults.n_users),
        min_sessions: pick(a.min_sessions, file.min_sessions).unwrap_or(defaults.min_sessions),
        max_sessions: pick(a.max_sessions, file.max_sessions).unwrap_or(defaults.max_sessions),
        sigma0: pick(a.sigma0, file.sigma0).unwrap_or(defaults.sigma0),
        sigma1: pick(a.sigma1, file.sigma1).unwrap_or(defaults.sigma1),
        beta,
        corruption_rate,
        seed: pick(a.seed, file.seed).unwrap_or(0),
        ..defaults
    };
    let data = usage(simulate(&cfg))?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    data.write_csv(out.join("simulated.csv"))?;
    let sessions = data.to_sessions(600.0);
    dataset::write_sessions(out.join("sessions.csv"), sessions.iter())?;
    let corrupted = data.corrupted.iter().filter(|&&c| c).count();
    Ok(format!(
        "simulate {kind}: users={} rows={} covariates={} corrupted={corrupted} seed={} -> {}",
        cfg.n_users,
        data.n_rows(),
        cfg.beta.len(),
        cfg.seed,
        out.display()
    ))
}
