//! End-to-end glue: features, standardization, grid search on train/valid,
//! refit on train+valid and evaluation on test.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{SessionDataset, SplitDataset};
use crate::error::{Error, Result};
use crate::features::{build_features, fit_standardizer, DesignMatrix, FeatureConfig, FeatureTable, SplitFeatures};
use crate::gbt::GbtParams;
use crate::model_file::{Diagnostics, ModelFile, FORMAT_VERSION};
use crate::tuning::{
    baseline_fit, evaluate, fit_family, grid_search, EvalReport, Family, Grid, ModelData, SearchOptions, SearchResult,
};

/// Optional replacements for the default grid axes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GridOverrides {
    pub lambdas: Option<Vec<f64>>,
    pub alphas: Option<Vec<f64>>,
    pub deltas: Option<Vec<f64>>,
    pub gbt: Option<Vec<GbtParams>>,
}

impl GridOverrides {
    pub fn apply(&self, mut grid: Grid) -> Grid {
        if let Some(v) = &self.lambdas {
            grid.lambdas.clone_from(v);
        }
        if let Some(v) = &self.alphas {
            grid.alphas.clone_from(v);
        }
        if let Some(v) = &self.deltas {
            grid.deltas.clone_from(v);
        }
        if let Some(v) = &self.gbt {
            grid.gbt.clone_from(v);
        }
        grid
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub family: Family,
    pub features: FeatureConfig,
    pub grid: GridOverrides,
    pub search: SearchOptions,
    pub lognormal_correction: bool,
}

impl PipelineConfig {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            features: FeatureConfig::default(),
            grid: GridOverrides::default(),
            search: SearchOptions::default(),
            lognormal_correction: false,
        }
    }
}

/// Data-touching steps, recorded in the order they happen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    BuildFeatures,
    GridSearch,
    Refit,
    PredictTest,
}

/// Looks up each row's session to attach the response.
pub fn model_data(keys_from: &FeatureTable, x: DMatrix<f64>, sessions: &SessionDataset) -> Result<ModelData> {
    let lookup: HashMap<(&str, usize), (f64, f64)> = sessions
        .iter()
        .map(|s| ((s.user_id.as_str(), s.session_index), (s.log_length, s.raw_length)))
        .collect();
    let mut y_log = Vec::with_capacity(keys_from.n_rows());
    let mut raw = Vec::with_capacity(keys_from.n_rows());
    for k in &keys_from.keys {
        let &(l, r) = lookup
            .get(&(k.user_id.as_str(), k.session_index))
            .ok_or_else(|| Error::UnknownUser(format!("{} session {}", k.user_id, k.session_index)))?;
        y_log.push(l);
        raw.push(r);
    }
    let users = keys_from.keys.iter().map(|k| k.user_id.clone()).collect();
    ModelData::new(x, y_log, raw, users)
}

fn standardize(family: Family, table: &FeatureTable) -> Result<(Option<crate::features::Standardizer>, DMatrix<f64>)> {
    if family.uses_covariates() {
        let (std, DesignMatrix { x, .. }) = fit_standardizer(table)?;
        Ok((Some(std), x))
    } else {
        Ok((None, DMatrix::zeros(table.n_rows(), 0)))
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: ModelFile,
    pub search: SearchResult,
    pub features: SplitFeatures,
}

/// Selects hyperparameters on valid, then refits on train+valid. The test
/// part is never read here beyond feature construction.
pub fn fit_split(split: &SplitDataset, cfg: &PipelineConfig, log: &mut Vec<Stage>) -> Result<FitOutcome> {
    log.push(Stage::BuildFeatures);
    let features = build_features(split, &cfg.features)?;

    let (train_std, train_x) = standardize(cfg.family, &features.train)?;
    let train = model_data(&features.train, train_x, &split.train)?;
    let valid_x = match &train_std {
        Some(std) => crate::features::apply_standardizer(std, &features.valid)?.x,
        None => DMatrix::zeros(features.valid.n_rows(), 0),
    };
    let valid = model_data(&features.valid, valid_x, &split.valid)?;

    log.push(Stage::GridSearch);
    let grid = cfg.grid.apply(Grid::default_for(cfg.family, &train)?);
    let correction = if cfg.lognormal_correction {
        Some(train.variance_components()?.sigma1_sq)
    } else {
        None
    };
    let search_opts = SearchOptions {
        correction,
        ..cfg.search
    };
    let search = grid_search(cfg.family, &grid, &train, &valid, &search_opts)?;

    log.push(Stage::Refit);
    let both_table = features.train.concat(&features.valid)?;
    let both_sessions = split.train.union(&split.valid);
    let (std, both_x) = standardize(cfg.family, &both_table)?;
    let both = model_data(&both_table, both_x, &both_sessions)?;
    let predictor = fit_family(cfg.family, &search.best, &both, &cfg.search.bcd)?;
    let variance_components = both.variance_components().ok();
    let model = ModelFile {
        format_version: FORMAT_VERSION,
        family: cfg.family,
        feature_config: cfg.features.clone(),
        standardizer: std,
        global_mean: both.global_mean()?,
        variance_components,
        lognormal_correction: match (cfg.lognormal_correction, variance_components) {
            (true, Some(vc)) => Some(vc.sigma1_sq),
            _ => None,
        },
        predictor,
        diagnostics: Diagnostics {
            selected: search.best,
            valid_mae: Some(search.best_mae),
            grid_points: search.path.len(),
            failed_points: search.path.iter().filter(|e| e.error.is_some()).count(),
            train_rows: both.n_rows(),
        },
    };
    Ok(FitOutcome {
        model,
        search,
        features,
    })
}

/// Test-set predictions and the report against the train+valid baseline.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub test: ModelData,
    pub predictions: Vec<f64>,
}

pub fn evaluate_split(model: &ModelFile, split: &SplitDataset, log: &mut Vec<Stage>) -> Result<Evaluation> {
    let features = build_features(split, &model.feature_config)?;
    evaluate_features(model, split, &features, log)
}

pub fn evaluate_features(
    model: &ModelFile,
    split: &SplitDataset,
    features: &SplitFeatures,
    log: &mut Vec<Stage>,
) -> Result<Evaluation> {
    log.push(Stage::PredictTest);
    let test = model_data(&features.test, model.design(&features.test)?, &split.test)?;
    let history = split.train.union(&split.valid);
    let users: Vec<&str> = history.iter().map(|s| s.user_id.as_str()).collect();
    let raw: Vec<f64> = history.iter().map(|s| s.raw_length).collect();
    let baseline = baseline_fit(&users, &raw)?;
    let report = evaluate(
        model.family,
        &model.predictor,
        &baseline,
        &test,
        &history.session_counts(),
        model.lognormal_correction,
    )?;
    let predictions = model.predict_rows(&test.x, &test.users)?;
    Ok(Evaluation {
        report,
        test,
        predictions,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub fit: FitOutcome,
    pub evaluation: Evaluation,
    pub stages: Vec<Stage>,
}

pub fn run_pipeline(split: &SplitDataset, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let mut stages = Vec::new();
    let fit = fit_split(split, cfg, &mut stages)?;
    let evaluation = evaluate_features(&fit.model, split, &fit.features, &mut stages)?;
    Ok(PipelineOutput {
        fit,
        evaluation,
        stages,
    })
}
