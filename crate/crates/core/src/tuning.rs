//! Model families, hyperparameter grids with warm-started paths, the
//! back-transform to seconds, and the evaluation metrics.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bcd::{bcd_fit_with, predict_log, BcdConfig, FitContext, FittedModel, OracleSpec, UserIndex};
use crate::error::{Error, Result};
use crate::gbt::GbtParams;
use crate::shrinkage::{model1_from_groups, variance_components_from_groups, Model1Fit, VarianceComponents};
use crate::solvers::{precompute_gram, GramFactorization};
use crate::stats::{linspace, logspace, ordered_sum, quantile};

/// The comparison ladder; tags are the command-line names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "model1")]
    Model1,
    #[serde(rename = "ridge")]
    Ridge,
    /// Boosted trees on covariates with `μ ≡ 0`.
    #[serde(rename = "gbt")]
    Gbt,
    #[serde(rename = "model2-l1")]
    Model2L1,
    #[serde(rename = "model2-l2")]
    Model2L2,
    #[serde(rename = "model2-gbt")]
    Model2Gbt,
    #[serde(rename = "model3-l2")]
    Model3L2,
    #[serde(rename = "model3-gbt")]
    Model3Gbt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LinkKind {
    None,
    Ridge,
    Lasso,
    Gbt,
}

impl Family {
    pub const ALL: [Family; 9] = [
        Family::Baseline,
        Family::Model1,
        Family::Ridge,
        Family::Gbt,
        Family::Model2L1,
        Family::Model2L2,
        Family::Model2Gbt,
        Family::Model3L2,
        Family::Model3Gbt,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Family::Baseline => "baseline",
            Family::Model1 => "model1",
            Family::Ridge => "ridge",
            Family::Gbt => "gbt",
            Family::Model2L1 => "model2-l1",
            Family::Model2L2 => "model2-l2",
            Family::Model2Gbt => "model2-gbt",
            Family::Model3L2 => "model3-l2",
            Family::Model3Gbt => "model3-gbt",
        }
    }

    fn link(self) -> LinkKind {
        match self {
            Family::Baseline | Family::Model1 => LinkKind::None,
            Family::Ridge | Family::Model2L2 | Family::Model3L2 => LinkKind::Ridge,
            Family::Model2L1 => LinkKind::Lasso,
            Family::Gbt | Family::Model2Gbt | Family::Model3Gbt => LinkKind::Gbt,
        }
    }

    pub fn uses_covariates(self) -> bool {
        self.link() != LinkKind::None
    }

    pub fn is_linear(self) -> bool {
        matches!(self.link(), LinkKind::Ridge | LinkKind::Lasso)
    }

    /// Joint fit with user effects.
    pub fn has_user_effects(self) -> bool {
        matches!(
            self,
            Family::Model2L1 | Family::Model2L2 | Family::Model2Gbt | Family::Model3L2 | Family::Model3Gbt
        )
    }

    /// Tunes a finite Huber threshold.
    pub fn is_robust(self) -> bool {
        matches!(self, Family::Model3L2 | Family::Model3Gbt)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.tag() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                let tags: Vec<&str> = Family::ALL.iter().map(|f| f.tag()).collect();
                Error::InvalidArgument(format!("unknown family {s:?}; expected one of {}", tags.join(", ")))
            })
    }
}

/// Row-aligned modelling inputs: standardized covariates, log lengths, raw
/// lengths in seconds and user ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelData {
    pub x: DMatrix<f64>,
    pub y_log: Vec<f64>,
    pub raw: Vec<f64>,
    pub users: Vec<String>,
}

impl ModelData {
    pub fn new(x: DMatrix<f64>, y_log: Vec<f64>, raw: Vec<f64>, users: Vec<String>) -> Result<Self> {
        let n = y_log.len();
        if x.nrows() != n || raw.len() != n || users.len() != n {
            return Err(Error::SchemaMismatch(format!(
                "{} design rows, {n} log lengths, {} raw lengths, {} user ids",
                x.nrows(),
                raw.len(),
                users.len()
            )));
        }
        if y_log.iter().chain(&raw).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("session lengths"));
        }
        Ok(Self { x, y_log, raw, users })
    }

    /// Raw lengths are `exp(y_log)`.
    pub fn from_log(x: DMatrix<f64>, y_log: Vec<f64>, users: Vec<String>) -> Result<Self> {
        let raw = y_log.iter().map(|v| v.exp()).collect();
        Self::new(x, y_log, raw, users)
    }

    pub fn n_rows(&self) -> usize {
        self.y_log.len()
    }

    pub fn concat(&self, other: &ModelData) -> Result<ModelData> {
        if self.x.ncols() != other.x.ncols() {
            return Err(Error::SchemaMismatch(format!(
                "cannot stack {} and {} covariates",
                self.x.ncols(),
                other.x.ncols()
            )));
        }
        let (n, m, d) = (self.n_rows(), other.n_rows(), self.x.ncols());
        let x = DMatrix::from_fn(
            n + m,
            d,
            |i, j| if i < n { self.x[(i, j)] } else { other.x[(i - n, j)] },
        );
        let cat = |a: &[f64], b: &[f64]| [a, b].concat();
        Ok(ModelData {
            x,
            y_log: cat(&self.y_log, &other.y_log),
            raw: cat(&self.raw, &other.raw),
            users: [self.users.as_slice(), other.users.as_slice()].concat(),
        })
    }

    /// Per-user log lengths, users in id order.
    pub fn groups(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        let mut map: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (u, &v) in self.users.iter().zip(&self.y_log) {
            map.entry(u).or_default().push(v);
        }
        map.into_iter().map(|(k, v)| (k.to_owned(), v)).unzip()
    }

    pub fn session_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for u in &self.users {
            *counts.entry(u.clone()).or_insert(0) += 1;
        }
        counts
    }

    /// Order-independent mean of the log lengths.
    pub fn global_mean(&self) -> Result<f64> {
        if self.n_rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(ordered_sum(self.y_log.iter().copied()) / self.n_rows() as f64)
    }

    pub fn variance_components(&self) -> Result<VarianceComponents> {
        variance_components_from_groups(&self.groups().1)
    }
}

/// Per-user mean of raw training lengths, falling back to the global mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub user_means: BTreeMap<String, f64>,
    pub global_mean: f64,
}

pub fn baseline_fit<S: AsRef<str>>(users: &[S], raw: &[f64]) -> Result<BaselineModel> {
    if raw.is_empty() || users.len() != raw.len() {
        return Err(Error::EmptyDataset);
    }
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (u, &v) in users.iter().zip(raw) {
        let e = sums.entry(u.as_ref().to_owned()).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    Ok(BaselineModel {
        user_means: sums.into_iter().map(|(u, (s, n))| (u, s / n as f64)).collect(),
        global_mean: raw.iter().sum::<f64>() / raw.len() as f64,
    })
}

impl BaselineModel {
    pub fn predict(&self, user_id: &str) -> f64 {
        self.user_means.get(user_id).copied().unwrap_or(self.global_mean)
    }
}

/// Back-transform of a centered log prediction: `exp(global_mean + log)`,
/// times `exp(σ₁²/2)` when a lognormal correction is requested.
pub fn to_seconds(global_mean: f64, centered_log: f64, correction: Option<f64>) -> f64 {
    let base = (global_mean + centered_log).exp();
    match correction {
        Some(sigma1_sq) => base * (sigma1_sq / 2.0).exp(),
        None => base,
    }
}

pub fn predict_seconds(model: &FittedModel, x: &[f64], user_id: &str, correction: Option<f64>) -> Result<f64> {
    Ok(to_seconds(
        model.global_mean,
        predict_log(model, x, user_id)?,
        correction,
    ))
}

/// A fitted model of any family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum Predictor {
    Baseline(BaselineModel),
    Model1(Model1Fit),
    Map(FittedModel),
}

impl Predictor {
    pub fn predict_seconds(&self, row: &[f64], user_id: &str, correction: Option<f64>) -> Result<f64> {
        match self {
            Predictor::Baseline(b) => Ok(b.predict(user_id)),
            Predictor::Model1(m) => Ok(to_seconds(m.predict_or_mean(user_id), 0.0, correction)),
            Predictor::Map(m) => predict_seconds(m, row, user_id, correction),
        }
    }

    pub fn predict_all(&self, data: &ModelData, correction: Option<f64>) -> Result<Vec<f64>> {
        let mut row = vec![0.0; data.x.ncols()];
        (0..data.n_rows())
            .map(|i| {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = data.x[(i, j)];
                }
                self.predict_seconds(&row, &data.users[i], correction)
            })
            .collect()
    }

    pub fn coefficients(&self) -> Option<&[f64]> {
        match self {
            Predictor::Map(m) => m.coefficients(),
            _ => None,
        }
    }

    pub fn fitted_map(&self) -> Option<&FittedModel> {
        match self {
            Predictor::Map(m) => Some(m),
            _ => None,
        }
    }
}

pub fn mae(predictions: &[f64], actual: &[f64]) -> Result<f64> {
    if predictions.len() != actual.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} actual values",
            predictions.len(),
            actual.len()
        )));
    }
    if actual.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(predictions.iter().zip(actual).map(|(p, a)| (p - a).abs()).sum::<f64>() / actual.len() as f64)
}

pub fn normalized_mae(model_preds: &[f64], baseline_preds: &[f64], actual: &[f64]) -> Result<f64> {
    let base = mae(baseline_preds, actual)?;
    if base == 0.0 {
        return Err(Error::InvalidArgument("baseline MAE is zero".into()));
    }
    Ok(mae(model_preds, actual)? / base)
}

/// One activity group of the breakdown.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupScore {
    pub label: &'static str,
    pub n_sessions: usize,
    /// `None` for an empty group.
    pub normalized_mae: Option<f64>,
}

/// `(q₁₀, q₂₀)` of the per-user training session counts.
pub fn activity_cutoffs(train_counts: &BTreeMap<String, usize>) -> Option<(f64, f64)> {
    let counts: Vec<f64> = train_counts.values().map(|&c| c as f64).collect();
    Some((quantile(&counts, 0.1)?, quantile(&counts, 0.2)?))
}

/// Normalized MAE within `< q₁₀`, the cumulative `< q₂₀` and `≥ q₂₀`
/// groups of training activity. Users absent from `train_counts` count zero.
pub fn decile_breakdown(
    model_preds: &[f64],
    baseline_preds: &[f64],
    actual: &[f64],
    users: &[String],
    train_counts: &BTreeMap<String, usize>,
) -> Result<Vec<GroupScore>> {
    if users.len() != actual.len() {
        return Err(Error::InvalidArgument("users and predictions are not aligned".into()));
    }
    let (q10, q20) = activity_cutoffs(train_counts).ok_or(Error::EmptyDataset)?;
    let activity: Vec<f64> = users
        .iter()
        .map(|u| train_counts.get(u).copied().unwrap_or(0) as f64)
        .collect();
    // half-open activity bounds lo <= c < hi
    let groups = [
        ("<q10", f64::NEG_INFINITY, q10),
        ("<q20", f64::NEG_INFINITY, q20),
        (">=q20", q20, f64::INFINITY),
    ];
    groups
        .iter()
        .map(|&(label, lo, hi)| {
            let rows: Vec<usize> = (0..actual.len())
                .filter(|&i| lo <= activity[i] && activity[i] < hi)
                .collect();
            let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let score = if rows.is_empty() {
                None
            } else {
                Some(normalized_mae(
                    &pick(model_preds),
                    &pick(baseline_preds),
                    &pick(actual),
                )?)
            };
            Ok(GroupScore {
                label,
                n_sessions: rows.len(),
                normalized_mae: score,
            })
        })
        .collect()
}

/// Features ranked by `|β|` descending, ties by name.
pub fn feature_importance(beta: &[f64], names: &[String]) -> Result<Vec<(String, f64)>> {
    if beta.len() != names.len() {
        return Err(Error::SchemaMismatch(format!(
            "{} coefficients for {} names",
            beta.len(),
            names.len()
        )));
    }
    let mut ranked: Vec<(String, f64)> = names.iter().cloned().zip(beta.iter().map(|b| b.abs())).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked)
}

pub fn predictor_importance(predictor: &Predictor, names: &[String]) -> Result<Vec<(String, f64)>> {
    let beta = predictor
        .coefficients()
        .ok_or_else(|| Error::Unsupported("feature importance needs a linear model".into()))?;
    feature_importance(beta, names)
}

/// One hyperparameter setting; unused axes are `None`. `delta = None` means
/// `δ = ∞`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub delta: Option<f64>,
    pub gbt: Option<GbtParams>,
}

impl GridPoint {
    fn delta_value(&self) -> f64 {
        self.delta.unwrap_or(f64::INFINITY)
    }
}

impl fmt::Display for GridPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(l) = self.lambda {
            parts.push(format!("lambda={l:.6}"));
        }
        if let Some(a) = self.alpha {
            parts.push(format!("alpha={a:.6e}"));
        }
        if let Some(d) = self.delta {
            parts.push(format!("delta={d:.4}"));
        }
        if let Some(g) = self.gbt {
            parts.push(format!(
                "trees={} depth={} eta={}",
                g.n_trees, g.max_depth, g.learning_rate
            ));
        }
        if parts.is_empty() {
            f.write_str("(none)")
        } else {
            f.write_str(&parts.join(" "))
        }
    }
}

/// Hyperparameter values per axis; axes a family does not use are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub deltas: Vec<f64>,
    pub gbt: Vec<GbtParams>,
}

/// Largest useful penalty: `max(2‖Xᵀ(y − ȳ)‖∞, γ_max)`.
pub fn alpha_max(x: &DMatrix<f64>, y_log: &[f64], gram: &GramFactorization) -> f64 {
    let mean = y_log.iter().sum::<f64>() / y_log.len().max(1) as f64;
    let centered = DVector::from_iterator(y_log.len(), y_log.iter().map(|v| v - mean));
    let corr = 2.0 * x.tr_mul(&centered).amax();
    let gamma = gram.eigenvalues.iter().copied().fold(0.0, f64::max);
    corr.max(gamma).max(f64::MIN_POSITIVE)
}

impl Grid {
    /// The default search space for `family` on the given training data.
    pub fn default_for(family: Family, train: &ModelData) -> Result<Grid> {
        let mut grid = Grid {
            lambdas: Vec::new(),
            alphas: Vec::new(),
            deltas: Vec::new(),
            gbt: Vec::new(),
        };
        if family.has_user_effects() {
            grid.lambdas = if family.link() == LinkKind::Gbt {
                linspace(1.0, 10.0, 10)
            } else {
                let lambda_hat = train.variance_components()?.lambda();
                logspace(lambda_hat / 10.0, lambda_hat * 10.0, 10)
            };
        }
        if family.is_linear() {
            let gram = precompute_gram(&train.x)?;
            let top = alpha_max(&train.x, &train.y_log, &gram);
            grid.alphas = logspace(top * 1e-4, top, 50);
        }
        if family.is_robust() {
            grid.deltas = logspace(0.1, 10.0, 7);
        }
        if family.link() == LinkKind::Gbt {
            for n_trees in [10, 15, 50, 100] {
                for depth in [6, 10] {
                    for eta in [0.1, 0.05] {
                        grid.gbt.push(GbtParams::new(n_trees, depth, eta));
                    }
                }
            }
        }
        Ok(grid)
    }

    /// Warm-start chains: each chain fixes every axis except `α`, which runs
    /// in descending order. Duplicates are removed.
    pub fn chains(&self, family: Family) -> Result<Vec<Vec<GridPoint>>> {
        fn axis(values: &[f64], used: bool, name: &str) -> Result<Vec<Option<f64>>> {
            if !used {
                return Ok(vec![None]);
            }
            if values.is_empty() || values.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "{name} grid must be non-empty and positive"
                )));
            }
            let mut v = values.to_vec();
            v.sort_by(|a, b| b.total_cmp(a));
            v.dedup();
            Ok(v.into_iter().map(Some).collect())
        }
        let lambdas = axis(&self.lambdas, family.has_user_effects(), "lambda")?;
        let alphas = axis(&self.alphas, family.is_linear(), "alpha")?;
        let deltas = axis(&self.deltas, family.is_robust(), "delta")?;
        let gbts: Vec<Option<GbtParams>> = if family.link() == LinkKind::Gbt {
            if self.gbt.is_empty() {
                return Err(Error::InvalidArgument("boosting grid must be non-empty".into()));
            }
            let mut out: Vec<GbtParams> = Vec::new();
            for p in &self.gbt {
                p.validate()?;
                if !out.contains(p) {
                    out.push(*p);
                }
            }
            out.into_iter().map(Some).collect()
        } else {
            vec![None]
        };
        let mut chains = Vec::new();
        for &lambda in &lambdas {
            for &delta in &deltas {
                for &gbt in &gbts {
                    chains.push(
                        alphas
                            .iter()
                            .map(|&alpha| GridPoint {
                                lambda,
                                alpha,
                                delta,
                                gbt,
                            })
                            .collect(),
                    );
                }
            }
        }
        Ok(chains)
    }

    pub fn len(&self, family: Family) -> Result<usize> {
        Ok(self.chains(family)?.iter().map(Vec::len).sum())
    }

    pub fn is_empty(&self, family: Family) -> Result<bool> {
        Ok(self.len(family)? == 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    pub warm_start: bool,
    /// Stopping rule and iteration cap for every fit; `λ`, `δ` and the
    /// user-effect switch are overridden per grid point.
    pub bcd: BcdConfig,
    /// `σ₁²` for the lognormal back-transform, if enabled.
    pub correction: Option<f64>,
    /// Worker threads for independent chains; 0 means available parallelism.
    pub threads: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            warm_start: true,
            bcd: BcdConfig::default(),
            correction: None,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathEntry {
    pub point: GridPoint,
    pub valid_mae: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub family: Family,
    pub best: GridPoint,
    pub best_mae: f64,
    pub path: Vec<PathEntry>,
}

impl SearchResult {
    pub fn write_path_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "lambda",
            "alpha",
            "delta",
            "n_trees",
            "max_depth",
            "learning_rate",
            "valid_mae",
            "iterations",
            "converged",
            "error",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.path {
            let g = e.point.gbt;
            w.write_record([
                opt(e.point.lambda),
                opt(e.point.alpha),
                e.point.delta.map_or_else(|| "inf".to_owned(), |d| d.to_string()),
                g.map(|g| g.n_trees.to_string()).unwrap_or_default(),
                g.map(|g| g.max_depth.to_string()).unwrap_or_default(),
                g.map(|g| g.learning_rate.to_string()).unwrap_or_default(),
                opt(e.valid_mae),
                e.iterations.to_string(),
                e.converged.to_string(),
                e.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Cached per-dataset state shared by every fit on the same rows.
struct FitInputs<'a> {
    data: &'a ModelData,
    users: UserIndex,
    centered: Vec<f64>,
    global_mean: f64,
    gram: Option<GramFactorization>,
}

impl<'a> FitInputs<'a> {
    fn new(family: Family, data: &'a ModelData) -> Result<Self> {
        let global_mean = data.global_mean()?;
        Ok(Self {
            data,
            users: UserIndex::from_rows(&data.users),
            centered: data.y_log.iter().map(|v| v - global_mean).collect(),
            global_mean,
            gram: if family.is_linear() {
                Some(precompute_gram(&data.x)?)
            } else {
                None
            },
        })
    }
}

fn oracle_for(family: Family, point: &GridPoint) -> Result<OracleSpec> {
    let missing = |axis: &str| Error::InvalidArgument(format!("{family} needs a value for {axis}"));
    Ok(match family.link() {
        LinkKind::None => OracleSpec::None,
        LinkKind::Ridge => OracleSpec::Ridge {
            alpha: point.alpha.ok_or_else(|| missing("alpha"))?,
        },
        LinkKind::Lasso => OracleSpec::Lasso {
            alpha: point.alpha.ok_or_else(|| missing("alpha"))?,
        },
        LinkKind::Gbt => OracleSpec::Gbt(point.gbt.ok_or_else(|| missing("boosting parameters"))?),
    })
}

fn fit_with(
    family: Family,
    point: &GridPoint,
    inputs: &FitInputs<'_>,
    base: &BcdConfig,
    warm: Option<&FittedModel>,
) -> Result<Predictor> {
    let data = inputs.data;
    match family {
        Family::Baseline => return Ok(Predictor::Baseline(baseline_fit(&data.users, &data.raw)?)),
        Family::Model1 => {
            let (ids, groups) = data.groups();
            let vc = variance_components_from_groups(&groups)?;
            return Ok(Predictor::Model1(model1_from_groups(&ids, &groups, &vc)?));
        }
        _ => {}
    }
    let cfg = BcdConfig {
        lambda: if family.has_user_effects() {
            point
                .lambda
                .ok_or_else(|| Error::InvalidArgument(format!("{family} needs a value for lambda")))?
        } else {
            1.0
        },
        delta: if family.is_robust() {
            point
                .delta
                .ok_or_else(|| Error::InvalidArgument(format!("{family} needs a value for delta")))?
        } else {
            f64::INFINITY
        },
        user_effects: family.has_user_effects(),
        ..*base
    };
    let ctx = FitContext {
        gram: inputs.gram.as_ref(),
        warm_start: warm,
    };
    let mut model = bcd_fit_with(
        &data.x,
        &inputs.centered,
        &inputs.users,
        oracle_for(family, point)?,
        &cfg,
        ctx,
    )?;
    model.global_mean = inputs.global_mean;
    Ok(Predictor::Map(model))
}

/// Fits one grid point of `family` on `data`.
pub fn fit_family(family: Family, point: &GridPoint, data: &ModelData, base: &BcdConfig) -> Result<Predictor> {
    fit_with(family, point, &FitInputs::new(family, data)?, base, None)
}

/// Orders candidates: lower validation MAE, then larger `α`, larger `λ`,
/// smaller `δ`, then grid order.
fn better(a: (&GridPoint, f64, usize), b: (&GridPoint, f64, usize)) -> bool {
    let key = |p: &GridPoint| (p.alpha.unwrap_or(0.0), p.lambda.unwrap_or(0.0), p.delta_value());
    let ((pa, ma, ia), (pb, mb, ib)) = (a, b);
    let (ka, kb) = (key(pa), key(pb));
    let ord = ma
        .total_cmp(&mb)
        .then_with(|| kb.0.total_cmp(&ka.0))
        .then_with(|| kb.1.total_cmp(&ka.1))
        .then_with(|| ka.2.total_cmp(&kb.2))
        .then_with(|| ia.cmp(&ib));
    ord == Ordering::Less
}

fn run_chain(
    family: Family,
    chain: &[GridPoint],
    inputs: &FitInputs<'_>,
    valid: &ModelData,
    opts: &SearchOptions,
) -> Vec<PathEntry> {
    let mut warm: Option<FittedModel> = None;
    chain
        .iter()
        .map(|point| {
            let fitted = fit_with(
                family,
                point,
                inputs,
                &opts.bcd,
                warm.as_ref().filter(|_| opts.warm_start),
            );
            let scored = fitted.and_then(|p| {
                let preds = p.predict_all(valid, opts.correction)?;
                Ok((mae(&preds, &valid.raw)?, p))
            });
            match scored {
                Ok((valid_mae, predictor)) => {
                    let (iterations, converged) = predictor
                        .fitted_map()
                        .map_or((0, true), |m| (m.iterations, m.converged));
                    if let Predictor::Map(m) = predictor {
                        warm = Some(m);
                    }
                    PathEntry {
                        point: *point,
                        valid_mae: Some(valid_mae),
                        iterations,
                        converged,
                        error: None,
                    }
                }
                Err(e) => PathEntry {
                    point: *point,
                    valid_mae: None,
                    iterations: 0,
                    converged: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Fits every grid point on `train`, scores it by validation MAE in seconds
/// and returns the winner with the full path.
pub fn grid_search(
    family: Family,
    grid: &Grid,
    train: &ModelData,
    valid: &ModelData,
    opts: &SearchOptions,
) -> Result<SearchResult> {
    if valid.n_rows() == 0 {
        return Err(Error::EmptySplit("valid"));
    }
    let chains = grid.chains(family)?;
    let inputs = FitInputs::new(family, train)?;
    let threads = match opts.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        t => t,
    }
    .min(chains.len())
    .max(1);

    let mut results: Vec<Option<Vec<PathEntry>>> = vec![None; chains.len()];
    if threads == 1 {
        for (slot, chain) in results.iter_mut().zip(&chains) {
            *slot = Some(run_chain(family, chain, &inputs, valid, opts));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let (chains, inputs) = (&chains, &inputs);
                    scope.spawn(move || {
                        (t..chains.len())
                            .step_by(threads)
                            .map(|c| (c, run_chain(family, &chains[c], inputs, valid, opts)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (c, entries) in h.join().expect("grid worker panicked") {
                    results[c] = Some(entries);
                }
            }
        });
    }
    let path: Vec<PathEntry> = results.into_iter().flatten().flatten().collect();

    let mut best: Option<(usize, f64)> = None;
    for (i, e) in path.iter().enumerate() {
        let Some(m) = e.valid_mae else { continue };
        let wins = match best {
            None => true,
            Some((j, bm)) => better((&e.point, m, i), (&path[j].point, bm, j)),
        };
        if wins {
            best = Some((i, m));
        }
    }
    let (idx, best_mae) = best.ok_or(Error::AllFitsFailed)?;
    Ok(SearchResult {
        family,
        best: path[idx].point,
        best_mae,
        path,
    })
}

/// Held-out evaluation of one model against the baseline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub family: Family,
    pub n_test: usize,
    pub mae_seconds: f64,
    pub baseline_mae_seconds: f64,
    pub normalized_mae: f64,
    pub cutoffs: (f64, f64),
    pub groups: Vec<GroupScore>,
}

pub fn evaluate(
    family: Family,
    predictor: &Predictor,
    baseline: &BaselineModel,
    test: &ModelData,
    train_counts: &BTreeMap<String, usize>,
    correction: Option<f64>,
) -> Result<EvalReport> {
    if test.n_rows() == 0 {
        return Err(Error::EmptySplit("test"));
    }
    let preds = predictor.predict_all(test, correction)?;
    let base: Vec<f64> = test.users.iter().map(|u| baseline.predict(u)).collect();
    Ok(EvalReport {
        family,
        n_test: test.n_rows(),
        mae_seconds: mae(&preds, &test.raw)?,
        baseline_mae_seconds: mae(&base, &test.raw)?,
        normalized_mae: normalized_mae(&preds, &base, &test.raw)?,
        cutoffs: activity_cutoffs(train_counts).ok_or(Error::EmptyDataset)?,
        groups: decile_breakdown(&preds, &base, &test.raw, &test.users, train_counts)?,
    })
}

impl EvalReport {
    pub fn csv_string(&self) -> String {
        let mut out = String::from("family,group,n_sessions,mae_seconds,normalized_mae\n");
        out.push_str(&format!(
            "{},all,{},{},{}\n",
            self.family, self.n_test, self.mae_seconds, self.normalized_mae
        ));
        for g in &self.groups {
            out.push_str(&format!(
                "{},{},{},,{}\n",
                self.family,
                g.label,
                g.n_sessions,
                g.normalized_mae.map(|v| v.to_string()).unwrap_or_default()
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.csv_string()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "family            {}", self.family)?;
        writeln!(f, "test sessions     {}", self.n_test)?;
        writeln!(f, "MAE (s)           {:.3}", self.mae_seconds)?;
        writeln!(f, "baseline MAE (s)  {:.3}", self.baseline_mae_seconds)?;
        writeln!(f, "normalized MAE    {:.3}", self.normalized_mae)?;
        writeln!(
            f,
            "activity cutoffs  q10={:.2} q20={:.2}",
            self.cutoffs.0, self.cutoffs.1
        )?;
        for g in &self.groups {
            match g.normalized_mae {
                Some(v) => writeln!(f, "  {:<6} n={:<6} {:.3}", g.label, g.n_sessions, v)?,
                None => writeln!(f, "  {:<6} n={:<6} absent", g.label, g.n_sessions)?,
            }
        }
        Ok(())
    }
}
