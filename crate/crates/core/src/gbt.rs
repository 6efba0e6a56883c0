//! Least-squares gradient boosted regression trees with exact greedy splits.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbtParams {
    pub n_trees: usize,
    /// A depth of 0 fits single-leaf trees.
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    /// Stop after this many rounds without improvement on the held-out slice.
    #[serde(default)]
    pub patience: Option<usize>,
    /// Fraction of trailing rows held out when `patience` is set.
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
}

fn default_holdout() -> f64 {
    0.1
}

impl Default for GbtParams {
    fn default() -> Self {
        Self {
            n_trees: 50,
            max_depth: 6,
            learning_rate: 0.1,
            min_samples_leaf: 1,
            patience: None,
            holdout_fraction: default_holdout(),
        }
    }
}

impl GbtParams {
    pub fn new(n_trees: usize, max_depth: usize, learning_rate: f64) -> Self {
        Self {
            n_trees,
            max_depth,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::InvalidArgument("learning rate must lie in (0, 1]".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::InvalidArgument("min_samples_leaf must be positive".into()));
        }
        if self.patience.is_some() && !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::InvalidArgument("holdout fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go to `left`.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
        samples: usize,
    },
}

/// A binary tree stored as a flat node list; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value, .. } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }

    pub fn leaves(&self) -> impl Iterator<Item = (f64, usize)> + '_ {
        self.nodes.iter().filter_map(|n| match *n {
            Node::Leaf { value, samples } => Some((value, samples)),
            Node::Split { .. } => None,
        })
    }
}

struct Best {
    feature: usize,
    threshold: f64,
    gain: f64,
}

fn leaf_value(r: &[f64], rows: &[usize]) -> f64 {
    rows.iter().map(|&i| r[i]).sum::<f64>() / rows.len() as f64
}

fn best_split(x: &DMatrix<f64>, r: &[f64], rows: &[usize], min_leaf: usize) -> Option<Best> {
    let n = rows.len();
    if n < 2 * min_leaf {
        return None;
    }
    let total: f64 = rows.iter().map(|&i| r[i]).sum();
    let parent = total * total / n as f64;
    let mut best: Option<Best> = None;
    let mut sorted = rows.to_vec();
    for f in 0..x.ncols() {
        sorted.sort_by(|&a, &b| x[(a, f)].total_cmp(&x[(b, f)]).then(a.cmp(&b)));
        let mut left_sum = 0.0;
        for k in 0..n - 1 {
            left_sum += r[sorted[k]];
            let (lo, hi) = (x[(sorted[k], f)], x[(sorted[k + 1], f)]);
            let n_left = k + 1;
            if lo == hi || n_left < min_leaf || n - n_left < min_leaf {
                continue;
            }
            let right_sum = total - left_sum;
            let gain = left_sum * left_sum / n_left as f64 + right_sum * right_sum / (n - n_left) as f64 - parent;
            // strict improvement keeps the lowest feature, then lowest threshold
            if best.as_ref().is_none_or(|b| gain > b.gain) {
                let mut threshold = lo + (hi - lo) / 2.0;
                if threshold >= hi {
                    threshold = lo;
                }
                best = Some(Best {
                    feature: f,
                    threshold,
                    gain,
                });
            }
        }
    }
    let scale = rows.iter().map(|&i| r[i] * r[i]).sum::<f64>();
    best.filter(|b| b.gain > 1e-12 * scale.max(f64::MIN_POSITIVE))
}

/// Greedy top-down regression tree on residuals `r`; leaves hold residual means.
pub fn tree_fit(x: &DMatrix<f64>, r: &[f64], max_depth: usize, min_samples_leaf: usize) -> RegressionTree {
    let rows: Vec<usize> = (0..x.nrows()).collect();
    let mut tree = RegressionTree { nodes: Vec::new() };
    grow(x, r, rows, max_depth, min_samples_leaf.max(1), &mut tree);
    tree
}

fn grow(
    x: &DMatrix<f64>,
    r: &[f64],
    rows: Vec<usize>,
    depth_left: usize,
    min_leaf: usize,
    tree: &mut RegressionTree,
) -> usize {
    let at = tree.nodes.len();
    let leaf = Node::Leaf {
        value: if rows.is_empty() { 0.0 } else { leaf_value(r, &rows) },
        samples: rows.len(),
    };
    tree.nodes.push(leaf);
    if depth_left == 0 {
        return at;
    }
    let Some(split) = best_split(x, r, &rows, min_leaf) else {
        return at;
    };
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
        rows.iter().partition(|&&i| x[(i, split.feature)] <= split.threshold);
    let left = grow(x, r, left_rows, depth_left - 1, min_leaf, tree);
    let right = grow(x, r, right_rows, depth_left - 1, min_leaf, tree);
    tree.nodes[at] = Node::Split {
        feature: split.feature,
        threshold: split.threshold,
        left,
        right,
    };
    at
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub tree: RegressionTree,
    pub learning_rate: f64,
}

/// `base + Σₖ η·hₖ(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub base: f64,
    pub n_features: usize,
    pub stages: Vec<Stage>,
}

impl GbtModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut p = self.base;
        for s in &self.stages {
            p += s.learning_rate * s.tree.predict_row(row);
        }
        p
    }
}

/// A fitted ensemble plus the training-set bookkeeping maintained while boosting.
#[derive(Debug, Clone)]
pub struct GbtFit {
    pub model: GbtModel,
    /// Predictions on every training row after the final kept stage.
    pub train_predictions: Vec<f64>,
    /// Training squared error before any tree and after each kept round.
    pub sse_trace: Vec<f64>,
}

fn row_of(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
    x.row(i).iter().copied().collect()
}

pub fn gbt_fit(x: &DMatrix<f64>, z: &[f64], params: &GbtParams) -> Result<GbtFit> {
    params.validate()?;
    let n = x.nrows();
    if n == 0 || z.len() != n {
        return Err(Error::InvalidArgument(format!(
            "gbt needs matching non-empty data, got {n} rows and {} targets",
            z.len()
        )));
    }
    if z.iter().chain(x.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gbt input"));
    }
    let n_fit = match params.patience {
        Some(_) if n >= 2 => n - ((n as f64 * params.holdout_fraction).ceil() as usize).clamp(1, n - 1),
        _ => n,
    };
    let fit_x = x.rows(0, n_fit).into_owned();
    let base = z[..n_fit].iter().sum::<f64>() / n_fit as f64;
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row_of(x, i)).collect();
    let mut preds = vec![base; n];
    let sse = |p: &[f64], range: std::ops::Range<usize>| range.map(|i| (z[i] - p[i]).powi(2)).sum::<f64>();
    let mut model = GbtModel {
        base,
        n_features: x.ncols(),
        stages: Vec::new(),
    };
    let mut sse_trace = vec![sse(&preds, 0..n_fit)];
    let mut best_holdout = (sse(&preds, n_fit..n), 0usize, preds.clone());
    let mut stale = 0;
    for _ in 0..params.n_trees {
        let resid: Vec<f64> = (0..n_fit).map(|i| z[i] - preds[i]).collect();
        let mut tree = tree_fit(&fit_x, &resid, params.max_depth, params.min_samples_leaf);
        // residuals always have zero mean after the base, so a lone root leaf is
        // exactly zero; drop its rounding noise
        if let [Node::Leaf { value, .. }] = tree.nodes.as_mut_slice() {
            *value = 0.0;
        }
        for (p, row) in preds.iter_mut().zip(&rows) {
            *p += params.learning_rate * tree.predict_row(row);
        }
        model.stages.push(Stage {
            tree,
            learning_rate: params.learning_rate,
        });
        sse_trace.push(sse(&preds, 0..n_fit));
        if let Some(patience) = params.patience {
            let h = sse(&preds, n_fit..n);
            if h < best_holdout.0 {
                best_holdout = (h, model.stages.len(), preds.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    if params.patience.is_some() {
        let (_, keep, kept_preds) = best_holdout;
        model.stages.truncate(keep);
        sse_trace.truncate(keep + 1);
        preds = kept_preds;
    }
    Ok(GbtFit {
        model,
        train_predictions: preds,
        sse_trace,
    })
}

pub fn gbt_predict(model: &GbtModel, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    if x.ncols() != model.n_features {
        return Err(Error::SchemaMismatch(format!(
            "model expects {} features, got {}",
            model.n_features,
            x.ncols()
        )));
    }
    Ok((0..x.nrows()).map(|i| model.predict_row(&row_of(x, i))).collect())
}
