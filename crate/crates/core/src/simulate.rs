//! Synthetic data from the three generative models:
//!
//! ```text
//! yᵢⱼ = μᵢ + εᵢⱼ                      user effects only
//! yᵢⱼ = xᵢⱼᵀβ + μᵢ + εᵢⱼ              with covariates
//! yᵢⱼ = xᵢⱼᵀβ + μᵢ + sᵢⱼ + εᵢⱼ        with sparse corruptions
//! ```
//!
//! with `μᵢ ~ N(0, σ₀²)`, `εᵢⱼ ~ N(0, σ₁²)` and `xᵢⱼ ~ N(0, I)`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Session, SessionDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_users: usize,
    pub min_sessions: usize,
    pub max_sessions: usize,
    pub sigma0: f64,
    pub sigma1: f64,
    /// Empty for the covariate-free model.
    pub beta: Vec<f64>,
    pub corruption_rate: f64,
    /// Corruption size in units of `σ₁`; corruptions are positive.
    pub corruption_scale: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_users: 1000,
            min_sessions: 1,
            max_sessions: 5,
            sigma0: 1.0,
            sigma1: 1.0,
            beta: Vec::new(),
            corruption_rate: 0.0,
            corruption_scale: 5.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.min_sessions == 0 || self.min_sessions > self.max_sessions {
            return Err(Error::InvalidArgument(
                "need users and 1 ≤ min_sessions ≤ max_sessions".into(),
            ));
        }
        if !(self.sigma0 >= 0.0 && self.sigma1 >= 0.0) {
            return Err(Error::InvalidArgument(
                "standard deviations must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return Err(Error::InvalidArgument("corruption rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Rows grouped by user, each user's rows in session order.
#[derive(Debug, Clone, PartialEq)]
pub struct SimData {
    pub user_ids: Vec<String>,
    pub session_index: Vec<usize>,
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub corrupted: Vec<bool>,
    /// True `μᵢ` for every row's user.
    pub true_effect: Vec<f64>,
}

pub fn simulate(cfg: &SimConfig) -> Result<SimData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let effect_dist = Normal::new(0.0, cfg.sigma0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let noise_dist = Normal::new(0.0, cfg.sigma1).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let d = cfg.beta.len();
    let width = cfg.n_users.to_string().len();

    let mut user_ids = Vec::new();
    let mut session_index = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut y = Vec::new();
    let mut corrupted = Vec::new();
    let mut true_effect = Vec::new();
    for u in 0..cfg.n_users {
        let id = format!("user_{u:0width$}");
        let mu = effect_dist.sample(&mut rng);
        let n = rng.random_range(cfg.min_sessions..=cfg.max_sessions);
        for j in 1..=n {
            let mut value = mu;
            for b in &cfg.beta {
                let xv: f64 = StandardNormal.sample(&mut rng);
                rows.push(xv);
                value += b * xv;
            }
            value += noise_dist.sample(&mut rng);
            let hit = cfg.corruption_rate > 0.0 && rng.random_bool(cfg.corruption_rate);
            if hit {
                value += cfg.corruption_scale * cfg.sigma1;
            }
            user_ids.push(id.clone());
            session_index.push(j);
            y.push(value);
            corrupted.push(hit);
            true_effect.push(mu);
        }
    }
    let x = DMatrix::from_row_slice(y.len(), d, &rows);
    Ok(SimData {
        user_ids,
        session_index,
        x,
        y,
        corrupted,
        true_effect,
    })
}

impl SimData {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    /// Sub-sample of the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> SimData {
        SimData {
            user_ids: rows.iter().map(|&i| self.user_ids[i].clone()).collect(),
            session_index: rows.iter().map(|&i| self.session_index[i]).collect(),
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            corrupted: rows.iter().map(|&i| self.corrupted[i]).collect(),
            true_effect: rows.iter().map(|&i| self.true_effect[i]).collect(),
        }
    }

    /// Splits off each user's last `k` rows; users with at most `k` rows
    /// contribute nothing to either side.
    pub fn holdout_last(&self, k: usize) -> (SimData, SimData) {
        let mut head = Vec::new();
        let mut tail = Vec::new();
        let mut start = 0;
        while start < self.n_rows() {
            let mut end = start;
            while end < self.n_rows() && self.user_ids[end] == self.user_ids[start] {
                end += 1;
            }
            if end - start > k {
                head.extend(start..end - k);
                tail.extend(end - k..end);
            }
            start = end;
        }
        (self.select(&head), self.select(&tail))
    }

    /// Per-user groups of responses in first-appearance order.
    pub fn groups(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        let mut ids: Vec<String> = Vec::new();
        let mut groups: Vec<Vec<f64>> = Vec::new();
        for (id, &v) in self.user_ids.iter().zip(&self.y) {
            if ids.last() != Some(id) {
                ids.push(id.clone());
                groups.push(Vec::new());
            }
            groups.last_mut().expect("pushed above").push(v);
        }
        (ids, groups)
    }

    /// Treats `y` as a centered log length around `ln(base_seconds)`; sessions
    /// start an hour apart per user.
    pub fn to_sessions(&self, base_seconds: f64) -> SessionDataset {
        let offset = base_seconds.ln();
        SessionDataset::from_sessions((0..self.n_rows()).map(|i| {
            let k = self.session_index[i];
            Session::new(
                self.user_ids[i].clone(),
                3600.0 * k as f64,
                (offset + self.y[i]).exp(),
                k,
            )
        }))
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![
            "user_id".to_owned(),
            "session_index".into(),
            "y".into(),
            "corrupted".into(),
        ];
        header.extend((0..self.x.ncols()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for i in 0..self.n_rows() {
            let mut rec = vec![
                self.user_ids[i].clone(),
                self.session_index[i].to_string(),
                self.y[i].to_string(),
                u8::from(self.corrupted[i]).to_string(),
            ];
            rec.extend(self.x.row(i).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
