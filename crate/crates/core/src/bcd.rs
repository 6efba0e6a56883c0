//! Block coordinate descent for the joint MAP objective
//!
//! ```text
//! L(f, μ, s) = Σᵢ { Σⱼ (yᵢⱼ − f(xᵢⱼ) − μᵢ − sᵢⱼ)² + λμᵢ² } + Ω(f) + 2δ Σᵢⱼ |sᵢⱼ|
//! ```
//!
//! alternating an oracle fit of the link `f`, a closed-form update of the user
//! effects `μ`, and soft-thresholding of the sparse corruptions `s`. With
//! `δ = ∞` the corruption block vanishes; minimizing over `s` for finite `δ`
//! is the same as fitting a Huber loss on the residuals.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbt::{gbt_fit, GbtModel, GbtParams};
use crate::solvers::{lasso_solve, precompute_gram, ridge_solve, soft_threshold, GramFactorization, LassoOptions};

/// Maps each training row to its user slot.
#[derive(Debug, Clone, PartialEq)]
pub struct UserIndex {
    ids: Vec<String>,
    row_user: Vec<usize>,
    counts: Vec<usize>,
    lookup: HashMap<String, usize>,
}

impl UserIndex {
    /// Users are numbered in order of first appearance.
    pub fn from_rows<S: AsRef<str>>(rows: &[S]) -> Self {
        let mut ids = Vec::new();
        let mut lookup = HashMap::new();
        let mut counts = Vec::new();
        let row_user = rows
            .iter()
            .map(|r| {
                let id = r.as_ref();
                let slot = *lookup.entry(id.to_owned()).or_insert_with(|| {
                    ids.push(id.to_owned());
                    counts.push(0);
                    ids.len() - 1
                });
                counts[slot] += 1;
                slot
            })
            .collect();
        Self {
            ids,
            row_user,
            counts,
            lookup,
        }
    }

    pub fn n_users(&self) -> usize {
        self.ids.len()
    }

    pub fn n_rows(&self) -> usize {
        self.row_user.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row_user(&self) -> &[usize] {
        &self.row_user
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn position(&self, user_id: &str) -> Option<usize> {
        self.lookup.get(user_id).copied()
    }
}

/// Which regression procedure fits the link `f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleSpec {
    /// `f ≡ 0`: user effects only.
    None,
    Ridge {
        alpha: f64,
    },
    Lasso {
        alpha: f64,
    },
    Gbt(GbtParams),
}

impl OracleSpec {
    fn is_linear(&self) -> bool {
        matches!(self, OracleSpec::Ridge { .. } | OracleSpec::Lasso { .. })
    }

    fn validate(&self) -> Result<()> {
        match *self {
            OracleSpec::Ridge { alpha } | OracleSpec::Lasso { alpha } if !(alpha > 0.0) => {
                Err(Error::InvalidArgument("oracle penalty must be positive".into()))
            }
            OracleSpec::Gbt(p) => p.validate(),
            _ => Ok(()),
        }
    }
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BcdConfig {
    /// User-effect penalty `λ = σ₁²/σ₀²`.
    pub lambda: f64,
    /// Huber threshold; infinity disables the corruption block.
    #[serde(with = "inf_as_null")]
    pub delta: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    /// When false, `μ ≡ 0` (covariates-only models).
    pub user_effects: bool,
    pub lasso_tol: f64,
}

impl Default for BcdConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            delta: f64::INFINITY,
            epsilon: 0.01,
            max_iters: 100,
            user_effects: true,
            lasso_tol: 1e-8,
        }
    }
}

impl BcdConfig {
    pub fn new(lambda: f64, delta: f64) -> Self {
        Self {
            lambda,
            delta,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidArgument("lambda must be positive".into()));
        }
        if !(self.delta > 0.0) {
            return Err(Error::InvalidArgument("delta must be positive".into()));
        }
        if !(self.epsilon > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidArgument(
                "epsilon must be positive and max_iters at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// The fitted link function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Link {
    Zero,
    Linear { beta: Vec<f64> },
    Gbt(GbtModel),
}

impl Link {
    pub fn n_features(&self) -> Option<usize> {
        match self {
            Link::Zero => None,
            Link::Linear { beta } => Some(beta.len()),
            Link::Gbt(m) => Some(m.n_features),
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> Result<f64> {
        if let Some(d) = self.n_features() {
            if row.len() != d {
                return Err(Error::SchemaMismatch(format!(
                    "expected {d} covariates, got {}",
                    row.len()
                )));
            }
        }
        Ok(match self {
            Link::Zero => 0.0,
            Link::Linear { beta } => beta.iter().zip(row).map(|(b, x)| b * x).sum(),
            Link::Gbt(m) => m.predict_row(row),
        })
    }
}

/// Output of [`bcd_fit`]: everything needed to predict on the centered scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub link: Link,
    pub oracle: OracleSpec,
    pub user_effects: BTreeMap<String, f64>,
    /// Corruptions aligned with the training rows; not used for prediction.
    pub corruptions: Vec<f64>,
    /// Added back by callers that work on uncentered data.
    pub global_mean: f64,
    pub config: BcdConfig,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl FittedModel {
    pub fn user_effect(&self, user_id: &str) -> f64 {
        self.user_effects.get(user_id).copied().unwrap_or(0.0)
    }

    pub fn coefficients(&self) -> Option<&[f64]> {
        match &self.link {
            Link::Linear { beta } => Some(beta),
            _ => None,
        }
    }
}

/// Centered log-length prediction `f̂(x) + μ̂(user)`; unknown users get `μ = 0`.
pub fn predict_log(model: &FittedModel, row: &[f64], user_id: &str) -> Result<f64> {
    Ok(model.link.predict_row(row)? + model.user_effect(user_id))
}

/// `H_δ(a)`: `a²` for `|a| ≤ δ`, else `δ(2|a| − δ)`.
pub fn huber(a: f64, delta: f64) -> f64 {
    if a.abs() <= delta {
        a * a
    } else {
        delta * (2.0 * a.abs() - delta)
    }
}

/// The joint objective. The `2δΣ|s|` term is skipped when `δ = ∞` (then `s`
/// must be zero).
#[allow(clippy::too_many_arguments)]
pub fn objective(
    y: &[f64],
    users: &UserIndex,
    f_preds: &[f64],
    mu: &[f64],
    s: &[f64],
    lambda: f64,
    delta: f64,
    omega: f64,
) -> f64 {
    let mut fit = 0.0;
    let mut l1 = 0.0;
    for (i, &u) in users.row_user.iter().enumerate() {
        let e = y[i] - f_preds[i] - mu[u] - s[i];
        fit += e * e;
        l1 += s[i].abs();
    }
    let ridge: f64 = mu.iter().map(|m| m * m).sum();
    let mut total = fit + lambda * ridge + omega;
    if delta.is_finite() {
        total += 2.0 * delta * l1;
    }
    total
}

/// The same objective with `s` minimized out: Huber loss on the residuals.
pub fn huber_objective(
    y: &[f64],
    users: &UserIndex,
    f_preds: &[f64],
    mu: &[f64],
    lambda: f64,
    delta: f64,
    omega: f64,
) -> f64 {
    let loss: f64 = users
        .row_user
        .iter()
        .enumerate()
        .map(|(i, &u)| huber(y[i] - f_preds[i] - mu[u], delta))
        .sum();
    loss + lambda * mu.iter().map(|m| m * m).sum::<f64>() + omega
}

/// `μᵢ = Σⱼ (rᵢⱼ − sᵢⱼ) / (nᵢ + λ)`.
pub fn mu_step(r: &[f64], s: &[f64], users: &UserIndex, lambda: f64) -> Vec<f64> {
    let mut sums = vec![0.0; users.n_users()];
    for (i, &u) in users.row_user.iter().enumerate() {
        sums[u] += r[i] - s[i];
    }
    sums.iter()
        .zip(&users.counts)
        .map(|(sum, &n)| sum / (n as f64 + lambda))
        .collect()
}

/// `sᵢⱼ = S_δ(rᵢⱼ − μᵢ)`; all zeros when `δ = ∞`.
pub fn s_step(r: &[f64], mu: &[f64], users: &UserIndex, delta: f64) -> Vec<f64> {
    if delta.is_infinite() {
        return vec![0.0; r.len()];
    }
    users
        .row_user
        .iter()
        .enumerate()
        .map(|(i, &u)| soft_threshold(r[i] - mu[u], delta))
        .collect()
}

/// Optional state carried between related fits.
#[derive(Debug, Clone, Copy, Default)]
pub struct FitContext<'a> {
    /// Cached factorization of `XᵀX` for linear oracles.
    pub gram: Option<&'a GramFactorization>,
    /// Previous solution on the same rows; seeds `μ`, `s` and the lasso `β`.
    pub warm_start: Option<&'a FittedModel>,
}

pub fn bcd_fit(
    x: &DMatrix<f64>,
    y: &[f64],
    users: &UserIndex,
    oracle: OracleSpec,
    cfg: &BcdConfig,
) -> Result<FittedModel> {
    bcd_fit_with(x, y, users, oracle, cfg, FitContext::default())
}

/// Relative slack tolerated before a linear-oracle objective rise is reported.
const MONOTONE_SLACK: f64 = 1e-10;

pub fn bcd_fit_with(
    x: &DMatrix<f64>,
    y: &[f64],
    users: &UserIndex,
    oracle: OracleSpec,
    cfg: &BcdConfig,
    ctx: FitContext<'_>,
) -> Result<FittedModel> {
    cfg.validate()?;
    oracle.validate()?;
    let n = y.len();
    if x.nrows() != n || users.n_rows() != n {
        return Err(Error::SchemaMismatch(format!(
            "{} design rows, {n} responses, {} indexed rows",
            x.nrows(),
            users.n_rows()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("response"));
    }

    let owned_gram;
    let gram = match (oracle.is_linear(), ctx.gram) {
        (false, _) => None,
        (true, Some(g)) if g.dim() == x.ncols() => Some(g),
        (true, _) => {
            owned_gram = precompute_gram(x)?;
            Some(&owned_gram)
        }
    };

    let mut mu = vec![0.0; users.n_users()];
    let mut s = vec![0.0; n];
    let mut beta_prev: Option<DVector<f64>> = None;
    if let Some(w) = ctx.warm_start {
        if cfg.user_effects {
            for (slot, id) in users.ids().iter().enumerate() {
                mu[slot] = w.user_effect(id);
            }
        }
        if cfg.delta.is_finite() && w.corruptions.len() == n {
            s.clone_from(&w.corruptions);
        }
        if let Some(b) = w.coefficients().filter(|b| b.len() == x.ncols()) {
            beta_prev = Some(DVector::from_column_slice(b));
        }
    }

    let lasso_opts = LassoOptions {
        tol: cfg.lasso_tol,
        ..LassoOptions::default()
    };
    let single_block = !cfg.user_effects && cfg.delta.is_infinite();
    let mut f = vec![0.0; n];
    let mut link = Link::Zero;
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut rises = 0;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        iterations += 1;
        // f-step against z = y − μ − s
        let z: Vec<f64> = (0..n).map(|i| y[i] - mu[users.row_user[i]] - s[i]).collect();
        let omega = match oracle {
            OracleSpec::None => 0.0,
            OracleSpec::Ridge { alpha } | OracleSpec::Lasso { alpha } => {
                let gf = gram.expect("linear oracles always have a factorization");
                let xtz = x.tr_mul(&DVector::from_column_slice(&z));
                let coef = match oracle {
                    OracleSpec::Ridge { .. } => ridge_solve(gf, &xtz, alpha)?,
                    _ => lasso_solve(gf, &xtz, alpha, beta_prev.as_ref(), &lasso_opts)?,
                };
                let fitted = x * &coef.beta;
                f.copy_from_slice(fitted.as_slice());
                let omega = coef.penalty_value();
                link = Link::Linear {
                    beta: coef.beta.iter().copied().collect(),
                };
                beta_prev = Some(coef.beta);
                omega
            }
            OracleSpec::Gbt(params) => {
                let fit = gbt_fit(x, &z, &params)?;
                f = fit.train_predictions;
                link = Link::Gbt(fit.model);
                0.0
            }
        };

        let r: Vec<f64> = (0..n).map(|i| y[i] - f[i]).collect();
        if cfg.user_effects {
            mu = mu_step(&r, &s, users, cfg.lambda);
        }
        s = s_step(&r, &mu, users, cfg.delta);

        let l = objective(y, users, &f, &mu, &s, cfg.lambda, cfg.delta, omega);
        if !l.is_finite() {
            return Err(Error::NonFinite("objective"));
        }
        trace.push(l);
        if single_block {
            converged = true;
            break;
        }
        if let [.., prev, cur] = trace[..] {
            if cur > prev + MONOTONE_SLACK * prev.abs() {
                if oracle.is_linear() || oracle == OracleSpec::None {
                    return Err(Error::ObjectiveIncrease {
                        iteration: iterations,
                        previous: prev,
                        current: cur,
                    });
                }
                // boosted trees only approximately minimize their block
                rises += 1;
                if rises >= 2 {
                    break;
                }
                continue;
            }
            rises = 0;
            let rel = if prev > 0.0 { (prev - cur).abs() / prev } else { 0.0 };
            if rel <= cfg.epsilon {
                converged = true;
                break;
            }
        }
    }

    let user_effects = if cfg.user_effects {
        users.ids().iter().cloned().zip(mu).collect()
    } else {
        BTreeMap::new()
    };
    Ok(FittedModel {
        link,
        oracle,
        user_effects,
        corruptions: s,
        global_mean: 0.0,
        config: *cfg,
        objective_trace: trace,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shrinkage::shrink_user_mean;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Instance {
        x: DMatrix<f64>,
        y: Vec<f64>,
        users: UserIndex,
    }

    fn instance(seed: u64, n_users: usize, max_sessions: usize, d: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = Vec::new();
        let mut y = Vec::new();
        for u in 0..n_users {
            let effect = rng.random_range(-1.0..1.0);
            for _ in 0..rng.random_range(1..=max_sessions) {
                ids.push(format!("u{u}"));
                y.push(effect + rng.random_range(-1.0..1.0));
            }
        }
        let x = DMatrix::from_fn(y.len(), d, |_, _| rng.random_range(-1.0..1.0));
        for i in 0..y.len() {
            for j in 0..d {
                y[i] += 0.3 * (j as f64 + 1.0) * x[(i, j)];
            }
        }
        Instance {
            users: UserIndex::from_rows(&ids),
            x,
            y,
        }
    }

    #[test]
    fn objective_examples() {
        let users = UserIndex::from_rows(&["a", "a", "b"]);
        let y = [1.0, -2.0, 0.5];
        assert_eq!(
            objective(&y, &users, &y, &[0.0, 0.0], &[0.0; 3], 2.0, f64::INFINITY, 0.0),
            0.0
        );
        assert_eq!(
            objective(&y, &users, &[0.0; 3], &[0.0, 0.0], &[0.0; 3], 2.0, f64::INFINITY, 0.0),
            5.25
        );
        let v = objective(&y, &users, &[0.0; 3], &[1.0, 0.0], &[0.0, 0.0, 0.5], 2.0, 3.0, 1.5);
        // (0)² + (−3)² + 0² + 2·1 + 1.5 + 2·3·0.5
        assert_eq!(v, 9.0 + 2.0 + 1.5 + 3.0);
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber(0.0, 1.0), 0.0);
        assert_eq!(huber(2.0, 1.0), 3.0);
        assert_eq!(huber(-2.0, 1.0), 3.0);
        for a in [-0.7, 0.2, 1.0] {
            assert_eq!(huber(a, 1.0), a * a);
        }
    }

    #[test]
    fn mu_step_examples() {
        let users = UserIndex::from_rows(&["a", "a"]);
        assert_eq!(mu_step(&[1.0, 3.0], &[0.0, 0.0], &users, 2.0), vec![1.0]);
        assert_eq!(mu_step(&[1.0, 3.0], &[1.0, 3.0], &users, 2.0), vec![0.0]);
        let m = mu_step(&[1.0, 3.0], &[0.0, 0.0], &users, 1e-12)[0];
        assert!((m - 2.0).abs() < 1e-10);
    }

    #[test]
    fn s_step_examples() {
        let users = UserIndex::from_rows(&["a", "a", "b"]);
        assert_eq!(s_step(&[0.5, -1.0, 0.1], &[0.0, 0.0], &users, 2.0), vec![0.0; 3]);
        assert_eq!(s_step(&[5.0, 0.0, 0.0], &[0.0, 0.0], &users, 2.0), vec![3.0, 0.0, 0.0]);
        assert_eq!(
            s_step(&[50.0, 0.0, 0.0], &[0.0, 0.0], &users, f64::INFINITY),
            vec![0.0; 3]
        );
    }

    #[test]
    fn no_oracle_reproduces_model1_shrinkage() {
        let inst = instance(1, 30, 6, 1);
        let lambda = 2.5;
        let fit = bcd_fit(
            &inst.x,
            &inst.y,
            &inst.users,
            OracleSpec::None,
            &BcdConfig::new(lambda, f64::INFINITY),
        )
        .unwrap();
        assert!(fit.converged);
        for (slot, id) in inst.users.ids().iter().enumerate() {
            let ys: Vec<f64> = (0..inst.y.len())
                .filter(|&i| inst.users.row_user()[i] == slot)
                .map(|i| inst.y[i])
                .collect();
            let expect = shrink_user_mean(ys.iter().sum::<f64>() / ys.len() as f64, ys.len(), lambda);
            assert!((fit.user_effects[id] - expect).abs() < 1e-12);
        }
    }

    /// Exact minimizer of the ridge + user-effect objective from the joint
    /// normal equations over `(β, μ)`.
    fn augmented_solution(inst: &Instance, alpha: f64, lambda: f64) -> (DVector<f64>, DVector<f64>) {
        let (n, d, m) = (inst.y.len(), inst.x.ncols(), inst.users.n_users());
        let mut a = DMatrix::zeros(n, d + m);
        a.view_mut((0, 0), (n, d)).copy_from(&inst.x);
        for (i, &u) in inst.users.row_user().iter().enumerate() {
            a[(i, d + u)] = 1.0;
        }
        let mut h = a.tr_mul(&a);
        for j in 0..d {
            h[(j, j)] += alpha;
        }
        for j in d..d + m {
            h[(j, j)] += lambda;
        }
        let g = h
            .cholesky()
            .unwrap()
            .solve(&a.tr_mul(&DVector::from_column_slice(&inst.y)));
        (g.rows(0, d).into_owned(), g.rows(d, m).into_owned())
    }

    #[test]
    fn ridge_oracle_reaches_joint_minimizer() {
        let inst = instance(2, 12, 5, 3);
        let (alpha, lambda) = (0.8, 1.7);
        let cfg = BcdConfig {
            epsilon: 1e-14,
            max_iters: 10_000,
            ..BcdConfig::new(lambda, f64::INFINITY)
        };
        let fit = bcd_fit(&inst.x, &inst.y, &inst.users, OracleSpec::Ridge { alpha }, &cfg).unwrap();
        let (beta, mu) = augmented_solution(&inst, alpha, lambda);
        let f = &inst.x * &beta;
        let exact = objective(
            &inst.y,
            &inst.users,
            f.as_slice(),
            mu.as_slice(),
            &vec![0.0; inst.y.len()],
            lambda,
            f64::INFINITY,
            alpha * beta.norm_squared(),
        );
        let got = *fit.objective_trace.last().unwrap();
        assert!((got - exact) / exact < 1e-9, "{got} vs {exact}");
    }

    #[test]
    fn huge_lambda_recovers_plain_ridge() {
        let inst = instance(3, 10, 4, 3);
        let alpha = 0.5;
        let fit = bcd_fit(
            &inst.x,
            &inst.y,
            &inst.users,
            OracleSpec::Ridge { alpha },
            &BcdConfig::new(1e12, f64::INFINITY),
        )
        .unwrap();
        assert!(fit.user_effects.values().all(|m| m.abs() < 1e-9));
        let gf = precompute_gram(&inst.x).unwrap();
        let plain = ridge_solve(&gf, &inst.x.tr_mul(&DVector::from_column_slice(&inst.y)), alpha).unwrap();
        let beta = fit.coefficients().unwrap();
        for (a, b) in beta.iter().zip(plain.beta.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn covariates_only_gbt_is_one_oracle_call() {
        let inst = instance(4, 10, 4, 2);
        let cfg = BcdConfig {
            user_effects: false,
            ..BcdConfig::new(1.0, f64::INFINITY)
        };
        let params = GbtParams::new(10, 3, 0.1);
        let fit = bcd_fit(&inst.x, &inst.y, &inst.users, OracleSpec::Gbt(params), &cfg).unwrap();
        assert_eq!(fit.iterations, 1);
        assert!(fit.user_effects.is_empty());
        let direct = gbt_fit(&inst.x, &inst.y, &params).unwrap();
        assert_eq!(fit.link, Link::Gbt(direct.model));
    }

    #[test]
    fn objective_trace_monotone_with_corruptions() {
        for (k, oracle) in [
            OracleSpec::None,
            OracleSpec::Ridge { alpha: 0.3 },
            OracleSpec::Lasso { alpha: 0.3 },
        ]
        .into_iter()
        .enumerate()
        {
            let inst = instance(10 + k as u64, 15, 5, 3);
            let cfg = BcdConfig::new(1.3, 0.4);
            let fit = bcd_fit(&inst.x, &inst.y, &inst.users, oracle, &cfg).unwrap();
            assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
            assert!(fit.corruptions.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn infinite_delta_keeps_corruptions_zero() {
        let inst = instance(5, 8, 4, 2);
        let fit = bcd_fit(
            &inst.x,
            &inst.y,
            &inst.users,
            OracleSpec::Lasso { alpha: 0.1 },
            &BcdConfig::default(),
        )
        .unwrap();
        assert!(fit.corruptions.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prediction_contract() {
        let inst = instance(6, 6, 3, 2);
        let fit = bcd_fit(
            &inst.x,
            &inst.y,
            &inst.users,
            OracleSpec::Ridge { alpha: 1.0 },
            &BcdConfig::default(),
        )
        .unwrap();
        let row = [0.25, -1.5];
        let beta = fit.coefficients().unwrap();
        let manual = beta[0] * row[0] + beta[1] * row[1];
        assert_eq!(predict_log(&fit, &row, "u0").unwrap(), manual + fit.user_effects["u0"]);
        assert_eq!(predict_log(&fit, &row, "nobody").unwrap(), manual);
        assert!(predict_log(&fit, &[1.0], "u0").is_err());

        let none = bcd_fit(&inst.x, &inst.y, &inst.users, OracleSpec::None, &BcdConfig::default()).unwrap();
        assert_eq!(predict_log(&none, &row, "u1").unwrap(), none.user_effects["u1"]);
    }

    #[test]
    fn rejects_bad_config() {
        let inst = instance(7, 3, 2, 1);
        let bad = BcdConfig::new(0.0, 1.0);
        assert!(bcd_fit(&inst.x, &inst.y, &inst.users, OracleSpec::None, &bad).is_err());
        let short = UserIndex::from_rows(&["a"]);
        assert!(bcd_fit(&inst.x, &inst.y, &short, OracleSpec::None, &BcdConfig::default()).is_err());
    }

    #[test]
    fn config_round_trips_infinite_delta() {
        let cfg = BcdConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"delta\":null"));
        let back: BcdConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }
}
