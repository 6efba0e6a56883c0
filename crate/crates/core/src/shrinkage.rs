//! Gaussian sequence-model estimators and per-user shrinkage (no covariates).

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::SessionDataset;
use crate::error::{Error, Result};
use crate::stats::ordered_sum;

/// Floor applied to moment estimates of variances.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Prior `μ ~ N(0, A²)` for the sequence model `z | μ ~ N(μ, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceModelConfig {
    pub prior_variance: f64,
}

impl SequenceModelConfig {
    pub fn new(prior_variance: f64) -> Result<Self> {
        if !(prior_variance > 0.0) || !prior_variance.is_finite() {
            return Err(Error::InvalidArgument(
                "prior variance must be positive and finite".into(),
            ));
        }
        Ok(Self { prior_variance })
    }

    /// Posterior shrinkage factor `B² = A²/(1+A²)`.
    pub fn shrinkage_factor(&self) -> f64 {
        1.0 - 1.0 / (1.0 + self.prior_variance)
    }
}

fn check_finite(z: &[f64]) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("observation vector"))
    }
}

/// Posterior mean `(1 − 1/(1+A²)) z`.
pub fn bayes_sequence(z: &[f64], prior_variance: f64) -> Result<Vec<f64>> {
    check_finite(z)?;
    if !(prior_variance > 0.0) {
        return Err(Error::InvalidArgument("prior variance must be positive".into()));
    }
    let factor = 1.0 - 1.0 / (1.0 + prior_variance);
    Ok(z.iter().map(|v| factor * v).collect())
}

fn james_stein_factor(z: &[f64]) -> Result<f64> {
    check_finite(z)?;
    if z.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "James-Stein needs at least 3 observations, got {}",
            z.len()
        )));
    }
    let s: f64 = z.iter().map(|v| v * v).sum();
    if s == 0.0 {
        return Err(Error::InvalidArgument("sum of squares is zero".into()));
    }
    Ok(1.0 - (z.len() as f64 - 2.0) / s)
}

/// Empirical Bayes estimate `(1 − (n−2)/S) z` with `S = Σ zᵢ²`. The factor is
/// not clipped and may be negative.
pub fn james_stein(z: &[f64]) -> Result<Vec<f64>> {
    let factor = james_stein_factor(z)?;
    Ok(z.iter().map(|v| factor * v).collect())
}

/// Positive-part variant: the factor is clipped at zero.
pub fn james_stein_positive(z: &[f64]) -> Result<Vec<f64>> {
    let factor = james_stein_factor(z)?.max(0.0);
    Ok(z.iter().map(|v| factor * v).collect())
}

/// Monte Carlo risks `E‖μ̂ − μ‖²` of the three sequence-model estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceRisk {
    pub ml: f64,
    pub eb: f64,
    pub bayes: f64,
    pub trials: usize,
}

impl SequenceRisk {
    /// `(R_EB − R_Bayes) / R_Bayes`.
    pub fn relative_eb_gap(&self) -> f64 {
        (self.eb - self.bayes) / self.bayes
    }
}

/// Draws `μ ~ N(0, A²I)`, `z | μ ~ N(μ, I)` for every trial and averages the
/// squared errors of the ML, James-Stein and Bayes estimators on common draws.
pub fn simulate_sequence_risk(n: usize, prior_variance: f64, trials: usize, seed: u64) -> Result<SequenceRisk> {
    if n < 3 || trials == 0 {
        return Err(Error::InvalidArgument("need n >= 3 and at least one trial".into()));
    }
    let cfg = SequenceModelConfig::new(prior_variance)?;
    let bayes_factor = cfg.shrinkage_factor();
    let sd = prior_variance.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ml, mut eb, mut bayes) = (0.0, 0.0, 0.0);
    let mut mu = vec![0.0; n];
    let mut z = vec![0.0; n];
    for _ in 0..trials {
        for i in 0..n {
            let m: f64 = sd * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            mu[i] = m;
            z[i] = m + e;
        }
        let s: f64 = z.iter().map(|v| v * v).sum();
        let js_factor = 1.0 - (n as f64 - 2.0) / s;
        for i in 0..n {
            ml += (z[i] - mu[i]).powi(2);
            eb += (js_factor * z[i] - mu[i]).powi(2);
            bayes += (bayes_factor * z[i] - mu[i]).powi(2);
        }
    }
    let t = trials as f64;
    Ok(SequenceRisk {
        ml: ml / t,
        eb: eb / t,
        bayes: bayes / t,
        trials,
    })
}

/// Between-user (`σ₀²`) and within-user (`σ₁²`) variances on the log scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub sigma0_sq: f64,
    pub sigma1_sq: f64,
    /// Training mean of the log lengths; all models work on centered values.
    pub global_mean: f64,
}

impl VarianceComponents {
    /// Shrinkage strength `λ = σ₁²/σ₀²`.
    pub fn lambda(&self) -> f64 {
        self.sigma1_sq / self.sigma0_sq
    }
}

/// Unclamped per-user moment estimates averaged over users with at least two
/// sessions. Inputs are already centered. Returns `(σ̂₀², σ̂₁²)`.
pub fn moment_estimates<G: AsRef<[f64]>>(centered_groups: &[G]) -> Result<(f64, f64)> {
    let mut off_diag = Vec::new();
    let mut diag = Vec::new();
    for g in centered_groups {
        let y = g.as_ref();
        let n = y.len();
        if n < 2 {
            continue;
        }
        let total = ordered_sum(y.iter().copied());
        let t = ordered_sum(y.iter().map(|v| v * v));
        let nf = n as f64;
        off_diag.push((total * total - t) / (nf * (nf - 1.0)));
        diag.push(t / nf);
    }
    if off_diag.is_empty() {
        return Err(Error::NoRepeatUsers);
    }
    let users = off_diag.len() as f64;
    let sigma0 = ordered_sum(off_diag) / users;
    let sigma1 = ordered_sum(diag) / users - sigma0;
    Ok((sigma0, sigma1))
}

/// Method-of-moments variance components from raw (uncentered) per-user log
/// lengths: center by the pooled mean, average the per-user unbiased
/// estimates, then floor both at [`VARIANCE_FLOOR`].
pub fn variance_components_from_groups<G: AsRef<[f64]>>(groups: &[G]) -> Result<VarianceComponents> {
    let count: usize = groups.iter().map(|g| g.as_ref().len()).sum();
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    let global_mean = ordered_sum(groups.iter().flat_map(|g| g.as_ref().iter().copied())) / count as f64;
    let centered: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| g.as_ref().iter().map(|v| v - global_mean).collect())
        .collect();
    let (s0, s1) = moment_estimates(&centered)?;
    Ok(VarianceComponents {
        sigma0_sq: s0.max(VARIANCE_FLOOR),
        sigma1_sq: s1.max(VARIANCE_FLOOR),
        global_mean,
    })
}

pub fn estimate_variance_components(train: &SessionDataset) -> Result<VarianceComponents> {
    let groups: Vec<Vec<f64>> = train.users().iter().map(|u| u.log_lengths()).collect();
    variance_components_from_groups(&groups)
}

/// Posterior mean of a user effect: `ȳ/(1 + λ/n)` for centered mean `ȳ`.
pub fn shrink_user_mean(centered_mean: f64, n: usize, lambda: f64) -> f64 {
    centered_mean / (1.0 + lambda / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserEffect {
    /// Shrunken centered mean `μ̂ᵢ`.
    pub effect: f64,
    pub sessions: usize,
}

/// Per-user shrunken means (the covariate-free model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model1Fit {
    pub users: BTreeMap<String, UserEffect>,
    pub components: VarianceComponents,
}

pub fn model1_from_groups<S: AsRef<str>, G: AsRef<[f64]>>(
    user_ids: &[S],
    groups: &[G],
    vc: &VarianceComponents,
) -> Result<Model1Fit> {
    if !(vc.sigma0_sq > 0.0 && vc.sigma1_sq > 0.0) {
        return Err(Error::InvalidArgument("variance components must be positive".into()));
    }
    let lambda = vc.lambda();
    let users = user_ids
        .iter()
        .zip(groups)
        .filter(|(_, g)| !g.as_ref().is_empty())
        .map(|(id, g)| {
            let y = g.as_ref();
            let centered_mean = y.iter().map(|v| v - vc.global_mean).sum::<f64>() / y.len() as f64;
            (
                id.as_ref().to_owned(),
                UserEffect {
                    effect: shrink_user_mean(centered_mean, y.len(), lambda),
                    sessions: y.len(),
                },
            )
        })
        .collect();
    Ok(Model1Fit { users, components: *vc })
}

pub fn model1_fit(train: &SessionDataset, vc: &VarianceComponents) -> Result<Model1Fit> {
    let ids: Vec<&str> = train.users().iter().map(|u| u.user_id.as_str()).collect();
    let groups: Vec<Vec<f64>> = train.users().iter().map(|u| u.log_lengths()).collect();
    model1_from_groups(&ids, &groups, vc)
}

impl Model1Fit {
    /// Predicted log length `global_mean + μ̂ᵢ`; unknown users are an error
    /// and callers fall back to [`Model1Fit::global_mean`].
    pub fn predict(&self, user_id: &str) -> Result<f64> {
        self.users
            .get(user_id)
            .map(|u| self.components.global_mean + u.effect)
            .ok_or_else(|| Error::UnknownUser(user_id.to_owned()))
    }

    pub fn predict_or_mean(&self, user_id: &str) -> f64 {
        self.predict(user_id).unwrap_or(self.components.global_mean)
    }

    pub fn global_mean(&self) -> f64 {
        self.components.global_mean
    }
}

pub fn model1_predict(fit: &Model1Fit, user_id: &str) -> Result<f64> {
    fit.predict(user_id)
}
