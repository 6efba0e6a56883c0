//! Penalized least-squares solvers for the linear link, working on a cached
//! Gram matrix `Q = XᵀX` so that every solve costs `O(d²)` given `Xᵀz`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `Q = XᵀX` with its eigendecomposition `Q = V Γ Vᵀ`, computed once.
#[derive(Debug, Clone)]
pub struct GramFactorization {
    pub gram: DMatrix<f64>,
    pub eigenvectors: DMatrix<f64>,
    /// Descending, clamped at zero.
    pub eigenvalues: DVector<f64>,
    /// Lipschitz constant of the smooth gradient, `2·max γᵢ`.
    pub lipschitz: f64,
}

impl GramFactorization {
    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    /// `βᵀQβ − 2⟨xtz, β⟩`, the data-fit part of `‖z − Xβ‖²` minus `‖z‖²`.
    pub fn quadratic(&self, xtz: &DVector<f64>, beta: &DVector<f64>) -> f64 {
        (beta.transpose() * &self.gram * beta)[(0, 0)] - 2.0 * xtz.dot(beta)
    }
}

pub fn precompute_gram(x: &DMatrix<f64>) -> Result<GramFactorization> {
    if x.ncols() == 0 {
        return Err(Error::InvalidArgument("design matrix has no columns".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("design matrix"));
    }
    let gram = x.tr_mul(x);
    from_gram(gram)
}

/// Factorizes an already formed symmetric PSD matrix.
pub fn from_gram(gram: DMatrix<f64>) -> Result<GramFactorization> {
    if gram.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gram matrix"));
    }
    let eig = gram.clone().symmetric_eigen();
    let d = gram.nrows();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues = DVector::from_iterator(d, order.iter().map(|&i| eig.eigenvalues[i].max(0.0)));
    let eigenvectors = DMatrix::from_fn(d, d, |r, c| eig.eigenvectors[(r, order[c])]);
    let lipschitz = 2.0 * eigenvalues.iter().copied().fold(0.0, f64::max);
    Ok(GramFactorization {
        gram,
        eigenvectors,
        eigenvalues,
        lipschitz,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Penalty {
    /// `α‖β‖₂²`
    Ridge,
    /// `α‖β‖₁`
    Lasso,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearCoefficients {
    pub beta: DVector<f64>,
    pub penalty: Penalty,
    pub alpha: f64,
    pub iterations: usize,
    pub rel_change: f64,
    pub kkt_residual: f64,
    pub converged: bool,
    /// Objective after each iteration, only when requested.
    pub objective_trace: Vec<f64>,
}

impl LinearCoefficients {
    pub fn penalty_value(&self) -> f64 {
        match self.penalty {
            Penalty::Ridge => self.alpha * self.beta.norm_squared(),
            Penalty::Lasso => self.alpha * self.beta.lp_norm(1),
        }
    }
}

/// `β = V diag(1/(γᵢ+α)) Vᵀ xtz`, i.e. `(XᵀX + αI)⁻¹ Xᵀz` without refactoring.
pub fn ridge_solve(gf: &GramFactorization, xtz: &DVector<f64>, alpha: f64) -> Result<LinearCoefficients> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument("ridge penalty must be positive".into()));
    }
    let mut rotated = gf.eigenvectors.tr_mul(xtz);
    for (r, g) in rotated.iter_mut().zip(gf.eigenvalues.iter()) {
        *r /= g + alpha;
    }
    let beta = &gf.eigenvectors * rotated;
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ridge coefficients"));
    }
    Ok(LinearCoefficients {
        beta,
        penalty: Penalty::Ridge,
        alpha,
        iterations: 0,
        rel_change: 0.0,
        kkt_residual: 0.0,
        converged: true,
        objective_trace: Vec::new(),
    })
}

/// `sign(a)·max(|a| − τ, 0)`.
pub fn soft_threshold(a: f64, tau: f64) -> f64 {
    if a > tau {
        a - tau
    } else if a < -tau {
        a + tau
    } else {
        0.0
    }
}

/// `F(β) = βᵀQβ − 2⟨xtz, β⟩ + α‖β‖₁`.
pub fn lasso_objective(gf: &GramFactorization, xtz: &DVector<f64>, alpha: f64, beta: &DVector<f64>) -> f64 {
    gf.quadratic(xtz, beta) + alpha * beta.lp_norm(1)
}

/// Largest violation of the lasso optimality conditions.
pub fn lasso_kkt_residual(gf: &GramFactorization, xtz: &DVector<f64>, alpha: f64, beta: &DVector<f64>) -> f64 {
    let grad = (&gf.gram * beta - xtz) * 2.0;
    grad.iter()
        .zip(beta.iter())
        .map(|(&g, &b)| {
            if b != 0.0 {
                (g + alpha * b.signum()).abs()
            } else {
                (g.abs() - alpha).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub record_trace: bool,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 10_000,
            record_trace: false,
        }
    }
}

/// Proximal gradient with fixed step `1/L`, `L = 2·max γᵢ`:
/// `β ← S_{α/L}(β − ∇/L)`. Stops once both the relative objective change and
/// the KKT residual fall below `tol`. Hitting the iteration cap is reported
/// through `converged = false` with the last iterate returned.
pub fn lasso_solve(
    gf: &GramFactorization,
    xtz: &DVector<f64>,
    alpha: f64,
    warm_start: Option<&DVector<f64>>,
    opts: &LassoOptions,
) -> Result<LinearCoefficients> {
    if !(alpha > 0.0) || !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument("lasso needs alpha > 0 and tol > 0".into()));
    }
    let d = gf.dim();
    if xtz.len() != d {
        return Err(Error::SchemaMismatch(format!(
            "Xᵀz has length {}, expected {d}",
            xtz.len()
        )));
    }
    let mut beta = match warm_start {
        Some(b) if b.len() == d => b.clone(),
        Some(b) => {
            return Err(Error::SchemaMismatch(format!(
                "warm start has length {}, expected {d}",
                b.len()
            )));
        }
        None => DVector::zeros(d),
    };
    let mut out = LinearCoefficients {
        beta: DVector::zeros(d),
        penalty: Penalty::Lasso,
        alpha,
        iterations: 0,
        rel_change: 0.0,
        kkt_residual: 0.0,
        converged: true,
        objective_trace: Vec::new(),
    };
    let l = gf.lipschitz;
    if l <= 0.0 {
        // Q = 0: the objective is linear plus ℓ₁ and Xᵀz is zero as well
        out.kkt_residual = lasso_kkt_residual(gf, xtz, alpha, &out.beta);
        return Ok(out);
    }
    let tau = alpha / l;
    let mut f_prev = lasso_objective(gf, xtz, alpha, &beta);
    let mut converged = false;
    let mut iterations = 0;
    let mut rel = f64::INFINITY;
    let mut kkt = f64::INFINITY;
    while iterations < opts.max_iter {
        iterations += 1;
        let grad = (&gf.gram * &beta - xtz) * 2.0;
        beta.iter_mut()
            .zip(grad.iter())
            .for_each(|(b, g)| *b = soft_threshold(*b - g / l, tau));
        let f = lasso_objective(gf, xtz, alpha, &beta);
        if opts.record_trace {
            out.objective_trace.push(f);
        }
        rel = (f_prev - f).abs() / f_prev.abs().max(f64::MIN_POSITIVE);
        kkt = lasso_kkt_residual(gf, xtz, alpha, &beta);
        f_prev = f;
        if rel.max(kkt) < opts.tol {
            converged = true;
            break;
        }
    }
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("lasso coefficients"));
    }
    out.beta = beta;
    out.iterations = iterations;
    out.rel_change = rel;
    out.kkt_residual = kkt;
    out.converged = converged;
    Ok(out)
}
