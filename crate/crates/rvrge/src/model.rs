//! The contract every target model implements: log joint density and its
//! derivatives, plus finite-difference oracles that independently validate
//! any implementation.
//!
//! Hessian-vector products are exact analytic derivatives everywhere in the
//! estimation path; finite differences live only in the oracles below.

use crate::numerics::{mat_vec, Mat};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("log density is non-finite at the evaluation point")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("model does not provide {0}")]
    Capability(&'static str),
    #[error("invalid model: {0}")]
    Invalid(String),
}

pub type ModelResult<T> = Result<T, ModelError>;

/// Log joint density of a model together with its derivatives in the latent.
///
/// `grad_logp` is the data term of the reparameterization gradient; `hvp`
/// computes H(z)·v at gradient-like cost. The Hessian diagonal and the full
/// Hessian are optional capabilities gated by `has_hessian_diag` /
/// `has_full_hessian`.
pub trait LogDensityModel: Sync {
    fn dim(&self) -> usize;

    fn logp(&self, z: &[f64]) -> ModelResult<f64>;

    fn grad_logp(&self, z: &[f64]) -> ModelResult<Vec<f64>>;

    fn hvp(&self, z: &[f64], v: &[f64]) -> ModelResult<Vec<f64>>;

    fn has_hessian_diag(&self) -> bool {
        false
    }

    fn hessian_diag(&self, _z: &[f64]) -> ModelResult<Vec<f64>> {
        Err(ModelError::Capability("hessian_diag"))
    }

    fn has_full_hessian(&self) -> bool {
        false
    }

    fn full_hessian(&self, _z: &[f64]) -> ModelResult<Mat> {
        Err(ModelError::Capability("full_hessian"))
    }

    /// Cache whatever the model can at a fixed point `z0`, so that the
    /// gradient and many subsequent H(z0)·v queries are cheap. The default
    /// caches only the gradient; results must be bit-identical with and
    /// without a model-specific cache.
    fn prepare(&self, z0: &[f64]) -> ModelResult<PreparedPoint<'_>> {
        Ok(PreparedPoint {
            grad: self.grad_logp(z0)?,
            z0: z0.to_vec(),
            hvp: Box::new(move |model, z0, v| model.hvp(z0, v)),
            model: self.as_dyn(),
        })
    }

    #[doc(hidden)]
    fn as_dyn(&self) -> &dyn LogDensityModel;
}

/// State cached at a fixed evaluation point, shared read-only across the
/// samples of one iteration.
pub struct PreparedPoint<'a> {
    grad: Vec<f64>,
    z0: Vec<f64>,
    #[allow(clippy::type_complexity)]
    hvp: Box<dyn Fn(&dyn LogDensityModel, &[f64], &[f64]) -> ModelResult<Vec<f64>> + Sync + 'a>,
    model: &'a dyn LogDensityModel,
}

impl<'a> PreparedPoint<'a> {
    pub fn with_cache<F>(model: &'a dyn LogDensityModel, z0: &[f64], grad: Vec<f64>, hvp: F) -> Self
    where
        F: Fn(&dyn LogDensityModel, &[f64], &[f64]) -> ModelResult<Vec<f64>> + Sync + 'a,
    {
        PreparedPoint {
            grad,
            z0: z0.to_vec(),
            hvp: Box::new(hvp),
            model,
        }
    }

    pub fn point(&self) -> &[f64] {
        &self.z0
    }

    /// Gradient of the log density at the prepared point.
    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    /// H(z0)·v using the cached forward state.
    pub fn hvp(&self, v: &[f64]) -> ModelResult<Vec<f64>> {
        (self.hvp)(self.model, &self.z0, v)
    }
}

/// Central-difference configuration for the test oracles.
#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    pub step: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig { step: 1e-5 }
    }
}

/// Central-difference gradient of the log density, error O(h^2).
pub fn fd_grad_oracle(
    model: &dyn LogDensityModel,
    z: &[f64],
    cfg: FdConfig,
) -> ModelResult<Vec<f64>> {
    let h = cfg.step;
    let mut grad = vec![0.0; z.len()];
    let mut probe = z.to_vec();
    for i in 0..z.len() {
        probe[i] = z[i] + h;
        let up = model.logp(&probe)?;
        probe[i] = z[i] - h;
        let down = model.logp(&probe)?;
        probe[i] = z[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(ModelError::NonFinite);
        }
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Central difference of the analytic gradient along direction `v`:
/// (grad(z + h v) - grad(z - h v)) / 2h.
pub fn fd_hvp_oracle(
    model: &dyn LogDensityModel,
    z: &[f64],
    v: &[f64],
    cfg: FdConfig,
) -> ModelResult<Vec<f64>> {
    let h = cfg.step;
    let up_pt: Vec<f64> = z.iter().zip(v).map(|(zi, vi)| zi + h * vi).collect();
    let down_pt: Vec<f64> = z.iter().zip(v).map(|(zi, vi)| zi - h * vi).collect();
    let up = model.grad_logp(&up_pt)?;
    let down = model.grad_logp(&down_pt)?;
    Ok(up
        .iter()
        .zip(&down)
        .map(|(u, d)| (u - d) / (2.0 * h))
        .collect())
}

/// Hessian diagonal via D directional probes with basis vectors.
pub fn fd_hessian_diag_oracle(
    model: &dyn LogDensityModel,
    z: &[f64],
    cfg: FdConfig,
) -> ModelResult<Vec<f64>> {
    let d = z.len();
    let mut diag = vec![0.0; d];
    let mut basis = vec![0.0; d];
    for i in 0..d {
        basis[i] = 1.0;
        diag[i] = fd_hvp_oracle(model, z, &basis, cfg)?[i];
        basis[i] = 0.0;
    }
    Ok(diag)
}

/// Validate the symmetry invariant u·H v == v·H u at one (z, u, v) triple.
pub fn hvp_symmetry_gap(
    model: &dyn LogDensityModel,
    z: &[f64],
    u: &[f64],
    v: &[f64],
) -> ModelResult<f64> {
    let hu = model.hvp(z, u)?;
    let hv = model.hvp(z, v)?;
    let a = crate::numerics::dot(u, &hv);
    let b = crate::numerics::dot(v, &hu);
    Ok(crate::numerics::rel_err(a, b))
}

/// Consistency of the optional Hessian capabilities against `hvp`:
/// full_hessian·v vs hvp, and the full-Hessian diagonal vs hessian_diag.
pub fn hessian_capability_gap(model: &dyn LogDensityModel, z: &[f64], v: &[f64]) -> ModelResult<f64> {
    let full = model.full_hessian(z)?;
    let via_mat = mat_vec(&full, v);
    let via_hvp = model.hvp(z, v)?;
    let mut worst = 0.0_f64;
    for (a, b) in via_mat.iter().zip(&via_hvp) {
        worst = worst.max(crate::numerics::rel_err(*a, *b));
    }
    if model.has_hessian_diag() {
        let diag = model.hessian_diag(z)?;
        for (a, b) in full.diagonal().iter().zip(&diag) {
            worst = worst.max(crate::numerics::rel_err(*a, *b));
        }
    }
    worst = worst.max(full.asymmetry());
    Ok(worst)
}
