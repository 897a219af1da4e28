//! Reparameterization gradient estimators: the plain Monte Carlo estimator
//! and the reduced-variance family that subtracts a linearized-model control
//! variate with known mean.
//!
//! Per-sample control variate, with `s = exp(log_s)` and `f` the gradient of
//! the log joint density:
//!
//! ```text
//! f~(eps)        = f(m) + H(m) (s . eps)
//! g~_mean        = f~(eps)
//! g~_scale       = f~(eps) . eps + 1/s
//! E[g~_mean]     = f(m)
//! E[g~_scale]    = diag(H(m)) . s + 1/s
//! ```
//!
//! All scale-block quantities are chain-ruled to the log scale before they
//! leave this module. Within a batch every Hessian product is evaluated at
//! the same mean, which is what makes the prepared-point cache worthwhile.

use crate::model::{LogDensityModel, ModelError};
use crate::vardist::{transform, NoiseBatch, VarParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("the local-baseline estimator needs at least 2 samples per batch")]
    LocalNeedsTwoSamples,
    #[error("control coefficient estimation needs at least {needed} paired samples, got {got}")]
    TooFewPairs { needed: usize, got: usize },
    #[error("estimator produced a non-finite gradient")]
    NonFinite,
}

pub type EstimatorResult<T> = Result<T, EstimatorError>;

/// A gradient over the variational parameters, split into the mean block and
/// the log-scale block. Flattening order is fixed: [mean; log-scale].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradEstimate {
    pub mean: Vec<f64>,
    pub log_scale: Vec<f64>,
}

impl GradEstimate {
    pub fn zeros(dim: usize) -> Self {
        GradEstimate {
            mean: vec![0.0; dim],
            log_scale: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Concatenated [mean; log-scale] vector.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.mean.clone();
        v.extend_from_slice(&self.log_scale);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.log_scale).all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.mean
            .iter()
            .chain(&self.log_scale)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn add_assign(&mut self, other: &GradEstimate) {
        for (a, b) in self.mean.iter_mut().zip(&other.mean) {
            *a += b;
        }
        for (a, b) in self.log_scale.iter_mut().zip(&other.log_scale) {
            *a += b;
        }
    }

    fn scale_assign(&mut self, c: f64) {
        for v in self.mean.iter_mut().chain(self.log_scale.iter_mut()) {
            *v *= c;
        }
    }
}

/// Which estimator assembles the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorKind {
    /// Pure Monte Carlo reparameterization gradient.
    Mc,
    /// Control variate with the exact Hessian; needs the full-Hessian capability.
    FullHessian,
    /// Control variate with the Hessian diagonal only; needs that capability.
    HessianDiag,
    /// Hessian-vector products plus a leave-one-out estimate of the scaled
    /// Hessian diagonal; needs L >= 2.
    HvpLocal,
    /// Hessian-vector products, control variate on the mean block only; the
    /// scale block passes through as pure Monte Carlo.
    HvpMeanOnly,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::Mc,
        EstimatorKind::FullHessian,
        EstimatorKind::HessianDiag,
        EstimatorKind::HvpLocal,
        EstimatorKind::HvpMeanOnly,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Mc => "mc",
            EstimatorKind::FullHessian => "full",
            EstimatorKind::HessianDiag => "diag",
            EstimatorKind::HvpLocal => "hvplocal",
            EstimatorKind::HvpMeanOnly => "hvpmean",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mc" => Ok(EstimatorKind::Mc),
            "full" | "fullhessian" => Ok(EstimatorKind::FullHessian),
            "diag" | "hessiandiag" => Ok(EstimatorKind::HessianDiag),
            "hvplocal" | "hvp-local" => Ok(EstimatorKind::HvpLocal),
            "hvpmean" | "hvp-mean-only" => Ok(EstimatorKind::HvpMeanOnly),
            other => Err(format!("unknown estimator kind: {other}")),
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-component diagonal control coefficient over the flat [mean; log-scale]
/// vector. The default is the identity: the linearization is accurate enough
/// that the optimal coefficient sits near 1, so it is fixed rather than
/// estimated during optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlCoeff {
    pub coeff: Vec<f64>,
}

impl ControlCoeff {
    pub fn identity(dim: usize) -> Self {
        ControlCoeff {
            coeff: vec![1.0; 2 * dim],
        }
    }

    pub fn zero(dim: usize) -> Self {
        ControlCoeff {
            coeff: vec![0.0; 2 * dim],
        }
    }

    fn mean_block(&self) -> &[f64] {
        &self.coeff[..self.coeff.len() / 2]
    }

    fn scale_block(&self) -> &[f64] {
        &self.coeff[self.coeff.len() / 2..]
    }
}

/// Single-sample Monte Carlo reparameterization gradient. The pathwise and
/// parameter mean-scores cancel exactly for the Gaussian family, leaving
/// `g_mean = f(z)` and `g_scale = f(z) . eps + 1/s`, chain-ruled here to the
/// log scale.
pub fn mc_rge(
    model: &dyn LogDensityModel,
    params: &VarParams,
    eps: &[f64],
) -> EstimatorResult<GradEstimate> {
    let z = transform(eps, params);
    let f = model.grad_logp(&z)?;
    let est = assemble(&f, params, eps);
    if !est.is_finite() {
        return Err(EstimatorError::NonFinite);
    }
    Ok(est)
}

/// Build (g_mean, g_log_scale) from a data-term vector evaluated per sample.
fn assemble(f: &[f64], params: &VarParams, eps: &[f64]) -> GradEstimate {
    let log_scale = f
        .iter()
        .zip(eps)
        .zip(&params.log_scale)
        .map(|((fi, e), ls)| fi * e * ls.exp() + 1.0)
        .collect();
    GradEstimate {
        mean: f.to_vec(),
        log_scale,
    }
}

/// Mean of per-sample [`mc_rge`] over the batch.
pub fn mc_rge_batch(
    model: &dyn LogDensityModel,
    params: &VarParams,
    noise: &NoiseBatch,
) -> EstimatorResult<GradEstimate> {
    let mut acc = GradEstimate::zeros(params.dim());
    for eps in noise.samples() {
        acc.add_assign(&mc_rge(model, params, eps)?);
    }
    acc.scale_assign(1.0 / noise.len() as f64);
    Ok(acc)
}

/// One control-variate sample: `hvp_of_eps` must be the Hessian (or its
/// kind-specific surrogate) applied to `s . eps` at the variational mean, and
/// `f_mean` the gradient there.
pub fn cv_sample(
    f_mean: &[f64],
    params: &VarParams,
    eps: &[f64],
    hvp_of_eps: &[f64],
) -> GradEstimate {
    let f_tilde: Vec<f64> = f_mean.iter().zip(hvp_of_eps).map(|(a, b)| a + b).collect();
    assemble(&f_tilde, params, eps)
}

/// Leave-one-out estimate of `diag(H) . s`: the mean over the other samples
/// of `eps . H(s . eps)`, unbiased because `E[eps . H(s . eps)] = diag(H) . s`
/// for standard-normal noise.
pub fn loo_diag_estimate(
    eps_batch: &[Vec<f64>],
    hvp_batch: &[Vec<f64>],
    exclude: usize,
) -> EstimatorResult<Vec<f64>> {
    if eps_batch.len() < 2 {
        return Err(EstimatorError::LocalNeedsTwoSamples);
    }
    assert_eq!(eps_batch.len(), hvp_batch.len());
    let dim = eps_batch[0].len();
    let mut acc = vec![0.0; dim];
    for (l, (eps, hvp)) in eps_batch.iter().zip(hvp_batch).enumerate() {
        if l == exclude {
            continue;
        }
        for ((a, e), h) in acc.iter_mut().zip(eps).zip(hvp) {
            *a += e * h;
        }
    }
    let n = (eps_batch.len() - 1) as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    Ok(acc)
}

/// `hat - C . (tilde - tilde_mean)`, blockwise over [mean; log-scale].
pub fn apply_cv(
    hat: &GradEstimate,
    tilde: &GradEstimate,
    tilde_mean: &GradEstimate,
    coeff: &ControlCoeff,
) -> GradEstimate {
    let dim = hat.dim();
    let mut out = GradEstimate::zeros(dim);
    let cm = coeff.mean_block();
    let cs = coeff.scale_block();
    for i in 0..dim {
        out.mean[i] = hat.mean[i] - cm[i] * (tilde.mean[i] - tilde_mean.mean[i]);
        out.log_scale[i] =
            hat.log_scale[i] - cs[i] * (tilde.log_scale[i] - tilde_mean.log_scale[i]);
    }
    out
}

/// Everything the control variate needs for one batch: per-sample MC
/// gradients, per-sample CV values, and per-sample CV means.
struct CvParts {
    hat: Vec<GradEstimate>,
    tilde: Vec<GradEstimate>,
    means: Vec<GradEstimate>,
}

fn cv_parts(
    model: &dyn LogDensityModel,
    params: &VarParams,
    kind: EstimatorKind,
    noise: &NoiseBatch,
) -> EstimatorResult<CvParts> {
    debug_assert!(kind != EstimatorKind::Mc);
    if kind == EstimatorKind::HvpLocal && noise.len() < 2 {
        return Err(EstimatorError::LocalNeedsTwoSamples);
    }
    let dim = params.dim();
    let scale = params.scale();
    let prepared = model.prepare(&params.mean)?;
    let f_mean = prepared.grad().to_vec();

    // exact Hessian diagonal where the kind calls for it
    let exact_diag = match kind {
        EstimatorKind::FullHessian => Some(model.full_hessian(&params.mean)?.diagonal()),
        EstimatorKind::HessianDiag => Some(model.hessian_diag(&params.mean)?),
        _ => None,
    };

    let mut hat = Vec::with_capacity(noise.len());
    let mut tilde = Vec::with_capacity(noise.len());
    let mut hvps = Vec::with_capacity(noise.len());
    for eps in noise.samples() {
        hat.push(mc_rge(model, params, eps)?);
        let scaled_eps: Vec<f64> = eps.iter().zip(&scale).map(|(e, s)| e * s).collect();
        let hvp = match kind {
            EstimatorKind::HessianDiag => {
                let diag = exact_diag.as_ref().expect("set above");
                diag.iter().zip(&scaled_eps).map(|(d, v)| d * v).collect()
            }
            _ => prepared.hvp(&scaled_eps)?,
        };
        tilde.push(cv_sample(&f_mean, params, eps, &hvp));
        hvps.push(hvp);
    }

    // chain-ruled scale mean: (diag(H) . s + 1/s) . s = diag(H) . s^2 + 1,
    // with diag(H) . s either exact or the per-sample leave-one-out estimate
    let scale_mean_from = |scaled_diag: &[f64]| -> Vec<f64> {
        scaled_diag
            .iter()
            .zip(&scale)
            .map(|(d, s)| d * s + 1.0)
            .collect()
    };
    let mut means = Vec::with_capacity(noise.len());
    for l in 0..noise.len() {
        let log_scale = match kind {
            EstimatorKind::FullHessian | EstimatorKind::HessianDiag => {
                let diag = exact_diag.as_ref().expect("set above");
                let scaled: Vec<f64> = diag.iter().zip(&scale).map(|(d, s)| d * s).collect();
                scale_mean_from(&scaled)
            }
            EstimatorKind::HvpLocal => {
                let loo = loo_diag_estimate(noise.samples(), &hvps, l)?;
                scale_mean_from(&loo)
            }
            EstimatorKind::HvpMeanOnly => vec![0.0; dim],
            EstimatorKind::Mc => unreachable!(),
        };
        means.push(GradEstimate {
            mean: f_mean.clone(),
            log_scale,
        });
    }

    // the mean-only variant leaves the scale block untouched
    if kind == EstimatorKind::HvpMeanOnly {
        for t in tilde.iter_mut() {
            t.log_scale = vec![0.0; dim];
        }
    }

    Ok(CvParts { hat, tilde, means })
}

/// Per-sample control-variate means for the batch. For the exact-diagonal
/// kinds every entry is identical; for the local-baseline kind entry `l`
/// uses only the other samples, which is what keeps the estimator unbiased.
pub fn cv_expectation(
    model: &dyn LogDensityModel,
    params: &VarParams,
    kind: EstimatorKind,
    noise: &NoiseBatch,
) -> EstimatorResult<Vec<GradEstimate>> {
    Ok(cv_parts(model, params, kind, noise)?.means)
}

/// The batch estimator: MC gradients minus the control variate, averaged in
/// fixed sample order.
pub fn rv_rge_batch(
    model: &dyn LogDensityModel,
    params: &VarParams,
    noise: &NoiseBatch,
    kind: EstimatorKind,
    coeff: &ControlCoeff,
) -> EstimatorResult<GradEstimate> {
    if kind == EstimatorKind::Mc {
        return mc_rge_batch(model, params, noise);
    }
    let parts = cv_parts(model, params, kind, noise)?;
    let mut acc = GradEstimate::zeros(params.dim());
    for l in 0..noise.len() {
        acc.add_assign(&apply_cv(&parts.hat[l], &parts.tilde[l], &parts.means[l], coeff));
    }
    acc.scale_assign(1.0 / noise.len() as f64);
    if !acc.is_finite() {
        return Err(EstimatorError::NonFinite);
    }
    Ok(acc)
}

/// Diagonal regression coefficient Cov(hat, tilde)/V(tilde) per component of
/// the flat vector; diagnostics only, the optimization path keeps C = I.
pub fn estimate_control_coeff(
    hat_samples: &[GradEstimate],
    tilde_samples: &[GradEstimate],
) -> EstimatorResult<ControlCoeff> {
    const MIN_PAIRS: usize = 10;
    if hat_samples.len() < MIN_PAIRS || hat_samples.len() != tilde_samples.len() {
        return Err(EstimatorError::TooFewPairs {
            needed: MIN_PAIRS,
            got: hat_samples.len().min(tilde_samples.len()),
        });
    }
    let n = hat_samples.len() as f64;
    let width = 2 * hat_samples[0].dim();
    let mut mean_hat = vec![0.0; width];
    let mut mean_tilde = vec![0.0; width];
    for (h, t) in hat_samples.iter().zip(tilde_samples) {
        for ((mh, mt), (hv, tv)) in mean_hat
            .iter_mut()
            .zip(mean_tilde.iter_mut())
            .zip(h.flat().iter().zip(t.flat().iter()))
        {
            *mh += hv;
            *mt += tv;
        }
    }
    for v in mean_hat.iter_mut().chain(mean_tilde.iter_mut()) {
        *v /= n;
    }
    let mut cov = vec![0.0; width];
    let mut var = vec![0.0; width];
    for (h, t) in hat_samples.iter().zip(tilde_samples) {
        for (i, (hv, tv)) in h.flat().iter().zip(t.flat().iter()).enumerate() {
            let dh = hv - mean_hat[i];
            let dt = tv - mean_tilde[i];
            cov[i] += dh * dt;
            var[i] += dt * dt;
        }
    }
    let coeff = cov
        .iter()
        .zip(&var)
        .map(|(c, v)| if *v / (n - 1.0) < 1e-14 { 0.0 } else { c / v })
        .collect();
    Ok(ControlCoeff { coeff })
}
