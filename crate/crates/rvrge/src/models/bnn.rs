//! Bayesian neural network regression: one ReLU hidden layer, scalar output,
//! a shared normal prior over all weights, and Gamma(1, 0.1) shape-rate
//! hypers on the weight precision and the observation precision. Both
//! precisions are optimized on the log scale with the change-of-variable
//! Jacobian included.
//!
//! Latent layout: `[W1 (hidden x features, row-major), b1, W2, b2, u_alpha,
//! u_tau]` where `alpha = exp(u_alpha)` is the weight precision and
//! `tau = exp(u_tau)` the noise precision.
//!
//! The Hessian-vector product is an exact forward-over-reverse sweep: the
//! backprop pass is repeated in dual numbers along the requested direction.
//! ReLU's second derivative is taken as 0 everywhere and the subgradient at
//! exactly 0 is 0; kinks have measure zero under the Gaussian variational
//! distribution.

use super::data::RegressionDataset;
use crate::model::{LogDensityModel, ModelError, ModelResult, PreparedPoint};
use crate::numerics::Mat;

const LN_2PI: f64 = 1.8378770664093453;
const GAMMA_RATE: f64 = 0.1;
/// Above this dimension, materializing the Hessian is refused.
const DENSE_HESSIAN_LIMIT: usize = 200;

#[derive(Debug, Clone, Copy)]
pub struct BnnConfig {
    pub hidden: usize,
}

impl Default for BnnConfig {
    fn default() -> Self {
        BnnConfig { hidden: 50 }
    }
}

pub struct BnnModel {
    data: RegressionDataset,
    hidden: usize,
}

pub fn build_bnn_model(data: RegressionDataset, cfg: BnnConfig) -> ModelResult<BnnModel> {
    if cfg.hidden == 0 {
        return Err(ModelError::Invalid("hidden layer must be non-empty".into()));
    }
    if data.rows == 0 || data.features == 0 {
        return Err(ModelError::Invalid("empty regression dataset".into()));
    }
    Ok(BnnModel {
        data,
        hidden: cfg.hidden,
    })
}

/// Borrowed view of one latent vector in the layout above.
struct Params<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: f64,
    u_alpha: f64,
    u_tau: f64,
}

/// Forward-pass state for the whole dataset at one parameter point.
struct Forward {
    /// Hidden activations per row, post-ReLU (rows x hidden).
    h: Vec<f64>,
    /// ReLU masks per row (rows x hidden).
    mask: Vec<f64>,
    /// Residuals y_n - phi_n.
    resid: Vec<f64>,
    sum_sq_resid: f64,
    sum_sq_weights: f64,
    alpha: f64,
    tau: f64,
}

impl BnnModel {
    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Smallest |hidden pre-activation| over all data rows. Points with a
    /// small gap sit near a ReLU kink, where finite differences of the
    /// gradient are unreliable.
    pub fn kink_gap(&self, z: &[f64]) -> ModelResult<f64> {
        let p = self.split(z)?;
        let mut min_abs = f64::INFINITY;
        for n in 0..self.data.rows {
            let x = self.data.row(n);
            for j in 0..self.hidden {
                let mut a = p.b1[j];
                for k in 0..self.data.features {
                    a += p.w1[j * self.data.features + k] * x[k];
                }
                min_abs = min_abs.min(a.abs());
            }
        }
        Ok(min_abs)
    }

    fn n_weights(&self) -> usize {
        self.hidden * self.data.features + 2 * self.hidden + 1
    }

    fn split<'a>(&self, z: &'a [f64]) -> ModelResult<Params<'a>> {
        if z.len() != self.dim() {
            return Err(ModelError::DimMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        let (hp, h) = (self.hidden * self.data.features, self.hidden);
        Ok(Params {
            w1: &z[..hp],
            b1: &z[hp..hp + h],
            w2: &z[hp + h..hp + 2 * h],
            b2: z[hp + 2 * h],
            u_alpha: z[hp + 2 * h + 1],
            u_tau: z[hp + 2 * h + 2],
        })
    }

    fn forward(&self, p: &Params) -> ModelResult<Forward> {
        let (n_rows, n_feat, n_hid) = (self.data.rows, self.data.features, self.hidden);
        let mut h = vec![0.0; n_rows * n_hid];
        let mut mask = vec![0.0; n_rows * n_hid];
        let mut resid = vec![0.0; n_rows];
        let mut sum_sq_resid = 0.0;
        for n in 0..n_rows {
            let x = self.data.row(n);
            let mut phi = p.b2;
            for j in 0..n_hid {
                let mut a = p.b1[j];
                let row = &p.w1[j * n_feat..(j + 1) * n_feat];
                for k in 0..n_feat {
                    a += row[k] * x[k];
                }
                if a > 0.0 {
                    h[n * n_hid + j] = a;
                    mask[n * n_hid + j] = 1.0;
                    phi += p.w2[j] * a;
                }
            }
            if !phi.is_finite() {
                return Err(ModelError::NonFinite);
            }
            resid[n] = self.data.y[n] - phi;
            sum_sq_resid += resid[n] * resid[n];
        }
        let sum_sq_weights = p.w1.iter().chain(p.b1).chain(p.w2).map(|w| w * w).sum::<f64>()
            + p.b2 * p.b2;
        let (alpha, tau) = (p.u_alpha.exp(), p.u_tau.exp());
        if !alpha.is_finite() || !tau.is_finite() {
            return Err(ModelError::NonFinite);
        }
        Ok(Forward {
            h,
            mask,
            resid,
            sum_sq_resid,
            sum_sq_weights,
            alpha,
            tau,
        })
    }

    fn grad_with_forward(&self, p: &Params, fwd: &Forward) -> Vec<f64> {
        let (n_rows, n_feat, n_hid) = (self.data.rows, self.data.features, self.hidden);
        let d = self.dim();
        let hp = n_hid * n_feat;
        let mut grad = vec![0.0; d];
        for n in 0..n_rows {
            let x = self.data.row(n);
            let delta = fwd.tau * fwd.resid[n];
            grad[hp + 2 * n_hid] += delta; // b2
            for j in 0..n_hid {
                if fwd.mask[n * n_hid + j] == 0.0 {
                    continue;
                }
                grad[hp + n_hid + j] += delta * fwd.h[n * n_hid + j]; // W2
                let back = delta * p.w2[j];
                grad[hp + j] += back; // b1
                let row = &mut grad[j * n_feat..(j + 1) * n_feat];
                for k in 0..n_feat {
                    row[k] += back * x[k];
                }
            }
        }
        // weight prior
        let weight_grad = |z: f64| -fwd.alpha * z;
        let mut z_iter = p.w1.iter().chain(p.b1).chain(p.w2);
        for g in grad.iter_mut().take(hp + 2 * n_hid) {
            *g += weight_grad(*z_iter.next().unwrap());
        }
        grad[hp + 2 * n_hid] += weight_grad(p.b2);
        // log-precision hypers, Jacobians included
        let n_w = self.n_weights() as f64;
        grad[d - 2] = -0.5 * fwd.alpha * fwd.sum_sq_weights + 0.5 * n_w - GAMMA_RATE * fwd.alpha
            + 1.0;
        grad[d - 1] = -0.5 * fwd.tau * fwd.sum_sq_resid + 0.5 * self.data.rows as f64
            - GAMMA_RATE * fwd.tau
            + 1.0;
        grad
    }

    /// Directional derivative of the gradient: repeat the backward pass in
    /// dual numbers along `v` using the cached forward state.
    fn hvp_with_forward(&self, p: &Params, fwd: &Forward, v: &[f64]) -> ModelResult<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(ModelError::DimMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        let (n_rows, n_feat, n_hid) = (self.data.rows, self.data.features, self.hidden);
        let d = self.dim();
        let hp = n_hid * n_feat;
        let vp = self.split(v).expect("checked above");
        let d_alpha = fwd.alpha * vp.u_alpha;
        let d_tau = fwd.tau * vp.u_tau;

        let mut out = vec![0.0; d];
        let mut sum_r_dr = 0.0;
        let mut dh = vec![0.0; n_hid];
        for n in 0..n_rows {
            let x = self.data.row(n);
            // tangent forward
            let mut d_phi = vp.b2;
            for j in 0..n_hid {
                let mut da = vp.b1[j];
                let vrow = &vp.w1[j * n_feat..(j + 1) * n_feat];
                for k in 0..n_feat {
                    da += vrow[k] * x[k];
                }
                da *= fwd.mask[n * n_hid + j];
                dh[j] = da;
                d_phi += vp.w2[j] * fwd.h[n * n_hid + j] + p.w2[j] * da;
            }
            let dr = -d_phi;
            sum_r_dr += fwd.resid[n] * dr;
            let delta = fwd.tau * fwd.resid[n];
            let d_delta = d_tau * fwd.resid[n] + fwd.tau * dr;
            // tangent backward
            out[hp + 2 * n_hid] += d_delta;
            for j in 0..n_hid {
                if fwd.mask[n * n_hid + j] == 0.0 {
                    continue;
                }
                out[hp + n_hid + j] += d_delta * fwd.h[n * n_hid + j] + delta * dh[j];
                let d_back = d_delta * p.w2[j] + delta * vp.w2[j];
                out[hp + j] += d_back;
                let row = &mut out[j * n_feat..(j + 1) * n_feat];
                for k in 0..n_feat {
                    row[k] += d_back * x[k];
                }
            }
        }
        // weight prior tangent: -d_alpha * w - alpha * v_w
        let mut sum_w_vw = 0.0;
        {
            let z_iter = p.w1.iter().chain(p.b1).chain(p.w2).chain(std::iter::once(&p.b2));
            let v_iter = vp.w1.iter().chain(vp.b1).chain(vp.w2).chain(std::iter::once(&vp.b2));
            for (i, (w, vw)) in z_iter.zip(v_iter).enumerate() {
                out[i] += -d_alpha * w - fwd.alpha * vw;
                sum_w_vw += w * vw;
            }
        }
        out[d - 2] = -0.5 * d_alpha * fwd.sum_sq_weights - fwd.alpha * sum_w_vw
            - GAMMA_RATE * d_alpha;
        out[d - 1] = -0.5 * d_tau * fwd.sum_sq_resid - fwd.tau * sum_r_dr - GAMMA_RATE * d_tau;
        Ok(out)
    }
}

impl LogDensityModel for BnnModel {
    fn dim(&self) -> usize {
        (self.data.features + 1) * self.hidden + self.hidden + 1 + 2
    }

    fn logp(&self, z: &[f64]) -> ModelResult<f64> {
        let p = self.split(z)?;
        let fwd = self.forward(&p)?;
        let n = self.data.rows as f64;
        let n_w = self.n_weights() as f64;
        let mut lp = -0.5 * fwd.tau * fwd.sum_sq_resid + 0.5 * n * p.u_tau - 0.5 * n * LN_2PI;
        lp += -0.5 * fwd.alpha * fwd.sum_sq_weights + 0.5 * n_w * p.u_alpha - 0.5 * n_w * LN_2PI;
        // Gamma(1, 0.1) on alpha and tau, plus the exp-transform Jacobians
        lp += GAMMA_RATE.ln() - GAMMA_RATE * fwd.alpha + p.u_alpha;
        lp += GAMMA_RATE.ln() - GAMMA_RATE * fwd.tau + p.u_tau;
        if !lp.is_finite() {
            return Err(ModelError::NonFinite);
        }
        Ok(lp)
    }

    fn grad_logp(&self, z: &[f64]) -> ModelResult<Vec<f64>> {
        let p = self.split(z)?;
        let fwd = self.forward(&p)?;
        Ok(self.grad_with_forward(&p, &fwd))
    }

    fn hvp(&self, z: &[f64], v: &[f64]) -> ModelResult<Vec<f64>> {
        let p = self.split(z)?;
        let fwd = self.forward(&p)?;
        self.hvp_with_forward(&p, &fwd, v)
    }

    fn has_hessian_diag(&self) -> bool {
        self.dim() <= DENSE_HESSIAN_LIMIT
    }

    fn hessian_diag(&self, z: &[f64]) -> ModelResult<Vec<f64>> {
        if !self.has_hessian_diag() {
            return Err(ModelError::Capability("hessian_diag"));
        }
        Ok(self.full_hessian(z)?.diagonal())
    }

    fn has_full_hessian(&self) -> bool {
        self.dim() <= DENSE_HESSIAN_LIMIT
    }

    fn full_hessian(&self, z: &[f64]) -> ModelResult<Mat> {
        if !self.has_full_hessian() {
            return Err(ModelError::Capability("full_hessian"));
        }
        let d = self.dim();
        let p = self.split(z)?;
        let fwd = self.forward(&p)?;
        let mut h = Mat::zeros(d, d);
        let mut basis = vec![0.0; d];
        for j in 0..d {
            basis[j] = 1.0;
            let col = self.hvp_with_forward(&p, &fwd, &basis)?;
            for i in 0..d {
                h[(i, j)] = col[i];
            }
            basis[j] = 0.0;
        }
        Ok(h)
    }

    fn prepare(&self, z0: &[f64]) -> ModelResult<PreparedPoint<'_>> {
        let p = self.split(z0)?;
        let fwd = self.forward(&p)?;
        let grad = self.grad_with_forward(&p, &fwd);
        Ok(PreparedPoint::with_cache(
            self,
            z0,
            grad,
            move |_model, z0, v| {
                let p = self.split(z0)?;
                self.hvp_with_forward(&p, &fwd, v)
            },
        ))
    }

    fn as_dyn(&self) -> &dyn LogDensityModel {
        self
    }
}
