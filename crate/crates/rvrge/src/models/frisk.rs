//! Hierarchical Poisson GLM over an ethnicity-group x precinct grid.
//!
//! Latent layout: `z = [mu, log_var_alpha, log_var_beta, alpha_1..alpha_E,
//! beta_1..beta_P]`, so `D = 3 + E + P`. The log rate of cell (e, p) is
//! `mu + alpha_e + beta_p + ln N_ep`. The mean offset and the two group
//! log-variances carry N(0, 10^2) priors; the group effects are centered
//! normals with variance `exp(log_var)`. The Poisson normalizing constant is
//! included so objective values sit on the true evidence scale.

use super::data::FriskDataset;
use crate::model::{LogDensityModel, ModelError, ModelResult, PreparedPoint};
use crate::numerics::Mat;

const HYPER_VAR: f64 = 100.0;
const LN_2PI: f64 = 1.8378770664093453;

pub struct FriskModel {
    data: FriskDataset,
    /// Sum over cells of ln(Y_ep!) + Y_ep ln N_ep, constant in z.
    constant: f64,
}

pub fn build_frisk_model(data: FriskDataset) -> ModelResult<FriskModel> {
    data.validate()?;
    let max_y = *data.events.iter().max().unwrap();
    // ln k! table up to the largest observed count
    let mut ln_fact = vec![0.0f64; (max_y + 1) as usize];
    for k in 1..=max_y as usize {
        ln_fact[k] = ln_fact[k - 1] + (k as f64).ln();
    }
    let mut constant = 0.0;
    for (&y, &n) in data.events.iter().zip(&data.exposures) {
        constant += y as f64 * (n as f64).ln() - ln_fact[y as usize];
    }
    Ok(FriskModel { data, constant })
}

/// View of one latent vector in the frisk layout.
struct Latents<'a> {
    mu: f64,
    log_var_alpha: f64,
    log_var_beta: f64,
    alphas: &'a [f64],
    betas: &'a [f64],
}

impl FriskModel {
    pub fn groups(&self) -> usize {
        self.data.groups
    }

    pub fn precincts(&self) -> usize {
        self.data.precincts
    }

    fn split<'a>(&self, z: &'a [f64]) -> ModelResult<Latents<'a>> {
        if z.len() != self.dim() {
            return Err(ModelError::DimMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        let e = self.data.groups;
        Ok(Latents {
            mu: z[0],
            log_var_alpha: z[1],
            log_var_beta: z[2],
            alphas: &z[3..3 + e],
            betas: &z[3 + e..],
        })
    }

    /// Poisson rates exp(eta) for every cell; errors out on overflow.
    fn rates(&self, l: &Latents) -> ModelResult<Vec<f64>> {
        let mut rates = Vec::with_capacity(self.data.events.len());
        for e in 0..self.data.groups {
            for p in 0..self.data.precincts {
                let n = self.data.exposures[e * self.data.precincts + p] as f64;
                let eta = l.mu + l.alphas[e] + l.betas[p] + n.ln();
                let r = eta.exp();
                if !r.is_finite() {
                    return Err(ModelError::NonFinite);
                }
                rates.push(r);
            }
        }
        Ok(rates)
    }

    fn hvp_with_rates(&self, l: &Latents, rates: &[f64], v: &[f64]) -> Vec<f64> {
        let (ne, np) = (self.data.groups, self.data.precincts);
        let inv_va = (-l.log_var_alpha).exp();
        let inv_vb = (-l.log_var_beta).exp();
        let (v_mu, v_la, v_lb) = (v[0], v[1], v[2]);
        let va = &v[3..3 + ne];
        let vb = &v[3 + ne..];

        let mut out = vec![0.0; self.dim()];
        for e in 0..ne {
            for p in 0..np {
                let w = rates[e * np + p] * (v_mu + va[e] + vb[p]);
                out[0] -= w;
                out[3 + e] -= w;
                out[3 + ne + p] -= w;
            }
        }
        out[0] -= v_mu / HYPER_VAR;

        let sum_a_sq: f64 = l.alphas.iter().map(|a| a * a).sum();
        let sum_b_sq: f64 = l.betas.iter().map(|b| b * b).sum();
        out[1] = inv_va * crate::numerics::dot(l.alphas, va)
            + (-0.5 * sum_a_sq * inv_va - 1.0 / HYPER_VAR) * v_la;
        out[2] = inv_vb * crate::numerics::dot(l.betas, vb)
            + (-0.5 * sum_b_sq * inv_vb - 1.0 / HYPER_VAR) * v_lb;
        for e in 0..ne {
            out[3 + e] += -inv_va * va[e] + l.alphas[e] * inv_va * v_la;
        }
        for p in 0..np {
            out[3 + ne + p] += -inv_vb * vb[p] + l.betas[p] * inv_vb * v_lb;
        }
        out
    }
}

impl LogDensityModel for FriskModel {
    fn dim(&self) -> usize {
        3 + self.data.groups + self.data.precincts
    }

    fn logp(&self, z: &[f64]) -> ModelResult<f64> {
        let l = self.split(z)?;
        let rates = self.rates(&l)?;
        let np = self.data.precincts;
        let mut lp = self.constant;
        for e in 0..self.data.groups {
            for p in 0..np {
                let y = self.data.events[e * np + p] as f64;
                lp += y * (l.mu + l.alphas[e] + l.betas[p]) - rates[e * np + p];
            }
        }
        // hyper priors N(0, 10^2) on mu and the log-variances
        for v in [l.mu, l.log_var_alpha, l.log_var_beta] {
            lp += -0.5 * v * v / HYPER_VAR - 0.5 * (HYPER_VAR.ln() + LN_2PI);
        }
        // group effects N(0, exp(log_var))
        let inv_va = (-l.log_var_alpha).exp();
        for a in l.alphas {
            lp += -0.5 * a * a * inv_va - 0.5 * (l.log_var_alpha + LN_2PI);
        }
        let inv_vb = (-l.log_var_beta).exp();
        for b in l.betas {
            lp += -0.5 * b * b * inv_vb - 0.5 * (l.log_var_beta + LN_2PI);
        }
        if !lp.is_finite() {
            return Err(ModelError::NonFinite);
        }
        Ok(lp)
    }

    fn grad_logp(&self, z: &[f64]) -> ModelResult<Vec<f64>> {
        let l = self.split(z)?;
        let rates = self.rates(&l)?;
        let (ne, np) = (self.data.groups, self.data.precincts);
        let mut grad = vec![0.0; self.dim()];
        for e in 0..ne {
            for p in 0..np {
                let resid = self.data.events[e * np + p] as f64 - rates[e * np + p];
                grad[0] += resid;
                grad[3 + e] += resid;
                grad[3 + ne + p] += resid;
            }
        }
        grad[0] -= l.mu / HYPER_VAR;

        let inv_va = (-l.log_var_alpha).exp();
        let inv_vb = (-l.log_var_beta).exp();
        let sum_a_sq: f64 = l.alphas.iter().map(|a| a * a).sum();
        let sum_b_sq: f64 = l.betas.iter().map(|b| b * b).sum();
        grad[1] = 0.5 * sum_a_sq * inv_va - 0.5 * ne as f64 - l.log_var_alpha / HYPER_VAR;
        grad[2] = 0.5 * sum_b_sq * inv_vb - 0.5 * np as f64 - l.log_var_beta / HYPER_VAR;
        for e in 0..ne {
            grad[3 + e] -= l.alphas[e] * inv_va;
        }
        for p in 0..np {
            grad[3 + ne + p] -= l.betas[p] * inv_vb;
        }
        Ok(grad)
    }

    fn hvp(&self, z: &[f64], v: &[f64]) -> ModelResult<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(ModelError::DimMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        let l = self.split(z)?;
        let rates = self.rates(&l)?;
        Ok(self.hvp_with_rates(&l, &rates, v))
    }

    fn has_hessian_diag(&self) -> bool {
        true
    }

    fn hessian_diag(&self, z: &[f64]) -> ModelResult<Vec<f64>> {
        let l = self.split(z)?;
        let rates = self.rates(&l)?;
        let (ne, np) = (self.data.groups, self.data.precincts);
        let inv_va = (-l.log_var_alpha).exp();
        let inv_vb = (-l.log_var_beta).exp();
        let mut diag = vec![0.0; self.dim()];
        for e in 0..ne {
            for p in 0..np {
                let r = rates[e * np + p];
                diag[0] -= r;
                diag[3 + e] -= r;
                diag[3 + ne + p] -= r;
            }
        }
        diag[0] -= 1.0 / HYPER_VAR;
        let sum_a_sq: f64 = l.alphas.iter().map(|a| a * a).sum();
        let sum_b_sq: f64 = l.betas.iter().map(|b| b * b).sum();
        diag[1] = -0.5 * sum_a_sq * inv_va - 1.0 / HYPER_VAR;
        diag[2] = -0.5 * sum_b_sq * inv_vb - 1.0 / HYPER_VAR;
        for e in 0..ne {
            diag[3 + e] -= inv_va;
        }
        for p in 0..np {
            diag[3 + ne + p] -= inv_vb;
        }
        Ok(diag)
    }

    fn has_full_hessian(&self) -> bool {
        true
    }

    fn full_hessian(&self, z: &[f64]) -> ModelResult<Mat> {
        let d = self.dim();
        let l = self.split(z)?;
        let rates = self.rates(&l)?;
        let mut h = Mat::zeros(d, d);
        let mut basis = vec![0.0; d];
        for j in 0..d {
            basis[j] = 1.0;
            let col = self.hvp_with_rates(&l, &rates, &basis);
            for i in 0..d {
                h[(i, j)] = col[i];
            }
            basis[j] = 0.0;
        }
        Ok(h)
    }

    fn prepare(&self, z0: &[f64]) -> ModelResult<PreparedPoint<'_>> {
        let grad = self.grad_logp(z0)?;
        let rates = self.rates(&self.split(z0)?)?;
        Ok(PreparedPoint::with_cache(
            self,
            z0,
            grad,
            move |_model, z0, v| {
                if v.len() != self.dim() {
                    return Err(ModelError::DimMismatch {
                        expected: self.dim(),
                        got: v.len(),
                    });
                }
                let l = self.split(z0)?;
                Ok(self.hvp_with_rates(&l, &rates, v))
            },
        ))
    }

    fn as_dyn(&self) -> &dyn LogDensityModel {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        fd_grad_oracle, fd_hessian_diag_oracle, fd_hvp_oracle, hessian_capability_gap, FdConfig,
    };
    use crate::models::data::generate_frisk_synthetic;
    use crate::numerics::{normal_draws, rel_err, RngStream, StreamPurpose};

    fn tiny_model() -> FriskModel {
        let data = FriskDataset {
            groups: 1,
            precincts: 1,
            events: vec![1],
            exposures: vec![1],
            seed: 0,
            hyper_scale: 1.0,
        };
        build_frisk_model(data).unwrap()
    }

    #[test]
    fn hand_computed_logp() {
        let m = tiny_model();
        let lp = m.logp(&[0.0; 5]).unwrap();
        assert!((lp - (-12.502448)).abs() < 1e-6, "logp {lp}");
    }

    #[test]
    fn default_synthetic_shape_dim() {
        let m = build_frisk_model(generate_frisk_synthetic(3, 31, 0)).unwrap();
        assert_eq!(m.dim(), 37);
    }

    #[test]
    fn grad_matches_fd_oracle() {
        let m = build_frisk_model(generate_frisk_synthetic(3, 7, 2)).unwrap();
        let z = perturbed_point(&m, 0);
        let analytic = m.grad_logp(&z).unwrap();
        let fd = fd_grad_oracle(&m, &z, FdConfig::default()).unwrap();
        // the log density carries a large additive data constant, so central
        // differences lose ~|logp| * eps / h in absolute terms; allow that
        // floor on top of the relative tolerance
        let fd_floor = m.logp(&z).unwrap().abs() * f64::EPSILON / FdConfig::default().step * 10.0;
        for (a, b) in analytic.iter().zip(&fd) {
            assert!(
                (a - b).abs() < 1e-6 * a.abs() + fd_floor.max(1e-8),
                "{a} vs {b}"
            );
        }
    }

    #[test]
    fn hvp_matches_fd_oracle() {
        let m = build_frisk_model(generate_frisk_synthetic(2, 5, 3)).unwrap();
        let z = perturbed_point(&m, 1);
        let v = normal_draws(RngStream::new(41, 0, 1, StreamPurpose::Diagnostic), m.dim());
        let analytic = m.hvp(&z, &v).unwrap();
        let fd = fd_hvp_oracle(&m, &z, &v, FdConfig::default()).unwrap();
        let err = crate::numerics::norm2(
            &analytic.iter().zip(&fd).map(|(a, b)| a - b).collect::<Vec<_>>(),
        ) / crate::numerics::norm2(&analytic).max(1.0);
        assert!(err < 1e-6, "hvp fd gap {err}");
    }

    #[test]
    fn hessian_diag_matches_fd_oracle() {
        let m = build_frisk_model(generate_frisk_synthetic(2, 4, 4)).unwrap();
        let z = perturbed_point(&m, 2);
        let analytic = m.hessian_diag(&z).unwrap();
        let fd = fd_hessian_diag_oracle(&m, &z, FdConfig::default()).unwrap();
        for (a, b) in analytic.iter().zip(&fd) {
            assert!(rel_err(*a, *b) < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn hessian_capabilities_consistent() {
        let m = build_frisk_model(generate_frisk_synthetic(2, 6, 5)).unwrap();
        let z = perturbed_point(&m, 3);
        let v = normal_draws(RngStream::new(42, 0, 2, StreamPurpose::Diagnostic), m.dim());
        let gap = hessian_capability_gap(&m, &z, &v).unwrap();
        assert!(gap < 1e-10, "capability gap {gap}");
    }

    #[test]
    fn prepared_point_bit_identical() {
        let m = build_frisk_model(generate_frisk_synthetic(3, 5, 6)).unwrap();
        let z = perturbed_point(&m, 4);
        let v = normal_draws(RngStream::new(43, 0, 3, StreamPurpose::Diagnostic), m.dim());
        let prepared = m.prepare(&z).unwrap();
        assert_eq!(prepared.grad(), m.grad_logp(&z).unwrap().as_slice());
        assert_eq!(prepared.hvp(&v).unwrap(), m.hvp(&z, &v).unwrap());
    }

    #[test]
    fn effect_block_concave() {
        // Hessian restricted to (mu, alpha, beta) with log-variances fixed is
        // negative semidefinite: -H_block + eps*I must admit a Cholesky factor.
        let m = build_frisk_model(generate_frisk_synthetic(3, 8, 7)).unwrap();
        for probe in 0..3 {
            let z = perturbed_point(&m, 10 + probe);
            let h = m.full_hessian(&z).unwrap();
            let idx: Vec<usize> = std::iter::once(0).chain(3..m.dim()).collect();
            let k = idx.len();
            let mut block = Mat::zeros(k, k);
            for (bi, &i) in idx.iter().enumerate() {
                for (bj, &j) in idx.iter().enumerate() {
                    block[(bi, bj)] = -h[(i, j)];
                }
            }
            for i in 0..k {
                block[(i, i)] += 1e-8;
            }
            assert!(block.cholesky().is_some(), "effect block not concave");
        }
    }

    #[test]
    fn overflow_reports_non_finite() {
        let m = tiny_model();
        assert!(matches!(
            m.logp(&[800.0, 0.0, 0.0, 0.0, 0.0]),
            Err(ModelError::NonFinite)
        ));
    }

    fn perturbed_point(m: &FriskModel, idx: u64) -> Vec<f64> {
        normal_draws(RngStream::new(99, 0, idx, StreamPurpose::Diagnostic), m.dim())
            .into_iter()
            .map(|v| 0.3 * v)
            .collect()
    }
}
