//! Multivariate Gaussian target with a dense precision matrix. The gradient
//! is linear in z, so the linearized control variate is exact here; every
//! estimator-exactness test leans on this fixture.

use crate::model::{LogDensityModel, ModelError, ModelResult};
use crate::numerics::{mat_vec, Mat};

pub struct GaussianTarget {
    mean: Vec<f64>,
    precision: Mat,
    ln_det_precision: f64,
}

/// Build the Gaussian fixture. Fails when the precision matrix is not
/// symmetric positive definite.
pub fn build_gaussian_model(mean: Vec<f64>, precision: Mat) -> ModelResult<GaussianTarget> {
    if precision.rows() != mean.len() || precision.cols() != mean.len() {
        return Err(ModelError::DimMismatch {
            expected: mean.len(),
            got: precision.rows(),
        });
    }
    if precision.asymmetry() > 1e-12 {
        return Err(ModelError::Invalid("precision matrix is not symmetric".into()));
    }
    let ln_det_precision = precision
        .ln_det_spd()
        .ok_or_else(|| ModelError::Invalid("precision matrix is not positive definite".into()))?;
    Ok(GaussianTarget {
        mean,
        precision,
        ln_det_precision,
    })
}

impl GaussianTarget {
    fn centered(&self, z: &[f64]) -> ModelResult<Vec<f64>> {
        if z.len() != self.mean.len() {
            return Err(ModelError::DimMismatch {
                expected: self.mean.len(),
                got: z.len(),
            });
        }
        Ok(z.iter().zip(&self.mean).map(|(zi, mi)| zi - mi).collect())
    }
}

impl LogDensityModel for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn logp(&self, z: &[f64]) -> ModelResult<f64> {
        let c = self.centered(z)?;
        let pc = mat_vec(&self.precision, &c);
        let quad = crate::numerics::dot(&c, &pc);
        let d = self.mean.len() as f64;
        Ok(-0.5 * quad - 0.5 * d * (2.0 * std::f64::consts::PI).ln() + 0.5 * self.ln_det_precision)
    }

    fn grad_logp(&self, z: &[f64]) -> ModelResult<Vec<f64>> {
        let c = self.centered(z)?;
        Ok(mat_vec(&self.precision, &c).into_iter().map(|v| -v).collect())
    }

    fn hvp(&self, _z: &[f64], v: &[f64]) -> ModelResult<Vec<f64>> {
        Ok(mat_vec(&self.precision, v).into_iter().map(|x| -x).collect())
    }

    fn has_hessian_diag(&self) -> bool {
        true
    }

    fn hessian_diag(&self, _z: &[f64]) -> ModelResult<Vec<f64>> {
        Ok(self.precision.diagonal().into_iter().map(|v| -v).collect())
    }

    fn has_full_hessian(&self) -> bool {
        true
    }

    fn full_hessian(&self, _z: &[f64]) -> ModelResult<Mat> {
        let n = self.dim();
        let mut h = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                h[(i, j)] = -self.precision[(i, j)];
            }
        }
        Ok(h)
    }

    fn as_dyn(&self) -> &dyn LogDensityModel {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_mode() {
        let m = build_gaussian_model(vec![0.0], Mat::identity(1)).unwrap();
        let lp = m.logp(&[0.0]).unwrap();
        assert!((lp - (-0.9189385332046727)).abs() < 1e-9);
    }

    #[test]
    fn grad_zero_at_mean() {
        let m = build_gaussian_model(vec![1.0, -2.0], Mat::new(2, 2, vec![2.0, 0.5, 0.5, 3.0]))
            .unwrap();
        let g = m.grad_logp(&[1.0, -2.0]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn hvp_is_negative_precision_product() {
        let m = build_gaussian_model(vec![0.0, 0.0], Mat::new(2, 2, vec![2.0, 0.0, 0.0, 3.0]))
            .unwrap();
        let h = m.hvp(&[0.7, 0.7], &[1.0, 1.0]).unwrap();
        assert_eq!(h, vec![-2.0, -3.0]);
    }

    #[test]
    fn rejects_non_pd_precision() {
        assert!(build_gaussian_model(vec![0.0, 0.0], Mat::new(2, 2, vec![1.0, 2.0, 2.0, 1.0]))
            .is_err());
    }

    #[test]
    fn linearization_residual_is_zero() {
        // f(z) - [f(z0) + H (z - z0)] == 0 identically for this target
        let m = build_gaussian_model(
            vec![0.5, -0.5],
            Mat::new(2, 2, vec![2.0, 0.7, 0.7, 1.5]),
        )
        .unwrap();
        let z0 = [0.1, 0.2];
        let z = [1.3, -0.9];
        let f = m.grad_logp(&z).unwrap();
        let f0 = m.grad_logp(&z0).unwrap();
        let dz: Vec<f64> = z.iter().zip(&z0).map(|(a, b)| a - b).collect();
        let hdz = m.hvp(&z0, &dz).unwrap();
        for i in 0..2 {
            assert!((f[i] - (f0[i] + hdz[i])).abs() < 1e-12);
        }
    }
}
