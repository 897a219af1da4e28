//! Dense small-matrix linear algebra, deterministic Gaussian sampling, and
//! the summary statistics used throughout the crate.
//!
//! All arithmetic is f64. Vectors are plain `Vec<f64>`; [`Mat`] is a row-major
//! dense matrix sized for posteriors of at most a few hundred dimensions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat: data length != rows*cols");
        Mat { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let n = self.rows.min(self.cols);
        (0..n).map(|i| self[(i, i)]).collect()
    }

    /// Maximum absolute asymmetry |A - A^T|, relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        let scale = self
            .data
            .iter()
            .fold(1.0_f64, |acc, v| acc.max(v.abs()));
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst / scale
    }

    /// Lower-triangular Cholesky factor of a symmetric positive definite
    /// matrix. Returns `None` when the matrix is not positive definite.
    pub fn cholesky(&self) -> Option<Mat> {
        assert_eq!(self.rows, self.cols, "cholesky: matrix must be square");
        let n = self.rows;
        let mut l = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut sum = self[(i, j)];
                for k in 0..j {
                    sum -= l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    if sum <= 0.0 || !sum.is_finite() {
                        return None;
                    }
                    l[(i, i)] = sum.sqrt();
                } else {
                    l[(i, j)] = sum / l[(j, j)];
                }
            }
        }
        Some(l)
    }

    /// ln det of an SPD matrix via its Cholesky factor.
    pub fn ln_det_spd(&self) -> Option<f64> {
        let l = self.cholesky()?;
        Some(2.0 * (0..self.rows).map(|i| l[(i, i)].ln()).sum::<f64>())
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Matrix-vector product.
pub fn mat_vec(a: &Mat, x: &[f64]) -> Vec<f64> {
    assert_eq!(a.cols(), x.len(), "mat_vec: dimension mismatch");
    (0..a.rows())
        .map(|i| (0..a.cols()).map(|j| a[(i, j)] * x[j]).sum())
        .collect()
}

/// What a random stream is consumed for. Distinct purposes yield disjoint
/// streams even at the same (iteration, sample) coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StreamPurpose {
    /// Noise draws feeding gradient estimation.
    Noise,
    /// Noise draws feeding objective evaluation, disjoint from `Noise`.
    Eval,
    /// Synthetic dataset generation.
    Data,
    /// Everything else: test probes, random checkpoints, diagnostics.
    Diagnostic,
}

impl StreamPurpose {
    fn tag(self) -> u64 {
        match self {
            StreamPurpose::Noise => 0x4e4f4953,
            StreamPurpose::Eval => 0x4556414c,
            StreamPurpose::Data => 0x44415441,
            StreamPurpose::Diagnostic => 0x44494147,
        }
    }
}

/// Counter-based random stream: a (seed, iteration, sample-index, purpose)
/// value that deterministically identifies a generator state. Deriving the
/// generator from the full coordinate means parallel evaluation order can
/// never change results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub iteration: u64,
    pub index: u64,
    pub purpose: StreamPurpose,
}

impl RngStream {
    pub fn new(seed: u64, iteration: u64, index: u64, purpose: StreamPurpose) -> Self {
        RngStream {
            seed,
            iteration,
            index,
            purpose,
        }
    }

    /// Instantiate the generator for this stream coordinate.
    pub fn rng(&self) -> ChaCha12Rng {
        let mut h = splitmix(self.seed ^ 0x243f6a8885a308d3);
        h = splitmix(h ^ self.iteration);
        h = splitmix(h ^ self.index);
        h = splitmix(h ^ self.purpose.tag());
        ChaCha12Rng::seed_from_u64(h)
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// `n` standard-normal draws, deterministic given the stream.
pub fn normal_draws(stream: RngStream, n: usize) -> Vec<f64> {
    assert!(n >= 1, "normal_draws: n must be >= 1");
    let mut rng = stream.rng();
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Unbiased (n-1 denominator) per-component sample variance.
pub fn component_variances(samples: &[Vec<f64>]) -> Vec<f64> {
    assert!(
        samples.len() >= 2,
        "component_variances: need at least 2 samples"
    );
    let n = samples.len() as f64;
    let dim = samples[0].len();
    for s in samples {
        assert_eq!(s.len(), dim, "component_variances: ragged samples");
    }
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; dim];
    for s in samples {
        for ((v, x), m) in var.iter_mut().zip(s).zip(&mean) {
            let d = x - m;
            *v += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= n - 1.0;
    }
    var
}

/// Unbiased sample variance of a set of scalars.
pub fn scalar_variance(values: &[f64]) -> f64 {
    assert!(values.len() >= 2, "scalar_variance: need at least 2 values");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

/// Unbiased sample variance of the Euclidean norms of the samples.
pub fn norm_variance(samples: &[Vec<f64>]) -> f64 {
    assert!(samples.len() >= 2, "norm_variance: need at least 2 samples");
    let norms: Vec<f64> = samples
        .iter()
        .map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    scalar_variance(&norms)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// |a - b| / max(|a|, |b|, 1): relative error that stays sane near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}
