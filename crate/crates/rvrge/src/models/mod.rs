//! Benchmark posteriors implementing [`LogDensityModel`](crate::model::LogDensityModel):
//! an exact-Gaussian test fixture, a hierarchical Poisson GLM, and a Bayesian
//! neural network for regression, plus dataset generation and ingestion.

mod bnn;
mod data;
mod frisk;
mod gaussian;

pub use bnn::{build_bnn_model, BnnConfig, BnnModel};
pub use data::{
    generate_frisk_synthetic, generate_regression_synthetic, load_frisk_csv, load_regression_csv,
    write_frisk_csv, FriskDataset, RegressionDataset,
};
pub use frisk::{build_frisk_model, FriskModel};
pub use gaussian::{build_gaussian_model, GaussianTarget};
