//! Monte Carlo variational inference with reduced-variance reparameterization
//! gradients for diagonal Gaussian approximations.
//!
//! The crate is layered bottom-up:
//!
//! * [`numerics`]: small dense linear algebra, counter-based random streams,
//!   and variance summaries.
//! * [`model`]: the log-density model trait with tiered curvature
//!   capabilities and finite-difference oracles for tests.
//! * [`models`]: concrete targets (multivariate Gaussian, hierarchical
//!   Poisson GLM, Bayesian neural network regression) plus dataset I/O.
//! * [`vardist`]: the diagonal Gaussian variational family and its
//!   reparameterization machinery.
//! * [`estimators`]: the plain Monte Carlo gradient estimator and the
//!   control-variate family built on a linearization of the data term.
//! * [`optimize`]: stochastic ascent loops (SGD, Adam) with tracing.
//! * [`harness`]: variance-reduction reporting and convergence experiments.

pub mod estimators;
pub mod harness;
pub mod model;
pub mod models;
pub mod numerics;
pub mod optimize;
pub mod vardist;

pub use estimators::{
    apply_cv, cv_expectation, cv_sample, estimate_control_coeff, loo_diag_estimate, mc_rge,
    mc_rge_batch, rv_rge_batch, ControlCoeff, EstimatorError, EstimatorKind, GradEstimate,
};
pub use model::{
    fd_grad_oracle, fd_hessian_diag_oracle, fd_hvp_oracle, FdConfig, LogDensityModel, ModelError,
    ModelResult, PreparedPoint,
};
pub use numerics::{Mat, RngStream, StreamPurpose};
pub use vardist::{log_q, transform, NoiseBatch, VarParams};
