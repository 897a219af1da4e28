//! Command-line front end: gradient checking, variance reports, single
//! optimization runs, convergence-trace suites, and dataset generation.
//!
//! Exit codes: 0 success, 2 validation failure, 3 capability mismatch,
//! 4 divergence.

use clap::{Args, Parser, Subcommand, ValueEnum};
use rvrge::estimators::EstimatorKind;
use rvrge::harness::{
    convergence_suite, emit_report, run_checkpointing, variance_report, GridSpec, HarnessError,
    ReportFormat, REFERENCE_ITERS,
};
use rvrge::model::{
    fd_grad_oracle, fd_hvp_oracle, hessian_capability_gap, FdConfig, LogDensityModel, ModelError,
};
use rvrge::models::{
    build_bnn_model, build_frisk_model, build_gaussian_model, generate_frisk_synthetic,
    generate_regression_synthetic, load_frisk_csv, load_regression_csv, write_frisk_csv,
    BnnConfig,
};
use rvrge::numerics::{normal_draws, norm2, Mat, RngStream, StreamPurpose};
use rvrge::optimize::{
    optimize_loop, write_config_json, write_trace_csv, OptimConfig, OptimError, OptimizerKind,
};
use rvrge::vardist::VarParams;
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_VALIDATION: u8 = 2;
const EXIT_CAPABILITY: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

#[derive(Parser)]
#[command(name = "rvrge", about = "Monte Carlo variational inference with reduced-variance reparameterization gradients", version)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores). Never
    /// affects numerical output.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelChoice {
    Gaussian,
    Frisk,
    Bnn,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum)]
    model: ModelChoice,
    /// Gaussian target dimension.
    #[arg(long, default_value_t = 5)]
    dim: usize,
    /// Ethnicity groups for the frisk model.
    #[arg(long, default_value_t = 3)]
    eth: usize,
    /// Precincts for the frisk model.
    #[arg(long, default_value_t = 31)]
    precincts: usize,
    /// Hidden units for the BNN model.
    #[arg(long, default_value_t = 50)]
    hidden: usize,
    /// Ingest a dataset CSV instead of generating synthetic data
    /// (frisk and bnn only).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Data rows for the BNN: subsample size when loading a CSV, row count
    /// when generating synthetic data.
    #[arg(long, default_value_t = 100)]
    rows: usize,
}

enum BuiltModel {
    Gaussian(rvrge::models::GaussianTarget),
    Frisk(rvrge::models::FriskModel),
    Bnn(rvrge::models::BnnModel),
}

impl BuiltModel {
    fn as_dyn(&self) -> &dyn LogDensityModel {
        match self {
            BuiltModel::Gaussian(m) => m,
            BuiltModel::Frisk(m) => m,
            BuiltModel::Bnn(m) => m,
        }
    }

    fn bnn(&self) -> Option<&rvrge::models::BnnModel> {
        match self {
            BuiltModel::Bnn(m) => Some(m),
            _ => None,
        }
    }
}

impl ModelArgs {
    fn build(&self, seed: u64) -> Result<BuiltModel, ModelError> {
        match self.model {
            ModelChoice::Gaussian => {
                // seeded dense SPD precision: A^T A / dim + I
                let d = self.dim;
                let entries =
                    normal_draws(RngStream::new(seed, 0, 0, StreamPurpose::Data), d * d);
                let mut precision = Mat::identity(d);
                for i in 0..d {
                    for j in 0..d {
                        let mut acc = 0.0;
                        for k in 0..d {
                            acc += entries[k * d + i] * entries[k * d + j];
                        }
                        precision[(i, j)] += acc / d as f64;
                    }
                }
                let mean = normal_draws(RngStream::new(seed, 0, 1, StreamPurpose::Data), d);
                Ok(BuiltModel::Gaussian(build_gaussian_model(mean, precision)?))
            }
            ModelChoice::Frisk => {
                let data = match &self.data {
                    Some(path) => load_frisk_csv(path)?,
                    None => generate_frisk_synthetic(self.eth, self.precincts, seed),
                };
                Ok(BuiltModel::Frisk(build_frisk_model(data)?))
            }
            ModelChoice::Bnn => {
                let data = match &self.data {
                    Some(path) => load_regression_csv(path, Some(self.rows), seed)?,
                    None => generate_regression_synthetic(self.rows, 11, seed),
                };
                Ok(BuiltModel::Bnn(build_bnn_model(
                    data,
                    BnnConfig {
                        hidden: self.hidden,
                    },
                )?))
            }
        }
    }

    fn name(&self) -> &'static str {
        match self.model {
            ModelChoice::Gaussian => "gaussian",
            ModelChoice::Frisk => "frisk",
            ModelChoice::Bnn => "bnn",
        }
    }
}

#[derive(Args)]
struct InitArgs {
    /// Uniform initial variational mean (default 0).
    #[arg(long)]
    init_mean: Option<f64>,
    /// Uniform initial log standard deviation (default ln 0.1).
    #[arg(long)]
    init_logs: Option<f64>,
}

impl InitArgs {
    fn params(&self, dim: usize) -> VarParams {
        let mut p = VarParams::init(dim);
        if let Some(m) = self.init_mean {
            p.mean = vec![m; dim];
        }
        if let Some(ls) = self.init_logs {
            p.log_scale = vec![ls; dim];
        }
        p
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate analytic gradients, HVPs and Hessians against
    /// finite-difference oracles at seeded random points.
    CheckGrads {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of test points.
        #[arg(long, default_value_t = 20)]
        points: usize,
    },
    /// Estimator variance at the early/mid/late iterates of a seeded MC
    /// reference run, as a percentage of the plain MC estimator.
    VarianceReport {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        init: InitArgs,
        /// Comma-separated estimator kinds (mc,full,diag,hvplocal,hvpmean).
        #[arg(long, value_delimiter = ',', default_value = "mc,full,diag,hvplocal,hvpmean")]
        kinds: Vec<EstimatorKind>,
        /// Samples per gradient estimate.
        #[arg(long, default_value_t = 10)]
        l: usize,
        #[arg(long, default_value_t = 1000)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "csv")]
        format: ReportFormat,
        /// Length of the reference run that produces the iterates.
        #[arg(long, default_value_t = REFERENCE_ITERS)]
        ref_iters: usize,
        /// Step size of the reference run.
        #[arg(long, default_value_t = 0.05)]
        ref_step: f64,
    },
    /// One optimization run with trace output.
    Optimize {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        init: InitArgs,
        #[arg(long, default_value = "mc")]
        kind: EstimatorKind,
        /// Samples per gradient estimate.
        #[arg(long, default_value_t = 10)]
        l: usize,
        #[arg(long, default_value_t = 0.05)]
        step: f64,
        #[arg(long, default_value_t = 1500)]
        iters: usize,
        #[arg(long, default_value = "adam")]
        optimizer: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trace CSV path; a .json config sidecar is written next to it.
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 10)]
        eval_interval: usize,
        #[arg(long, default_value_t = 2000)]
        elbo_samples: usize,
    },
    /// A batch of optimization traces over a kinds x L x step grid.
    ConvergenceSuite {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        init: InitArgs,
        /// Grid such as `kinds=mc,hvplocal;L=2,10;step=0.05,0.1;iters=300`.
        #[arg(long)]
        grid: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Generate a synthetic stop-and-frisk style dataset CSV.
    GenFrisk {
        #[arg(long, default_value_t = 3)]
        eth: usize,
        #[arg(long, default_value_t = 31)]
        precincts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn model_exit(e: &ModelError) -> u8 {
    match e {
        ModelError::Capability(_) => EXIT_CAPABILITY,
        _ => EXIT_VALIDATION,
    }
}

fn optim_exit(e: &OptimError) -> u8 {
    match e {
        OptimError::Model(m) => model_exit(m),
        OptimError::Estimator(rvrge::estimators::EstimatorError::Model(m)) => model_exit(m),
        _ => EXIT_VALIDATION,
    }
}

fn harness_exit(e: &HarnessError) -> u8 {
    match e {
        HarnessError::Model(m) => model_exit(m),
        HarnessError::Estimator(rvrge::estimators::EstimatorError::Model(m)) => model_exit(m),
        HarnessError::Optim(o) => optim_exit(o),
        HarnessError::ReferenceDiverged(_) => EXIT_DIVERGED,
        _ => EXIT_VALIDATION,
    }
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

/// A seeded point with moderate scale; for the BNN, candidates too close to
/// a ReLU kink are rejected so the FD oracle stays valid.
fn test_point(built: &BuiltModel, seed: u64, idx: u64) -> Vec<f64> {
    let dim = built.as_dyn().dim();
    let draw = |c: u64| -> Vec<f64> {
        normal_draws(RngStream::new(seed, c, idx, StreamPurpose::Diagnostic), dim)
            .into_iter()
            .map(|v| 0.3 * v)
            .collect()
    };
    let Some(bnn) = built.bnn() else {
        return draw(0);
    };
    for c in 0..200 {
        let z = draw(c);
        if bnn.kink_gap(&z).unwrap_or(0.0) > 1e-3 {
            return z;
        }
    }
    draw(0)
}

fn run_check_grads(args: &ModelArgs, seed: u64, points: usize) -> ExitCode {
    let built = match args.build(seed) {
        Ok(m) => m,
        Err(e) => return fail(model_exit(&e), e),
    };
    let model = built.as_dyn();
    let fd = FdConfig::default();
    let mut failures = 0usize;
    for idx in 0..points {
        let z = test_point(&built, seed, idx as u64);
        let result = (|| -> Result<Vec<String>, ModelError> {
            let mut bad = Vec::new();
            let analytic = model.grad_logp(&z)?;
            let numeric = fd_grad_oracle(model, &z, fd)?;
            // the FD quotient cannot resolve below |logp| * eps / h
            let floor = (model.logp(&z)?.abs() * f64::EPSILON / fd.step * 10.0).max(1e-8);
            for (i, (a, b)) in analytic.iter().zip(&numeric).enumerate() {
                let tol = 1e-5 * a.abs().max(b.abs()).max(1.0) + floor;
                if (a - b).abs() > tol {
                    bad.push(format!("grad[{i}]: analytic {a} vs fd {b}"));
                }
            }
            let v = normal_draws(
                RngStream::new(seed, 1, idx as u64, StreamPurpose::Diagnostic),
                model.dim(),
            );
            let hv = model.hvp(&z, &v)?;
            let hv_fd = fd_hvp_oracle(model, &z, &v, fd)?;
            let diff: Vec<f64> = hv.iter().zip(&hv_fd).map(|(a, b)| a - b).collect();
            if norm2(&diff) > 1e-4 * norm2(&hv).max(1.0) {
                bad.push(format!(
                    "hvp norm gap {:.3e}",
                    norm2(&diff) / norm2(&hv).max(1.0)
                ));
            }
            if model.has_hessian_diag() && model.has_full_hessian() {
                let gap = hessian_capability_gap(model, &z, &v)?;
                if gap > 1e-10 {
                    bad.push(format!("hessian capability gap {gap:.3e}"));
                }
            }
            Ok(bad)
        })();
        match result {
            Ok(bad) if bad.is_empty() => println!("point {idx}: ok"),
            Ok(bad) => {
                failures += 1;
                for b in bad {
                    println!("point {idx}: FAIL {b}");
                }
            }
            Err(e) => return fail(model_exit(&e), e),
        }
    }
    if failures == 0 {
        println!("{}: all {points} points pass", args.name());
        ExitCode::SUCCESS
    } else {
        fail(EXIT_VALIDATION, format!("{failures} of {points} points failed"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            return fail(EXIT_VALIDATION, "--threads must be positive");
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(EXIT_VALIDATION, format!("thread pool: {e}"));
        }
    }

    match cli.cmd {
        Cmd::CheckGrads {
            model,
            seed,
            points,
        } => run_check_grads(&model, seed, points),

        Cmd::VarianceReport {
            model,
            init,
            kinds,
            l,
            reps,
            seed,
            out,
            format,
            ref_iters,
            ref_step,
        } => {
            let target = match model.build(seed) {
                Ok(m) => m,
                Err(e) => return fail(model_exit(&e), e),
            };
            let target = target.as_dyn();
            let init = init.params(target.dim());
            let cfg = OptimConfig::new(EstimatorKind::Mc, 10, ref_step, ref_iters, seed);
            let checkpoints = match run_checkpointing(target, &init, cfg) {
                Ok(c) => c,
                Err(e) => return fail(harness_exit(&e), e),
            };
            let mut merged: Option<rvrge::harness::VarianceReport> = None;
            for cp in &checkpoints {
                match variance_report(target, model.name(), cp, &kinds, l, reps, seed) {
                    Ok(r) => match &mut merged {
                        Some(m) => m.merge(r),
                        None => merged = Some(r),
                    },
                    Err(e) => return fail(harness_exit(&e), e),
                }
            }
            let report = merged.expect("three checkpoints");
            for notice in &report.meta.skipped {
                eprintln!("skipped: {notice}");
            }
            if let Err(e) = emit_report(&report, format, &out) {
                return fail(harness_exit(&e), e);
            }
            println!("wrote {} rows to {}", report.rows.len(), out.display());
            ExitCode::SUCCESS
        }

        Cmd::Optimize {
            model,
            init,
            kind,
            l,
            step,
            iters,
            optimizer,
            seed,
            trace,
            eval_interval,
            elbo_samples,
        } => {
            let optimizer: OptimizerKind = match optimizer.parse() {
                Ok(o) => o,
                Err(e) => return fail(EXIT_VALIDATION, e),
            };
            let target = match model.build(seed) {
                Ok(m) => m,
                Err(e) => return fail(model_exit(&e), e),
            };
            let target = target.as_dyn();
            let init = init.params(target.dim());
            let mut cfg = OptimConfig::new(kind, l, step, iters, seed);
            cfg.optimizer = optimizer;
            cfg.eval_interval = eval_interval;
            cfg.elbo_samples = elbo_samples;
            let outcome = match optimize_loop(target, &init, &cfg) {
                Ok(o) => o,
                Err(e) => return fail(optim_exit(&e), e),
            };
            if let Err(e) = write_trace_csv(&trace, &outcome.trace) {
                return fail(EXIT_VALIDATION, e);
            }
            if let Err(e) = write_config_json(&trace.with_extension("json"), &cfg) {
                return fail(EXIT_VALIDATION, e);
            }
            match outcome.diverged_at {
                Some(at) => fail(
                    EXIT_DIVERGED,
                    format!("run diverged at iteration {at}; partial trace written"),
                ),
                None => {
                    let last_elbo = outcome.trace.iter().rev().find_map(|r| r.elbo);
                    if let Some(elbo) = last_elbo {
                        println!("final ELBO estimate: {elbo:.6}");
                    }
                    println!("trace written to {}", trace.display());
                    ExitCode::SUCCESS
                }
            }
        }

        Cmd::ConvergenceSuite {
            model,
            init,
            grid,
            seed,
            outdir,
        } => {
            let grid = match GridSpec::parse(&grid) {
                Ok(g) => g,
                Err(e) => return fail(EXIT_VALIDATION, e),
            };
            let target = match model.build(seed) {
                Ok(m) => m,
                Err(e) => return fail(model_exit(&e), e),
            };
            let target = target.as_dyn();
            let init = init.params(target.dim());
            let cells = match convergence_suite(target, &init, &grid, seed, &outdir) {
                Ok(c) => c,
                Err(e) => return fail(harness_exit(&e), e),
            };
            for c in &cells {
                match c.diverged_at {
                    Some(at) => println!(
                        "{} (diverged at iteration {at})",
                        c.trace_path.display()
                    ),
                    None => println!("{}", c.trace_path.display()),
                }
            }
            ExitCode::SUCCESS
        }

        Cmd::GenFrisk {
            eth,
            precincts,
            seed,
            out,
        } => {
            let data = generate_frisk_synthetic(eth, precincts, seed);
            match write_frisk_csv(&data, &out) {
                Ok(()) => {
                    println!("wrote {}x{} cells to {}", eth, precincts, out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(EXIT_VALIDATION, e),
            }
        }
    }
}
