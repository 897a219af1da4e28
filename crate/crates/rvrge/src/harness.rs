//! Experiment driver: variance-reduction reports at fixed iterates,
//! reference-run checkpointing, and convergence-trace batches.
//!
//! Replications inside a report are embarrassingly parallel; each draws its
//! noise from a stream keyed by its replication index, so the result is
//! identical whatever the thread count.

use crate::estimators::{rv_rge_batch, ControlCoeff, EstimatorError, EstimatorKind};
use crate::model::{LogDensityModel, ModelError};
use crate::numerics::{component_variances, norm_variance, StreamPurpose};
use crate::optimize::{
    optimize_loop, write_config_json, write_trace_csv, OptimConfig, OptimError,
};
use crate::vardist::{NoiseBatch, VarParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("invalid harness configuration: {0}")]
    Invalid(String),
    #[error("report i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("reference run diverged at iteration {0}")]
    ReferenceDiverged(usize),
}

pub type HarnessResult<T> = Result<T, HarnessError>;

/// A parameter snapshot from the reference run, labeled by its place along
/// the trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterateCheckpoint {
    pub label: String,
    pub iteration: usize,
    pub params: VarParams,
}

/// Default length of the reference run; snapshots are taken at
/// {10, T/2, T}.
pub const REFERENCE_ITERS: usize = 1500;

/// One cell of a variance report: an estimator kind evaluated at one
/// iterate, restricted to one block of the gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub iterate: String,
    pub estimator: String,
    pub block: String,
    /// Average componentwise variance over the block.
    pub ave_var: f64,
    /// `100 * ave_var / (MC ave_var)` for the same iterate and block.
    pub ave_var_pct: f64,
    /// Variance of the block's Euclidean norm.
    pub norm_var: f64,
    pub norm_var_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub model: String,
    pub samples: usize,
    pub replications: usize,
    pub seed: u64,
    pub checkpoint_iters: Vec<usize>,
    /// Kinds that could not run on this model, with the reason.
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub meta: ReportMeta,
    pub rows: Vec<ReportRow>,
}

impl VarianceReport {
    /// Append another report's rows and skip notices; used to stack the
    /// early/mid/late iterates into one table.
    pub fn merge(&mut self, other: VarianceReport) {
        self.rows.extend(other.rows);
        for s in other.meta.skipped {
            if !self.meta.skipped.contains(&s) {
                self.meta.skipped.push(s);
            }
        }
    }
}

const BLOCKS: [&str; 3] = ["mean", "log_scale", "combined"];

fn block_slice<'a>(flat: &'a [f64], block: &str, dim: usize) -> &'a [f64] {
    match block {
        "mean" => &flat[..dim],
        "log_scale" => &flat[dim..],
        _ => flat,
    }
}

/// Whether a kind can run on this model at this batch size; `Err` holds the
/// notice recorded in the report.
fn kind_available(
    model: &dyn LogDensityModel,
    kind: EstimatorKind,
    samples: usize,
) -> Result<(), String> {
    match kind {
        EstimatorKind::FullHessian if !model.has_full_hessian() => {
            Err(format!("{kind}: model does not expose a full Hessian"))
        }
        EstimatorKind::HessianDiag if !model.has_hessian_diag() => {
            Err(format!("{kind}: model does not expose a Hessian diagonal"))
        }
        EstimatorKind::HvpLocal if samples < 2 => {
            Err(format!("{kind}: needs at least 2 samples per batch"))
        }
        _ => Ok(()),
    }
}

/// Variance of each estimator kind at a fixed iterate: `n_rep` independent
/// L-sample estimates per kind, summarized per block as the average
/// component variance and the variance of the norm, each also as a
/// percentage of the MC value from the same report. MC itself is always
/// measured, whether or not it was requested.
pub fn variance_report(
    model: &dyn LogDensityModel,
    model_name: &str,
    checkpoint: &IterateCheckpoint,
    kinds: &[EstimatorKind],
    samples: usize,
    n_rep: usize,
    seed: u64,
) -> HarnessResult<VarianceReport> {
    if n_rep < 100 {
        return Err(HarnessError::Invalid(format!(
            "need at least 100 replications, got {n_rep}"
        )));
    }
    if samples == 0 {
        return Err(HarnessError::Invalid("need at least one sample".into()));
    }
    let dim = model.dim();
    let params = &checkpoint.params;
    let coeff = ControlCoeff::identity(dim);

    let mut ordered = vec![EstimatorKind::Mc];
    for k in kinds {
        if *k != EstimatorKind::Mc && !ordered.contains(k) {
            ordered.push(*k);
        }
    }

    let mut skipped = Vec::new();
    let mut rows = Vec::new();
    let mut mc_baseline: Option<Vec<(f64, f64)>> = None;
    for kind in ordered {
        if let Err(notice) = kind_available(model, kind, samples) {
            skipped.push(notice);
            continue;
        }
        // replication r draws its own streams, so the loop parallelizes
        // without any cross-thread state; collect keeps index order
        let flats: Vec<Vec<f64>> = (0..n_rep)
            .into_par_iter()
            .map(|r| {
                let noise =
                    NoiseBatch::draw(seed, r as u64, samples, dim, StreamPurpose::Noise);
                rv_rge_batch(model, params, &noise, kind, &coeff).map(|g| g.flat())
            })
            .collect::<Result<_, _>>()?;

        let per_block: Vec<(f64, f64)> = BLOCKS
            .iter()
            .map(|block| {
                let sliced: Vec<Vec<f64>> = flats
                    .iter()
                    .map(|f| block_slice(f, block, dim).to_vec())
                    .collect();
                let vars = component_variances(&sliced);
                let ave = vars.iter().sum::<f64>() / vars.len() as f64;
                (ave, norm_variance(&sliced))
            })
            .collect();

        if kind == EstimatorKind::Mc {
            mc_baseline = Some(per_block.clone());
        }
        let baseline = mc_baseline.as_ref().expect("MC runs first");
        for (b, block) in BLOCKS.iter().enumerate() {
            let (ave, nv) = per_block[b];
            let (mc_ave, mc_nv) = baseline[b];
            let (ave_pct, norm_pct) = if kind == EstimatorKind::Mc {
                (100.0, 100.0)
            } else {
                (100.0 * ave / mc_ave, 100.0 * nv / mc_nv)
            };
            rows.push(ReportRow {
                iterate: checkpoint.label.clone(),
                estimator: kind.name().to_string(),
                block: block.to_string(),
                ave_var: ave,
                ave_var_pct: ave_pct,
                norm_var: nv,
                norm_var_pct: norm_pct,
            });
        }
    }

    Ok(VarianceReport {
        meta: ReportMeta {
            model: model_name.to_string(),
            samples,
            replications: n_rep,
            seed,
            checkpoint_iters: vec![checkpoint.iteration],
            skipped,
        },
        rows,
    })
}

/// One seeded MC-estimator Adam run; snapshots at {10, T/2, T} labeled
/// early, mid, late.
pub fn run_checkpointing(
    model: &dyn LogDensityModel,
    init: &VarParams,
    mut cfg: OptimConfig,
) -> HarnessResult<Vec<IterateCheckpoint>> {
    let iters = cfg.iters;
    let marks = [10.min(iters), iters / 2, iters];
    cfg.snapshot_iters = marks.to_vec();
    let out = optimize_loop(model, init, &cfg)?;
    if let Some(at) = out.diverged_at {
        return Err(HarnessError::ReferenceDiverged(at));
    }
    let labels = ["early", "mid", "late"];
    let mut checkpoints = Vec::new();
    for (label, mark) in labels.iter().zip(marks) {
        let rec = out
            .trace
            .iter()
            .find(|r| r.iter == mark)
            .and_then(|r| r.params.as_ref())
            .expect("snapshot iteration recorded");
        checkpoints.push(IterateCheckpoint {
            label: label.to_string(),
            iteration: mark,
            params: rec.clone(),
        });
    }
    Ok(checkpoints)
}

/// A convergence-suite grid: the cross product of kinds, batch sizes and
/// step sizes, each run for the same number of iterations from a common
/// initialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub kinds: Vec<EstimatorKind>,
    pub samples: Vec<usize>,
    pub steps: Vec<f64>,
    pub iters: usize,
}

impl GridSpec {
    /// Parse `kinds=mc,hvplocal;L=2,10;step=0.05,0.1;iters=300`.
    pub fn parse(text: &str) -> Result<GridSpec, String> {
        let mut kinds = Vec::new();
        let mut samples = Vec::new();
        let mut steps = Vec::new();
        let mut iters = 300usize;
        for part in text.split(';') {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("grid field without '=': {part}"))?;
            match key.trim() {
                "kinds" => {
                    for k in value.split(',') {
                        kinds.push(k.parse()?);
                    }
                }
                "L" => {
                    for l in value.split(',') {
                        samples.push(l.trim().parse().map_err(|e| format!("bad L: {e}"))?);
                    }
                }
                "step" => {
                    for s in value.split(',') {
                        steps.push(s.trim().parse().map_err(|e| format!("bad step: {e}"))?);
                    }
                }
                "iters" => {
                    iters = value.trim().parse().map_err(|e| format!("bad iters: {e}"))?;
                }
                other => return Err(format!("unknown grid field: {other}")),
            }
        }
        if kinds.is_empty() || samples.is_empty() || steps.is_empty() {
            return Err("grid needs kinds, L and step lists".into());
        }
        Ok(GridSpec {
            kinds,
            samples,
            steps,
            iters,
        })
    }

    pub fn cells(&self) -> Vec<(EstimatorKind, usize, f64)> {
        let mut cells = Vec::new();
        for &k in &self.kinds {
            for &l in &self.samples {
                for &s in &self.steps {
                    cells.push((k, l, s));
                }
            }
        }
        cells
    }
}

/// Outcome of one grid cell: where the trace went, and whether the run
/// diverged (recorded, not fatal).
#[derive(Debug, Clone)]
pub struct SuiteCell {
    pub kind: EstimatorKind,
    pub samples: usize,
    pub step: f64,
    pub trace_path: PathBuf,
    pub diverged_at: Option<usize>,
}

/// One optimization trace per grid cell, all from the same initialization,
/// written to `outdir` as CSV plus a JSON config sidecar per cell.
pub fn convergence_suite(
    model: &dyn LogDensityModel,
    init: &VarParams,
    grid: &GridSpec,
    seed: u64,
    outdir: &Path,
) -> HarnessResult<Vec<SuiteCell>> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(HarnessError::Invalid("empty grid".into()));
    }
    std::fs::create_dir_all(outdir)?;
    let mut out = Vec::new();
    for (kind, samples, step) in cells {
        let cfg = OptimConfig::new(kind, samples, step, grid.iters, seed);
        let result = optimize_loop(model, init, &cfg)?;
        let stem = format!("trace_{}_L{}_step{}", kind.name(), samples, step);
        let trace_path = outdir.join(format!("{stem}.csv"));
        write_trace_csv(&trace_path, &result.trace)?;
        write_config_json(&outdir.join(format!("{stem}.json")), &cfg)?;
        out.push(SuiteCell {
            kind,
            samples,
            step,
            trace_path,
            diverged_at: result.diverged_at,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown report format: {other}")),
        }
    }
}

/// Serialize a report. CSV keeps only the table; JSON keeps metadata too.
pub fn emit_report(
    report: &VarianceReport,
    format: ReportFormat,
    path: &Path,
) -> HarnessResult<()> {
    match format {
        ReportFormat::Csv => {
            let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
            writeln!(
                out,
                "iterate,estimator,block,ave_var,ave_var_pct,norm_var,norm_var_pct"
            )?;
            for r in &report.rows {
                writeln!(
                    out,
                    "{},{},{},{:.17e},{:.17e},{:.17e},{:.17e}",
                    r.iterate, r.estimator, r.block, r.ave_var, r.ave_var_pct, r.norm_var,
                    r.norm_var_pct
                )?;
            }
        }
        ReportFormat::Json => {
            let text = serde_json::to_string_pretty(report).expect("report serializes");
            std::fs::write(path, text)?;
        }
    }
    Ok(())
}
