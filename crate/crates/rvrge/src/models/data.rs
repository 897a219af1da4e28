//! Dataset containers, synthetic generators, and CSV ingestion.

use crate::model::{ModelError, ModelResult};
use crate::numerics::{normal_draws, RngStream, StreamPurpose};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use std::io::{BufRead, Write};
use std::path::Path;

/// Event counts and exposures on an ethnicity-group x precinct grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FriskDataset {
    pub groups: usize,
    pub precincts: usize,
    /// Observed event counts, row-major groups x precincts.
    pub events: Vec<u64>,
    /// Exposure counts (>= 1), row-major groups x precincts.
    pub exposures: Vec<u64>,
    /// Generator provenance carried into the CSV header; zero for ingested data.
    pub seed: u64,
    pub hyper_scale: f64,
}

impl FriskDataset {
    pub fn validate(&self) -> ModelResult<()> {
        let cells = self.groups * self.precincts;
        if self.groups == 0 || self.precincts == 0 {
            return Err(ModelError::Invalid("empty frisk grid".into()));
        }
        if self.events.len() != cells || self.exposures.len() != cells {
            return Err(ModelError::Invalid("frisk array shapes inconsistent".into()));
        }
        if self.exposures.iter().any(|&n| n == 0) {
            return Err(ModelError::Invalid("frisk exposures must be >= 1".into()));
        }
        Ok(())
    }

    pub fn cell(&self, e: usize, p: usize) -> (u64, u64) {
        let idx = e * self.precincts + p;
        (self.events[idx], self.exposures[idx])
    }
}

/// Draw a dataset from the model's own prior. The hyper-prior scale is 1
/// rather than 10 so prior-sampled Poisson rates stay finite; the scale is
/// recorded in the dataset header.
pub fn generate_frisk_synthetic(groups: usize, precincts: usize, seed: u64) -> FriskDataset {
    generate_frisk_with_truth(groups, precincts, seed).0
}

/// As [`generate_frisk_synthetic`], also returning the drawn mean offset for
/// simulation sanity checks.
pub fn generate_frisk_with_truth(
    groups: usize,
    precincts: usize,
    seed: u64,
) -> (FriskDataset, f64) {
    assert!(groups >= 1 && precincts >= 1);
    let hyper_scale = 1.0;
    let mut rng = RngStream::new(seed, 0, 0, StreamPurpose::Data).rng();
    let mut normal = |scale: f64| -> f64 {
        let x: f64 = rng.sample(rand_distr::StandardNormal);
        scale * x
    };
    let mu = normal(hyper_scale);
    let log_var_alpha = normal(hyper_scale);
    let log_var_beta = normal(hyper_scale);
    let sd_alpha = (0.5 * log_var_alpha).exp();
    let sd_beta = (0.5 * log_var_beta).exp();
    let alphas: Vec<f64> = (0..groups).map(|_| normal(sd_alpha)).collect();
    let betas: Vec<f64> = (0..precincts).map(|_| normal(sd_beta)).collect();

    let cells = groups * precincts;
    let mut events = Vec::with_capacity(cells);
    let mut exposures = Vec::with_capacity(cells);
    for e in 0..groups {
        for p in 0..precincts {
            let n: u64 = rng.gen_range(20..=200);
            let rate = (mu + alphas[e] + betas[p] + (n as f64).ln()).exp();
            let y = Poisson::new(rate.max(1e-12)).unwrap().sample(&mut rng);
            exposures.push(n);
            events.push(y as u64);
        }
    }
    (
        FriskDataset {
            groups,
            precincts,
            events,
            exposures,
            seed,
            hyper_scale,
        },
        mu,
    )
}

/// Serialize as CSV with a provenance comment header.
pub fn write_frisk_csv(data: &FriskDataset, path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# seed={}, hyper_scale={}", data.seed, data.hyper_scale)?;
    writeln!(f, "ethnicity_index,precinct_index,arrests,stops")?;
    for e in 0..data.groups {
        for p in 0..data.precincts {
            let (y, n) = data.cell(e, p);
            writeln!(f, "{e},{p},{n},{y}")?;
        }
    }
    Ok(())
}

pub fn load_frisk_csv(path: &Path) -> ModelResult<FriskDataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| ModelError::Invalid(format!("cannot open {}: {e}", path.display())))?;
    let mut groups = 0usize;
    let mut precincts = 0usize;
    let mut rows: Vec<(usize, usize, u64, u64)> = Vec::new();
    let mut seed = 0u64;
    let mut hyper_scale = 1.0f64;
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| ModelError::Invalid(e.to_string()))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            for part in meta.split(',') {
                let part = part.trim();
                if let Some(v) = part.strip_prefix("seed=") {
                    seed = v.trim().parse().unwrap_or(0);
                } else if let Some(v) = part.strip_prefix("hyper_scale=") {
                    hyper_scale = v.trim().parse().unwrap_or(1.0);
                }
            }
            continue;
        }
        if line.starts_with("ethnicity_index") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(|s| s.trim()).collect();
        if fields.len() != 4 {
            return Err(ModelError::Invalid(format!("bad frisk CSV row: {line}")));
        }
        let parse = |s: &str| -> ModelResult<u64> {
            s.parse()
                .map_err(|_| ModelError::Invalid(format!("bad frisk CSV value: {s}")))
        };
        let e = parse(fields[0])? as usize;
        let p = parse(fields[1])? as usize;
        let n = parse(fields[2])?;
        let y = parse(fields[3])?;
        groups = groups.max(e + 1);
        precincts = precincts.max(p + 1);
        rows.push((e, p, n, y));
    }
    let cells = groups * precincts;
    let mut events = vec![0u64; cells];
    let mut exposures = vec![0u64; cells];
    for (e, p, n, y) in rows {
        events[e * precincts + p] = y;
        exposures[e * precincts + p] = n;
    }
    let data = FriskDataset {
        groups,
        precincts,
        events,
        exposures,
        seed,
        hyper_scale,
    };
    data.validate()?;
    Ok(data)
}

/// Standardized regression data: features and targets both zero mean, unit
/// variance (columns with no variation are zeroed out).
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionDataset {
    pub rows: usize,
    pub features: usize,
    /// Row-major rows x features.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl RegressionDataset {
    pub fn row(&self, n: usize) -> &[f64] {
        &self.x[n * self.features..(n + 1) * self.features]
    }

    fn standardized(rows: usize, features: usize, mut x: Vec<f64>, mut y: Vec<f64>) -> Self {
        for j in 0..features {
            let col: Vec<f64> = (0..rows).map(|i| x[i * features + j]).collect();
            let (mean, sd) = mean_sd(&col);
            for i in 0..rows {
                let v = &mut x[i * features + j];
                *v = if sd > 1e-12 { (*v - mean) / sd } else { 0.0 };
            }
        }
        let (mean, sd) = mean_sd(&y);
        for v in y.iter_mut() {
            *v = if sd > 1e-12 { (*v - mean) / sd } else { 0.0 };
        }
        RegressionDataset {
            rows,
            features,
            x,
            y,
        }
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Load a headered CSV (`;` or `,` delimited; the delimiter is sniffed from
/// the header line). The last column is the target. When `subsample` is set,
/// the rows are shuffled with the given seed and the first n kept.
pub fn load_regression_csv(
    path: &Path,
    subsample: Option<usize>,
    seed: u64,
) -> ModelResult<RegressionDataset> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| ModelError::Invalid(format!("cannot open {}: {e}", path.display())))?;
    let mut lines = raw.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| ModelError::Invalid("empty CSV".into()))?;
    let delim = if header.matches(';').count() > header.matches(',').count() {
        ';'
    } else {
        ','
    };
    let features = header.split(delim).count() - 1;
    if features == 0 {
        return Err(ModelError::Invalid("CSV needs at least two columns".into()));
    }
    let mut records: Vec<(Vec<f64>, f64)> = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(delim).map(|s| s.trim().trim_matches('"')).collect();
        if fields.len() != features + 1 {
            return Err(ModelError::Invalid(format!("ragged CSV row: {line}")));
        }
        let mut vals = Vec::with_capacity(features + 1);
        for f in &fields {
            let v: f64 = f
                .parse()
                .map_err(|_| ModelError::Invalid(format!("non-numeric CSV value: {f}")))?;
            if !v.is_finite() {
                return Err(ModelError::Invalid("missing or non-finite CSV value".into()));
            }
            vals.push(v);
        }
        let target = vals.pop().unwrap();
        records.push((vals, target));
    }
    if records.len() < 2 {
        return Err(ModelError::Invalid("CSV needs at least two data rows".into()));
    }
    if let Some(n) = subsample {
        let mut rng = RngStream::new(seed, 0, 1, StreamPurpose::Data).rng();
        records.shuffle(&mut rng);
        records.truncate(n.max(2));
    }
    let rows = records.len();
    let mut x = Vec::with_capacity(rows * features);
    let mut y = Vec::with_capacity(rows);
    for (feat, target) in records {
        x.extend(feat);
        y.push(target);
    }
    Ok(RegressionDataset::standardized(rows, features, x, y))
}

/// Seeded stand-in regression problem: Gaussian features pushed through a
/// fixed random one-layer teacher with observation noise.
pub fn generate_regression_synthetic(rows: usize, features: usize, seed: u64) -> RegressionDataset {
    let x = normal_draws(
        RngStream::new(seed, 0, 2, StreamPurpose::Data),
        rows * features,
    );
    let w = normal_draws(RngStream::new(seed, 0, 3, StreamPurpose::Data), features);
    let noise = normal_draws(RngStream::new(seed, 0, 4, StreamPurpose::Data), rows);
    let mut y = Vec::with_capacity(rows);
    for i in 0..rows {
        let lin: f64 = (0..features).map(|j| w[j] * x[i * features + j]).sum();
        y.push(lin.tanh() + 0.5 * lin + 0.1 * noise[i]);
    }
    RegressionDataset::standardized(rows, features, x, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frisk_generation_deterministic() {
        let a = generate_frisk_synthetic(3, 31, 1);
        let b = generate_frisk_synthetic(3, 31, 1);
        assert_eq!(a, b);
        assert!(a.validate().is_ok());
    }

    #[test]
    fn frisk_generation_rate_sanity() {
        let (data, mu) = generate_frisk_with_truth(3, 31, 5);
        let mean_ratio: f64 = data
            .events
            .iter()
            .zip(&data.exposures)
            .map(|(&y, &n)| y as f64 / n as f64)
            .sum::<f64>()
            / data.events.len() as f64;
        let expected = mu.exp();
        assert!(
            mean_ratio < 5.0 * expected && mean_ratio > expected / 5.0,
            "mean Y/N {mean_ratio} vs exp(mu) {expected}"
        );
    }

    #[test]
    fn frisk_csv_round_trip() {
        let data = generate_frisk_synthetic(2, 4, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frisk.csv");
        write_frisk_csv(&data, &path).unwrap();
        let loaded = load_frisk_csv(&path).unwrap();
        assert_eq!(data, loaded);
    }

    #[test]
    fn regression_csv_loading_and_standardization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wine.csv");
        let mut content = String::from("\"a\";\"b\";\"quality\"\n");
        for i in 0..20 {
            content.push_str(&format!("{};{};{}\n", i, i * i, 3 * i + 1));
        }
        std::fs::write(&path, content).unwrap();
        let data = load_regression_csv(&path, None, 0).unwrap();
        assert_eq!(data.rows, 20);
        assert_eq!(data.features, 2);
        for j in 0..2 {
            let col: Vec<f64> = (0..20).map(|i| data.row(i)[j]).collect();
            let (mean, sd) = mean_sd(&col);
            assert!(mean.abs() < 1e-8 && (sd - 1.0).abs() < 1e-8);
        }
        let (mean, sd) = mean_sd(&data.y);
        assert!(mean.abs() < 1e-8 && (sd - 1.0).abs() < 1e-8);

        let sub = load_regression_csv(&path, Some(10), 7).unwrap();
        assert_eq!(sub.rows, 10);
        let sub2 = load_regression_csv(&path, Some(10), 7).unwrap();
        assert_eq!(sub, sub2);
    }

    #[test]
    fn synthetic_regression_deterministic() {
        let a = generate_regression_synthetic(50, 11, 3);
        let b = generate_regression_synthetic(50, 11, 3);
        assert_eq!(a, b);
        assert_eq!(a.features, 11);
    }
}
