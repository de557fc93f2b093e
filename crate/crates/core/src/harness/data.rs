//! Synthetic generators, CSV loading, splitting, and standardization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Targets;
use crate::tensor::{Matrix, RngStream};

/// Which likelihood a dataset's targets feed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

/// Inputs plus targets in the representation the matching head consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: Matrix,
    targets: Targets,
}

impl Dataset {
    pub fn new(x: Matrix, targets: Targets) -> Result<Dataset> {
        if x.rows() != targets.len() {
            return Err(Error::Shape {
                context: "Dataset::new",
                detail: format!("{} input rows but {} targets", x.rows(), targets.len()),
            });
        }
        if x.rows() == 0 {
            return Err(Error::EmptyDataset("a dataset needs at least one example".into()));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("dataset inputs"));
        }
        let targets_finite = match &targets {
            Targets::Values(m) => m.is_finite(),
            Targets::Classes(_) => true,
            Targets::Binary(b) => b.iter().all(|v| v.is_finite()),
        };
        if !targets_finite {
            return Err(Error::NonFinite("dataset targets"));
        }
        Ok(Dataset { x, targets })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn task(&self) -> TaskKind {
        match self.targets {
            Targets::Values(_) => TaskKind::Regression,
            Targets::Classes(_) | Targets::Binary(_) => TaskKind::Classification,
        }
    }

    /// Rows selected by index, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let x = Matrix::from_fn(idx.len(), self.x.cols(), |i, j| self.x.get(idx[i], j));
        let targets = match &self.targets {
            Targets::Values(m) => Targets::Values(Matrix::from_fn(idx.len(), m.cols(), |i, j| m.get(idx[i], j))),
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Binary(b) => Targets::Binary(idx.iter().map(|&i| b[i]).collect()),
        };
        Dataset { x, targets }
    }

    /// Shuffled train/test split. The test share is rounded to the nearest
    /// count and clamped so both sides stay non-empty.
    pub fn split(&self, test_fraction: f64, rng: &mut RngStream) -> Result<(Dataset, Dataset)> {
        let (train_idx, test_idx) = split_indices(self.len(), test_fraction, rng)?;
        Ok((self.subset(&train_idx), self.subset(&test_idx)))
    }
}

/// Disjoint, covering index sets for a shuffled train/test split; a pure
/// function of (n, fraction, generator state).
pub fn split_indices(n: usize, test_fraction: f64, rng: &mut RngStream) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::EmptyDataset(format!("cannot split {n} examples into two non-empty parts")));
    }
    if !(0.0..1.0).contains(&test_fraction) || test_fraction <= 0.0 {
        return Err(Error::InvalidConfig(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let test = idx.split_off(n - n_test);
    Ok((idx, test))
}

/// Noiseless sinc target: 2·sin(20x)/(20x) − 1, continuously extended to 1
/// at x = 0.
pub fn sinc_mean(x: f64) -> f64 {
    let t = 20.0 * x;
    let s = if t == 0.0 { 1.0 } else { t.sin() / t };
    2.0 * s - 1.0
}

/// Sinc regression data: inputs uniform on [−1, 1], targets sinc_mean plus
/// Gaussian noise.
pub fn gen_sinc(n: usize, noise_std: f64, rng: &mut RngStream) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset("sinc generator needs n >= 1".into()));
    }
    let mut x = Matrix::zeros(n, 1);
    let mut y = Matrix::zeros(n, 1);
    for i in 0..n {
        let xi = rng.uniform(-1.0, 1.0);
        x.set(i, 0, xi);
        y.set(i, 0, sinc_mean(xi) + noise_std * rng.standard_normal());
    }
    Dataset::new(x, Targets::Values(y))
}

/// Noiseless sines-with-trend target: 0.3·sin(2πx) + 0.3·sin(4πx) + x.
pub fn sines_trend_mean(x: f64) -> f64 {
    let tau = 2.0 * std::f64::consts::PI;
    0.3 * (tau * x).sin() + 0.3 * (2.0 * tau * x).sin() + x
}

/// Sines-with-trend data on the split support [−1, −0.25] ∪ [0.25, 1]: the
/// first ⌈n/2⌉ inputs are uniform on the left interval, the rest on the
/// right, so the reference 32-point setting lands 16 per interval.
pub fn gen_sines_trend(n: usize, noise_std: f64, rng: &mut RngStream) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset("sines-trend generator needs n >= 1".into()));
    }
    let left = n - n / 2;
    let mut x = Matrix::zeros(n, 1);
    let mut y = Matrix::zeros(n, 1);
    for i in 0..n {
        let xi = if i < left { rng.uniform(-1.0, -0.25) } else { rng.uniform(0.25, 1.0) };
        x.set(i, 0, xi);
        y.set(i, 0, sines_trend_mean(xi) + noise_std * rng.standard_normal());
    }
    Dataset::new(x, Targets::Values(y))
}

/// Two interleaving half-circles with binary labels: the upper moon is the
/// unit upper half-circle, the lower moon the lower half-circle shifted so
/// its apex sits at (1, −0.5). Arc angles are inclusive linspaces over each
/// half, isotropic Gaussian noise is added to both coordinates.
pub fn gen_two_moons(n: usize, noise_std: f64, rng: &mut RngStream) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset("two-moons generator needs n >= 2".into()));
    }
    if n % 2 != 0 {
        return Err(Error::InvalidConfig(format!("two-moons needs an even point count, got {n}")));
    }
    let half = n / 2;
    let mut x = Matrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    let angle = |i: usize| {
        if half == 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (half - 1) as f64
        }
    };
    for i in 0..half {
        let t = angle(i);
        x.set(i, 0, t.cos());
        x.set(i, 1, t.sin());
        labels.push(0);
    }
    for i in 0..half {
        let t = angle(i);
        x.set(half + i, 0, 1.0 - t.cos());
        x.set(half + i, 1, 0.5 - t.sin());
        labels.push(1);
    }
    for i in 0..n {
        for j in 0..2 {
            x.set(i, j, x.get(i, j) + noise_std * rng.standard_normal());
        }
    }
    Dataset::new(x, Targets::Classes(labels))
}

/// A parsed numeric CSV: header row plus an all-numeric body.
#[derive(Clone, Debug)]
pub struct CsvTable {
    pub headers: Vec<String>,
    pub rows: Matrix,
}

/// Reads a comma-separated file with one header row; every body cell must
/// parse as a float. Errors carry 1-based file line numbers.
pub fn load_csv(path: &Path) -> Result<CsvTable> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::CsvParse { path: display.clone(), line: 0, msg: e.to_string() })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::CsvParse { path: display.clone(), line: 1, msg: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() {
        return Err(Error::EmptyDataset(format!("{display} has no columns")));
    }
    let mut data: Vec<f64> = Vec::new();
    let mut n_rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, csv::Position::line);
            Error::CsvParse { path: display.clone(), line, msg: e.to_string() }
        })?;
        let line = record.position().map_or(0, csv::Position::line);
        if record.len() != headers.len() {
            return Err(Error::CsvParse {
                path: display.clone(),
                line,
                msg: format!("{} fields but {} columns in the header", record.len(), headers.len()),
            });
        }
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| Error::CsvParse {
                path: display.clone(),
                line,
                msg: format!("cannot parse '{field}' as a number"),
            })?;
            data.push(v);
        }
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(Error::EmptyDataset(format!("{display} has a header but no data rows")));
    }
    let rows = Matrix::new(n_rows, headers.len(), data)?;
    Ok(CsvTable { headers, rows })
}

impl Dataset {
    /// Splits a numeric table into features and the named target columns.
    /// Classification wants exactly one target column holding non-negative
    /// integer class indices.
    pub fn from_table(table: &CsvTable, targets: &[String], task: TaskKind) -> Result<Dataset> {
        if targets.is_empty() {
            return Err(Error::InvalidConfig("at least one target column is required".into()));
        }
        let mut target_cols = Vec::with_capacity(targets.len());
        for name in targets {
            let col = table
                .headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.clone()))?;
            target_cols.push(col);
        }
        let feature_cols: Vec<usize> =
            (0..table.headers.len()).filter(|c| !target_cols.contains(c)).collect();
        if feature_cols.is_empty() {
            return Err(Error::InvalidConfig("every column is a target; no features remain".into()));
        }
        let n = table.rows.rows();
        let x = Matrix::from_fn(n, feature_cols.len(), |i, j| table.rows.get(i, feature_cols[j]));
        let targets = match task {
            TaskKind::Regression => {
                Targets::Values(Matrix::from_fn(n, target_cols.len(), |i, j| table.rows.get(i, target_cols[j])))
            }
            TaskKind::Classification => {
                if target_cols.len() != 1 {
                    return Err(Error::InvalidConfig(format!(
                        "classification wants one label column, got {}",
                        target_cols.len()
                    )));
                }
                let mut classes = Vec::with_capacity(n);
                for i in 0..n {
                    let v = table.rows.get(i, target_cols[0]);
                    if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0) {
                        return Err(Error::InvalidConfig(format!(
                            "label column '{}' row {} holds {v}, not a non-negative integer",
                            targets_name(&table.headers, target_cols[0]),
                            i + 1
                        )));
                    }
                    classes.push(v as usize);
                }
                Targets::Classes(classes)
            }
        };
        Dataset::new(x, targets)
    }
}

fn targets_name(headers: &[String], col: usize) -> &str {
    headers.get(col).map_or("?", String::as_str)
}

/// Per-column affine map to zero mean and unit scale, fit on training data
/// only. Columns with (numerically) zero spread keep scale 1 so constant
/// features pass through unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    /// Population statistics of the given rows.
    pub fn fit(m: &Matrix) -> Standardizer {
        let n = m.rows().max(1) as f64;
        let mut mean = vec![0.0; m.cols()];
        let mut std = vec![0.0; m.cols()];
        for j in 0..m.cols() {
            let mut acc = 0.0;
            for i in 0..m.rows() {
                acc += m.get(i, j);
            }
            mean[j] = acc / n;
            let mut var = 0.0;
            for i in 0..m.rows() {
                let d = m.get(i, j) - mean[j];
                var += d * d;
            }
            let s = (var / n).sqrt();
            std[j] = if s > 1e-12 { s } else { 1.0 };
        }
        Standardizer { mean, std }
    }

    /// The do-nothing map, for columns that must pass through unchanged.
    pub fn identity(dim: usize) -> Standardizer {
        Standardizer { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    /// Sum of log scales; the Jacobian term when moving log-densities from
    /// standardized to raw units.
    pub fn log_std_sum(&self) -> f64 {
        self.std.iter().map(|s| s.ln()).sum()
    }

    pub fn apply(&self, m: &Matrix) -> Matrix {
        assert!(m.cols() == self.dim(), "standardizer dim {} vs {} columns", self.dim(), m.cols());
        Matrix::from_fn(m.rows(), m.cols(), |i, j| (m.get(i, j) - self.mean[j]) / self.std[j])
    }

    pub fn invert(&self, m: &Matrix) -> Matrix {
        assert!(m.cols() == self.dim(), "standardizer dim {} vs {} columns", self.dim(), m.cols());
        Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) * self.std[j] + self.mean[j])
    }

    /// Scales spreads (standard deviations) back to raw units, without the
    /// mean shift.
    pub fn invert_scale(&self, m: &Matrix) -> Matrix {
        assert!(m.cols() == self.dim(), "standardizer dim {} vs {} columns", self.dim(), m.cols());
        Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) * self.std[j])
    }
}
