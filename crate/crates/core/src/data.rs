//! Synthetic classification sets and CSV ingestion.
//!
//! CSV layout is `label,f1,…,fd` with a header row. Values are written with
//! Rust's shortest round-trip formatting, so generate → load is exact.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numlin::{Matrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// Two interleaved spiral arms in the plane.
    Spirals,
    /// Two Gaussian clusters in the plane.
    Blobs,
    /// Points in the unit square labelled by the XOR of their grid cell.
    XorGrid,
}

impl Generator {
    pub const ALL: [Generator; 3] = [Generator::Spirals, Generator::Blobs, Generator::XorGrid];

    pub fn as_str(self) -> &'static str {
        match self {
            Generator::Spirals => "spirals",
            Generator::Blobs => "blobs",
            Generator::XorGrid => "xor-grid",
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Generator::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown generator {s:?} (spirals, blobs, xor-grid)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {l} outside 0..{classes}")));
        }
        if !features.is_finite() {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
        }
        Dataset {
            features: Matrix::from_vec(idx.len(), d, data),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Shuffled train/test split; the test part holds `round(n·fraction)` rows.
    pub fn split(&self, test_fraction: f64, stream: &mut RngStream) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction must lie in [0, 1), got {test_fraction}"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        stream.shuffle(&mut idx);
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let (test, train) = idx.split_at(n_test);
        if train.is_empty() {
            return Err(Error::Data("split leaves no training rows".into()));
        }
        Ok((self.subset(train), self.subset(test)))
    }
}

/// Balanced two-class set of `n` points.
pub fn generate(kind: Generator, n: usize, noise: f64, stream: &mut RngStream) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::Config(format!("dataset needs at least 10 points, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!("noise must be non-negative, got {noise}")));
    }
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // Alternate labels so any prefix is as balanced as possible.
        let c = i % 2;
        let (x, y) = match kind {
            Generator::Spirals => {
                let t = stream.uniform(0.0, 1.0).sqrt();
                let angle = SPIRAL_TURNS * std::f64::consts::TAU * t + c as f64 * std::f64::consts::PI;
                let r = 0.1 + 0.9 * t;
                (r * angle.cos(), r * angle.sin())
            }
            Generator::Blobs => {
                let centre = if c == 0 { -1.0 } else { 1.0 };
                (centre, centre)
            }
            Generator::XorGrid => {
                let sx = if stream.below(2) == 0 { -1.0 } else { 1.0 };
                let sy = if c == 0 { sx } else { -sx };
                (sx * stream.uniform(0.1, 1.0), sy * stream.uniform(0.1, 1.0))
            }
        };
        data.push(x + noise * stream.normal());
        data.push(y + noise * stream.normal());
        labels.push(c);
    }
    Dataset::new(Matrix::from_vec(n, 2, data), labels, 2)
}

/// Number of full turns each spiral arm makes.
pub const SPIRAL_TURNS: f64 = 1.0;

pub fn write_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["label".to_string()];
    header.extend((1..=ds.dim()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for i in 0..ds.len() {
        let mut rec = vec![ds.labels[i].to_string()];
        rec.extend(ds.features.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a `label,f1,…,fd` file. The class count is one more than the
/// largest label.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.is_empty() || header.get(0) == Some("") {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }
    if header.get(0) != Some("label") || header.len() < 2 {
        return Err(Error::Data(format!(
            "{}: header must be label,f1,...,fd",
            path.display()
        )));
    }
    for (j, h) in header.iter().enumerate().skip(1) {
        if h != format!("f{j}") {
            return Err(Error::Data(format!(
                "{}: header column {} is {h:?}, expected \"f{j}\"",
                path.display(),
                j + 1
            )));
        }
    }
    let d = header.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (k, rec) in r.records().enumerate() {
        // Line 1 is the header.
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Data(format!("{} line {line}: {e}", path.display())))?;
        if rec.len() != d + 1 {
            return Err(Error::Data(format!(
                "{} line {line}: expected {} fields, found {}",
                path.display(),
                d + 1,
                rec.len()
            )));
        }
        let label: usize = rec[0].trim().parse().map_err(|_| {
            Error::Data(format!("{} line {line}: bad label {:?}", path.display(), &rec[0]))
        })?;
        labels.push(label);
        for field in rec.iter().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Data(format!("{} line {line}: bad value {field:?}", path.display()))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!("{} line {line}: non-finite value", path.display())));
            }
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let n = labels.len();
    Dataset::new(Matrix::from_vec(n, d, data), labels, classes)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path.display().to_string(), io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Fixed-order minibatch sampler: a fresh permutation per epoch.
#[derive(Clone, Debug)]
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    stream: RngStream,
}

impl Batcher {
    pub fn new(n: usize, stream: RngStream) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            stream,
        }
    }

    /// Next `b` indices; wraps into a new epoch when exhausted.
    pub fn next_batch(&mut self, b: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.pos == self.order.len() {
                self.stream.shuffle(&mut self.order);
                self.pos = 0;
            }
            let take = (b - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}
