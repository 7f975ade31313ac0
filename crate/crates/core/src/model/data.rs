use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fmt_real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// Row-major feature matrix with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    split: Split,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, split: Split) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension("feature dimension must be positive".into()));
        }
        if labels.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Dimension(format!(
                "{} feature values for {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Dataset {
            features,
            labels,
            dim,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Number of classes implied by the largest label.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    /// Rows `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dimension(format!("row {i} out of range {}", self.len())));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(features, labels, self.dim, self.split)
    }

    /// Writes `f0,...,f{d-1},label` CSV.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        let mut header: Vec<String> = (0..self.dim).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        let mut line = String::new();
        for i in 0..self.len() {
            line.clear();
            for x in self.row(i) {
                line.push_str(&fmt_real(*x));
                line.push(',');
            }
            line.push_str(&self.labels[i].to_string());
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_csv(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
        let path = path.as_ref();
        let bad = |reason: String| Error::Data {
            path: path.to_path_buf(),
            reason,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                other => bad(format!("{other:?}")),
            })?;
        let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
        let dim = headers.len().saturating_sub(1);
        if dim == 0 || headers.get(dim) != Some("label") {
            return Err(bad("header must be f0,...,f{d-1},label".into()));
        }
        for (i, h) in headers.iter().take(dim).enumerate() {
            if h != format!("f{i}") {
                return Err(bad(format!("unexpected column {h:?} at position {i}")));
            }
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (n, record) in reader.records().enumerate() {
            let record = record.map_err(|e| bad(e.to_string()))?;
            for j in 0..dim {
                let x: f64 = record[j]
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("row {}: bad feature {:?}", n + 1, &record[j])))?;
                features.push(x);
            }
            let y: usize = record[dim]
                .trim()
                .parse()
                .map_err(|_| bad(format!("row {}: bad label {:?}", n + 1, &record[dim])))?;
            labels.push(y);
        }
        if labels.is_empty() {
            return Err(bad("no rows".into()));
        }
        Dataset::new(features, labels, dim, split)
    }
}
