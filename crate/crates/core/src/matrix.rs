//! Symmetric task-by-task matrices with per-entry validity.
//!
//! The same container holds gradient similarities, empirical label
//! correlations, sample overlaps and designed ground-truth similarities.
//! Entries that could not be estimated (a task absent from a batch, too few
//! co-measured samples) are kept as invalid rather than filled with a
//! sentinel value.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

/// What a [`PairwiseMatrix`] measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    Gradient,
    Empirical,
    Overlap,
    GroundTruth,
    Distance,
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            MatrixKind::Gradient => "gradient",
            MatrixKind::Empirical => "empirical",
            MatrixKind::Overlap => "overlap",
            MatrixKind::GroundTruth => "ground_truth",
            MatrixKind::Distance => "distance",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MatrixError {
    #[error("matrix dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("{kind} entry ({row}, {col}) = {value} is outside its allowed range")]
    OutOfRange {
        kind: MatrixKind,
        row: usize,
        col: usize,
        value: f64,
    },
    #[error("expected {expected} task names, got {got}")]
    NameCount { expected: usize, got: usize },
}

/// Square K×K matrix over task pairs, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseMatrix {
    n: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
    kind: MatrixKind,
}

impl PairwiseMatrix {
    /// An all-invalid matrix whose diagonal is valid and set to `diagonal`.
    pub fn new(n: usize, kind: MatrixKind, diagonal: f64) -> Self {
        let mut m = Self {
            n,
            values: vec![0.0; n * n],
            valid: vec![false; n * n],
            kind,
        };
        for i in 0..n {
            m.values[i * n + i] = diagonal;
            m.valid[i * n + i] = true;
        }
        m
    }

    /// Fully valid matrix from a dense row-major closure; symmetry is checked.
    pub fn from_fn(
        n: usize,
        kind: MatrixKind,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, MatrixError> {
        let mut values = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                values.push(f(i, j));
            }
        }
        let m = Self {
            n,
            values,
            valid: vec![true; n * n],
            kind,
        };
        m.check()?;
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let idx = i * self.n + j;
        self.valid[idx].then_some(self.values[idx])
    }

    /// Raw stored value regardless of validity.
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[i * self.n + j]
    }

    /// Sets both (i, j) and (j, i).
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let n = self.n;
        self.values[i * n + j] = value;
        self.values[j * n + i] = value;
        self.valid[i * n + j] = true;
        self.valid[j * n + i] = true;
    }

    /// Marks both (i, j) and (j, i) invalid and zeroes the stored value.
    pub fn invalidate(&mut self, i: usize, j: usize) {
        let n = self.n;
        self.values[i * n + j] = 0.0;
        self.values[j * n + i] = 0.0;
        self.valid[i * n + j] = false;
        self.valid[j * n + i] = false;
    }

    pub fn with_kind(mut self, kind: MatrixKind) -> Self {
        self.kind = kind;
        self
    }

    /// Strict upper triangle as `(i, j, value)` over valid entries.
    pub fn upper_triangle(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            (i + 1..self.n).filter_map(move |j| self.get(i, j).map(|v| (i, j, v)))
        })
    }

    pub fn n_valid_pairs(&self) -> usize {
        self.upper_triangle().count()
    }

    /// Reorders rows and columns: entry (a, b) of the result is entry
    /// (order[a], order[b]) of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        assert_eq!(order.len(), self.n, "permutation length must equal n");
        let n = self.n;
        let mut out = self.clone();
        for a in 0..n {
            for b in 0..n {
                let src = order[a] * n + order[b];
                out.values[a * n + b] = self.values[src];
                out.valid[a * n + b] = self.valid[src];
            }
        }
        out
    }

    /// Verifies symmetry and the value range implied by the matrix kind.
    pub fn check(&self) -> Result<(), MatrixError> {
        let n = self.n;
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (i * n + j, j * n + i);
                if self.valid[a] != self.valid[b] || (self.valid[a] && self.values[a] != self.values[b])
                {
                    return Err(MatrixError::NotSymmetric { row: i, col: j });
                }
                if !self.valid[a] {
                    continue;
                }
                let v = self.values[a];
                let ok = match self.kind {
                    MatrixKind::Overlap => (0.0..=1.0).contains(&v),
                    MatrixKind::Distance => v >= 0.0 && v.is_finite(),
                    _ => (-1.0..=1.0).contains(&v),
                };
                if !ok {
                    return Err(MatrixError::OutOfRange {
                        kind: self.kind,
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
        }
        Ok(())
    }

    /// Square CSV with task names on the header row and first column.
    /// Invalid entries are written as empty cells.
    pub fn write_csv<W: Write>(&self, names: &[String], out: W) -> Result<(), MatrixCsvError> {
        if names.len() != self.n {
            return Err(MatrixError::NameCount {
                expected: self.n,
                got: names.len(),
            }
            .into());
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![String::from("task")];
        header.extend(names.iter().cloned());
        w.write_record(&header)?;
        for (i, name) in names.iter().enumerate() {
            let mut row = vec![name.clone()];
            row.extend((0..self.n).map(|j| self.get(i, j).map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Inverse of [`write_csv`](Self::write_csv). Returns the task names
    /// alongside the matrix.
    pub fn read_csv<R: std::io::Read>(
        input: R,
        kind: MatrixKind,
    ) -> Result<(Vec<String>, Self), MatrixCsvError> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let names: Vec<String> = r.headers()?.iter().skip(1).map(str::to_owned).collect();
        let n = names.len();
        let mut m = Self::new(n, kind, 1.0);
        let mut rows = 0;
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if i >= n || rec.len() != n + 1 {
                return Err(MatrixCsvError::Shape);
            }
            for j in 0..n {
                let cell = rec[j + 1].trim();
                let idx = i * n + j;
                if cell.is_empty() {
                    m.valid[idx] = false;
                    m.values[idx] = 0.0;
                } else {
                    m.values[idx] = cell.parse().map_err(|_| MatrixCsvError::Cell {
                        row: i,
                        col: j,
                        text: cell.to_owned(),
                    })?;
                    m.valid[idx] = true;
                }
            }
            rows += 1;
        }
        if rows != n {
            return Err(MatrixCsvError::Shape);
        }
        m.check()?;
        Ok((names, m))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MatrixCsvError {
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("matrix csv is not square")]
    Shape,
    #[error("cannot parse matrix cell ({row}, {col}): {text:?}")]
    Cell { row: usize, col: usize, text: String },
}
