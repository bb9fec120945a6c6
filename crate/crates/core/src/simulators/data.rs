//! Row-major real matrices used for datasets, latent blocks and sample sets.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Observations, one row per exchangeable data point.
pub type Dataset = Matrix;
/// Latent primitives (uniform quantiles and standard normals), one row per observation.
pub type LatentBlock = Matrix;

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("matrix data", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("matrix row", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(if self.cols == 0 { 0 } else { self.rows })
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows == 0 && self.data.is_empty() && self.cols == 0 {
            self.cols = row.len();
        }
        if row.len() != self.cols {
            return Err(Error::dim("matrix row", self.cols, row.len()));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        for r in self.iter_rows() {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.rows.max(1) as f64);
        m
    }

    /// Per-column sample standard deviation (divisor `rows - 1`).
    pub fn column_sds(&self) -> Vec<f64> {
        let mean = self.column_means();
        let mut v = vec![0.0; self.cols];
        for r in self.iter_rows() {
            for j in 0..self.cols {
                v[j] += (r[j] - mean[j]).powi(2);
            }
        }
        let denom = (self.rows.max(2) - 1) as f64;
        v.iter().map(|s| (s / denom).sqrt()).collect()
    }

    pub fn to_csv(&self, header: &[String]) -> Result<String> {
        if header.len() != self.cols {
            return Err(Error::dim("csv header", self.cols, header.len()));
        }
        let mut s = header.join(",");
        s.push('\n');
        for r in self.iter_rows() {
            for (j, v) in r.iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                write!(s, "{v}").unwrap();
            }
            s.push('\n');
        }
        Ok(s)
    }

    /// Parse a CSV with a header row; returns the header and the values.
    pub fn from_csv(text: &str) -> Result<(Vec<String>, Matrix)> {
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Input("empty csv".into()))?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut m = Matrix::zeros(0, header.len());
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Input(format!("csv line {}: {e}", i + 2)))?;
            m.push_row(&row)?;
        }
        Ok((header, m))
    }

    pub fn save_bin(&self, path: &Path) -> Result<()> {
        binfmt::save(path, &(self.rows, self.cols), &self.data)
    }

    pub fn load_bin(path: &Path) -> Result<Matrix> {
        let ((rows, cols), data): ((usize, usize), Vec<f64>) = binfmt::load(path)?;
        Matrix::from_vec(rows, cols, data)
    }
}
