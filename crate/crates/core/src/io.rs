//! JSON and CSV encodings shared by the library and the command-line runner.
//!
//! Matrices are dense row-major arrays of `[re, im]` pairs. Floats in CSV
//! use Rust's shortest round-trip formatting, so identical inputs produce
//! byte-identical files.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SbqsError};
use crate::tensor::{ComplexMatrix, ComplexVector, C64};

/// Row-major `[re, im]` encoding of a dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseMatrix(pub Vec<Vec<[f64; 2]>>);

impl DenseMatrix {
    pub fn from_matrix(m: &ComplexMatrix) -> Self {
        DenseMatrix(
            (0..m.nrows())
                .map(|i| (0..m.ncols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect())
                .collect(),
        )
    }

    pub fn to_matrix(&self) -> Result<ComplexMatrix> {
        let rows = self.0.len();
        if rows == 0 {
            return Err(SbqsError::Dimension("matrix has no rows".into()));
        }
        let cols = self.0[0].len();
        if let Some((i, r)) = self.0.iter().enumerate().find(|(_, r)| r.len() != cols) {
            return Err(SbqsError::Dimension(format!(
                "row {i} has {} entries, expected {cols}",
                r.len()
            )));
        }
        let m = ComplexMatrix::from_fn(rows, cols, |i, j| C64::new(self.0[i][j][0], self.0[i][j][1]));
        if !crate::tensor::all_finite(&m) {
            return Err(SbqsError::Argument("matrix contains non-finite entries".into()));
        }
        Ok(m)
    }

    /// Parse and require a square matrix of side `d` when given.
    pub fn to_square(&self, d: Option<usize>) -> Result<ComplexMatrix> {
        let m = self.to_matrix()?;
        if !m.is_square() {
            return Err(SbqsError::Dimension(format!(
                "expected a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if let Some(d) = d {
            if m.nrows() != d {
                return Err(SbqsError::Dimension(format!(
                    "expected dimension {d}, got {}",
                    m.nrows()
                )));
            }
        }
        Ok(m)
    }
}

/// A complex number encoded as `[re, im]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JsonComplex(pub [f64; 2]);

impl From<C64> for JsonComplex {
    fn from(z: C64) -> Self {
        JsonComplex([z.re, z.im])
    }
}

impl From<JsonComplex> for C64 {
    fn from(z: JsonComplex) -> Self {
        C64::new(z.0[0], z.0[1])
    }
}

pub fn vector_to_json(v: &ComplexVector) -> Vec<[f64; 2]> {
    v.iter().map(|z| [z.re, z.im]).collect()
}

pub fn vector_from_json(v: &[[f64; 2]]) -> ComplexVector {
    ComplexVector::from_iterator(v.len(), v.iter().map(|p| C64::new(p[0], p[1])))
}

/// Shortest round-trip decimal representation.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Build a CSV document with `#`-prefixed provenance lines.
#[derive(Debug, Default, Clone)]
pub struct CsvWriter {
    buf: String,
}

impl CsvWriter {
    pub fn new() -> Self {
        CsvWriter::default()
    }

    pub fn comment(&mut self, line: &str) -> &mut Self {
        for l in line.lines() {
            let _ = writeln!(self.buf, "# {l}");
        }
        self
    }

    pub fn header<S: AsRef<str>>(&mut self, cols: &[S]) -> &mut Self {
        let joined: Vec<&str> = cols.iter().map(|c| c.as_ref()).collect();
        let _ = writeln!(self.buf, "{}", joined.join(","));
        self
    }

    pub fn row(&mut self, values: &[f64]) -> &mut Self {
        let cells: Vec<String> = values.iter().map(|v| fmt_f64(*v)).collect();
        let _ = writeln!(self.buf, "{}", cells.join(","));
        self
    }

    pub fn finish(self) -> String {
        self.buf
    }
}

/// Column names for a flattened matrix: `re_i_j, im_i_j` row-major.
pub fn matrix_columns(d: usize) -> Vec<String> {
    let mut cols = Vec::with_capacity(2 * d * d);
    for i in 0..d {
        for j in 0..d {
            cols.push(format!("re_{i}_{j}"));
            cols.push(format!("im_{i}_{j}"));
        }
    }
    cols
}

pub fn flatten_matrix(m: &ComplexMatrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)].re);
            out.push(m[(i, j)].im);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_round_trip() {
        let m = ComplexMatrix::from_fn(2, 3, |i, j| C64::new(i as f64 + 0.1, j as f64 - 1.0 / 3.0));
        let enc = DenseMatrix::from_matrix(&m);
        let json = serde_json::to_string(&enc).unwrap();
        let back: DenseMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_matrix().unwrap(), m);
    }

    #[test]
    fn ragged_rows_rejected() {
        let bad = DenseMatrix(vec![vec![[1.0, 0.0]], vec![[0.0, 0.0], [1.0, 0.0]]]);
        assert!(matches!(bad.to_matrix(), Err(SbqsError::Dimension(_))));
    }

    #[test]
    fn shortest_float_format_round_trips() {
        for x in [0.1, 1.0 / 3.0, 1e-300, -2.5e17, 0.0] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
        }
    }
}
