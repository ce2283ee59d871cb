//! Compressed sparse row index pattern shared by the sparse attention
//! kernels. The pattern is pure structure: values live on the tape, the
//! pattern never does, and gradients do not flow through it.

use crate::error::{Error, Result};

/// Row-compressed index set for an `n_rows x n_cols` boolean pattern.
///
/// `indptr` has `n_rows + 1` monotonically non-decreasing entries starting
/// at 0 and ending at `nnz`; `indices[indptr[i]..indptr[i+1]]` are the
/// column positions stored for row `i`, kept in the order the selector
/// emitted them (descending score, then ascending key index).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsrPattern {
    pub n_rows: usize,
    pub n_cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
}

impl CsrPattern {
    pub fn new(n_rows: usize, n_cols: usize, indptr: Vec<usize>, indices: Vec<usize>) -> Result<Self> {
        if indptr.len() != n_rows + 1 || indptr.first() != Some(&0) || indptr.last() != Some(&indices.len()) {
            return Err(Error::Config(format!(
                "csr indptr must run 0..={} over {} rows, got len {}",
                indices.len(),
                n_rows,
                indptr.len()
            )));
        }
        if indptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("csr indptr must be non-decreasing".into()));
        }
        if indices.iter().any(|&j| j >= n_cols) {
            return Err(Error::Config(format!("csr column index out of range (n_cols {n_cols})")));
        }
        Ok(Self { n_rows, n_cols, indptr, indices })
    }

    /// Fully dense pattern; row i stores every column in ascending order.
    pub fn full(n_rows: usize, n_cols: usize) -> Self {
        let indptr = (0..=n_rows).map(|i| i * n_cols).collect();
        let indices = (0..n_rows).flat_map(|_| 0..n_cols).collect();
        Self { n_rows, n_cols, indptr, indices }
    }

    /// Build from per-row index lists.
    pub fn from_rows(n_cols: usize, rows: &[Vec<usize>]) -> Result<Self> {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        indptr.push(0);
        for row in rows {
            indices.extend_from_slice(row);
            indptr.push(indices.len());
        }
        Self::new(rows.len(), n_cols, indptr, indices)
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[self.indptr[i]..self.indptr[i + 1]]
    }

    pub fn row_len(&self, i: usize) -> usize {
        self.indptr[i + 1] - self.indptr[i]
    }
}
