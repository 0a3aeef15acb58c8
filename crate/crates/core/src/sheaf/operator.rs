//! Block-structured sparse linear operators.
//!
//! Coboundaries and sheaf Laplacians are sparse at the granularity of stalks:
//! an edge row of `δ` touches exactly two node columns, and a Laplacian row
//! block touches the node itself plus its neighbours. [`BlockSparseOperator`]
//! stores only those dense sub-blocks.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::SheafError;

/// A linear operator partitioned into row and column blocks of arbitrary
/// (per-block) size, storing only the nonzero blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSparseOperator {
    row_dims: Vec<usize>,
    col_dims: Vec<usize>,
    row_offsets: Vec<usize>,
    col_offsets: Vec<usize>,
    /// `rows[r]` maps column-block index to the dense block at `(r, c)`.
    rows: Vec<BTreeMap<usize, DMatrix<f64>>>,
}

fn offsets(dims: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(dims.len() + 1);
    let mut acc = 0;
    out.push(0);
    for &d in dims {
        acc += d;
        out.push(acc);
    }
    out
}

impl BlockSparseOperator {
    /// An operator with the given block layout and no stored blocks (the zero map).
    pub fn zeros(row_dims: Vec<usize>, col_dims: Vec<usize>) -> Self {
        let row_offsets = offsets(&row_dims);
        let col_offsets = offsets(&col_dims);
        let rows = vec![BTreeMap::new(); row_dims.len()];
        Self {
            row_dims,
            col_dims,
            row_offsets,
            col_offsets,
            rows,
        }
    }

    pub fn nrows(&self) -> usize {
        *self.row_offsets.last().unwrap()
    }

    pub fn ncols(&self) -> usize {
        *self.col_offsets.last().unwrap()
    }

    pub fn row_blocks(&self) -> usize {
        self.row_dims.len()
    }

    pub fn col_blocks(&self) -> usize {
        self.col_dims.len()
    }

    pub fn row_dims(&self) -> &[usize] {
        &self.row_dims
    }

    pub fn col_dims(&self) -> &[usize] {
        &self.col_dims
    }

    /// Number of stored (structurally nonzero) blocks.
    pub fn nnz_blocks(&self) -> usize {
        self.rows.iter().map(BTreeMap::len).sum()
    }

    pub fn block(&self, r: usize, c: usize) -> Option<&DMatrix<f64>> {
        self.rows.get(r).and_then(|row| row.get(&c))
    }

    /// Iterates stored blocks in row-major block order.
    pub fn blocks(&self) -> impl Iterator<Item = (usize, usize, &DMatrix<f64>)> {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().map(move |(&c, b)| (r, c, b)))
    }

    /// Adds `block` into position `(r, c)`, accumulating onto any block already there.
    pub fn add_block(&mut self, r: usize, c: usize, block: DMatrix<f64>) -> Result<(), SheafError> {
        if r >= self.row_dims.len() || c >= self.col_dims.len() {
            return Err(SheafError::Dimension {
                context: "block index",
                expected: format!("< ({}, {})", self.row_dims.len(), self.col_dims.len()),
                actual: format!("({r}, {c})"),
            });
        }
        let want = (self.row_dims[r], self.col_dims[c]);
        if block.shape() != want {
            return Err(SheafError::Dimension {
                context: "block shape",
                expected: format!("{}x{}", want.0, want.1),
                actual: format!("{}x{}", block.nrows(), block.ncols()),
            });
        }
        match self.rows[r].get_mut(&c) {
            Some(existing) => *existing += block,
            None => {
                self.rows[r].insert(c, block);
            }
        }
        Ok(())
    }

    /// Applies the operator to a dense matrix whose rows follow the column
    /// block layout. Row blocks are computed independently.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, SheafError> {
        if x.nrows() != self.ncols() {
            return Err(SheafError::Dimension {
                context: "operator apply",
                expected: format!("{} rows", self.ncols()),
                actual: format!("{} rows", x.nrows()),
            });
        }
        let f = x.ncols();
        let parts: Vec<DMatrix<f64>> = self
            .rows
            .par_iter()
            .enumerate()
            .map(|(r, row)| {
                let mut acc = DMatrix::zeros(self.row_dims[r], f);
                for (&c, block) in row {
                    let xs = x.rows(self.col_offsets[c], self.col_dims[c]);
                    acc.gemm(1.0, block, &xs, 1.0);
                }
                acc
            })
            .collect();
        let mut out = DMatrix::zeros(self.nrows(), f);
        for (r, part) in parts.into_iter().enumerate() {
            out.rows_mut(self.row_offsets[r], self.row_dims[r]).copy_from(&part);
        }
        Ok(out)
    }

    /// Dense materialization, mainly for tests and small diagnostics.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows(), self.ncols());
        for (r, c, block) in self.blocks() {
            let mut view = out.view_mut(
                (self.row_offsets[r], self.col_offsets[c]),
                (self.row_dims[r], self.col_dims[c]),
            );
            view += block;
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.col_dims.clone(), self.row_dims.clone());
        for (r, c, block) in self.blocks() {
            out.rows[c].insert(r, block.transpose());
        }
        out
    }

    /// Computes `selfᵀ · self` block by block without forming either factor densely.
    pub fn gram(&self) -> Self {
        let mut out = Self::zeros(self.col_dims.clone(), self.col_dims.clone());
        for row in &self.rows {
            for (&ci, bi) in row {
                let bit = bi.transpose();
                for (&cj, bj) in row {
                    let prod = &bit * bj;
                    match out.rows[ci].get_mut(&cj) {
                        Some(existing) => *existing += prod,
                        None => {
                            out.rows[ci].insert(cj, prod);
                        }
                    }
                }
            }
        }
        out
    }

    /// First scalar row of block row `r`.
    pub fn row_offset(&self, r: usize) -> usize {
        self.row_offsets[r]
    }

    pub fn col_offset(&self, c: usize) -> usize {
        self.col_offsets[c]
    }

    /// Returns a copy with every stored block `(r, c)` replaced by `f(r, c, block)`.
    pub(crate) fn map_blocks<F>(&self, mut f: F) -> Self
    where
        F: FnMut(usize, usize, &DMatrix<f64>) -> DMatrix<f64>,
    {
        let mut out = Self::zeros(self.row_dims.clone(), self.col_dims.clone());
        for (r, c, block) in self.blocks() {
            out.rows[r].insert(c, f(r, c, block));
        }
        out
    }
}
