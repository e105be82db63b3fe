//! Compressed sparse row and row-major dense matrices.
//!
//! Kernels here are single-threaded and sum each output entry in a fixed
//! left-to-right order over the stored entries of a row, so results are
//! bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        DenseMatrix {
            n_rows,
            n_cols,
            data: vec![0.0; n_rows * n_cols],
        }
    }

    pub fn from_vec(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_rows * n_cols {
            return Err(contract(format!(
                "dense {n_rows}x{n_cols} needs {} entries, got {}",
                n_rows * n_cols,
                data.len()
            )));
        }
        Ok(DenseMatrix {
            n_rows,
            n_cols,
            data,
        })
    }

    /// Build from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == n_cols), "ragged rows");
        DenseMatrix {
            n_rows,
            n_cols,
            data: rows.concat(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_rows, self.n_cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.n_cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.n_cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.n_cols..(r + 1) * self.n_cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.n_cols..(r + 1) * self.n_cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.n_cols != rhs.n_rows {
            return Err(contract(format!(
                "matmul {:?} x {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let mut out = DenseMatrix::zeros(self.n_rows, rhs.n_cols);
        for r in 0..self.n_rows {
            let out_row = &mut out.data[r * rhs.n_cols..(r + 1) * rhs.n_cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs`.
    pub fn t_matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.n_rows != rhs.n_rows {
            return Err(contract(format!(
                "t_matmul {:?}ᵀ x {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let mut out = DenseMatrix::zeros(self.n_cols, rhs.n_cols);
        for r in 0..self.n_rows {
            let rhs_row = rhs.row(r);
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out.row_mut(k).iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ`.
    pub fn matmul_t(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.n_cols != rhs.n_cols {
            return Err(contract(format!(
                "matmul_t {:?} x {:?}ᵀ",
                self.shape(),
                rhs.shape()
            )));
        }
        let mut out = DenseMatrix::zeros(self.n_rows, rhs.n_rows);
        for r in 0..self.n_rows {
            let a = self.row(r);
            for k in 0..rhs.n_rows {
                out.data[r * rhs.n_rows + k] = dot(a, rhs.row(k));
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.n_cols, self.n_rows);
        for r in 0..self.n_rows {
            for c in 0..self.n_cols {
                out.data[c * self.n_rows + r] = self.data[r * self.n_cols + c];
            }
        }
        out
    }

    /// Frobenius inner product `Σ self ⊙ other`.
    pub fn frobenius_dot(&self, other: &DenseMatrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        dot(&self.data, &other.data)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &DenseMatrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Compressed sparse row matrix.
///
/// Invariants: `row_offsets` is non-decreasing with `row_offsets[0] == 0` and
/// `row_offsets[n_rows] == nnz`; column indices within a row are strictly
/// increasing and below `n_cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CsrParts")]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

/// Wire form of [`CsrMatrix`]; deserialization re-checks every invariant.
#[derive(Deserialize)]
struct CsrParts {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl TryFrom<CsrParts> for CsrMatrix {
    type Error = crate::error::Error;

    fn try_from(p: CsrParts) -> Result<Self> {
        CsrMatrix::from_parts(p.n_rows, p.n_cols, p.row_offsets, p.col_indices, p.values)
    }
}

impl CsrMatrix {
    /// Validate and assemble raw CSR arrays.
    pub fn from_parts(
        n_rows: usize,
        n_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_offsets.len() != n_rows + 1 || row_offsets[0] != 0 {
            return Err(contract("row_offsets must have n_rows+1 entries starting at 0"));
        }
        if row_offsets[n_rows] != col_indices.len() || col_indices.len() != values.len() {
            return Err(contract("row_offsets[n_rows], col_indices and values disagree"));
        }
        for r in 0..n_rows {
            let (lo, hi) = (row_offsets[r], row_offsets[r + 1]);
            if lo > hi {
                return Err(contract(format!("row_offsets decrease at row {r}")));
            }
            let cols = &col_indices[lo..hi];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(contract(format!("row {r} columns not strictly increasing")));
            }
            if cols.last().is_some_and(|&c| c >= n_cols) {
                return Err(contract(format!("row {r} has a column >= {n_cols}")));
            }
        }
        Ok(CsrMatrix {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Build from coordinate triples in any order. Duplicate coordinates are
    /// rejected rather than summed.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        if let Some(&(r, c, _)) = triplets.iter().find(|&&(r, c, _)| r >= n_rows || c >= n_cols) {
            return Err(contract(format!(
                "entry ({r}, {c}) outside {n_rows}x{n_cols}"
            )));
        }
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        if let Some(w) = triplets
            .windows(2)
            .find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1))
        {
            return Err(contract(format!("duplicate entry ({}, {})", w[0].0, w[0].1)));
        }
        let mut row_offsets = vec![0usize; n_rows + 1];
        for &(r, _, _) in &triplets {
            row_offsets[r + 1] += 1;
        }
        for r in 0..n_rows {
            row_offsets[r + 1] += row_offsets[r];
        }
        let (col_indices, values) = triplets.into_iter().map(|(_, c, v)| (c, v)).unzip();
        Ok(CsrMatrix {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Build from per-row sorted column lists, all values set to `value`.
    pub(crate) fn from_sorted_rows(n_cols: usize, rows: &[Vec<usize>], value: f64) -> Self {
        let mut row_offsets = Vec::with_capacity(rows.len() + 1);
        row_offsets.push(0);
        let nnz = rows.iter().map(Vec::len).sum();
        let mut col_indices = Vec::with_capacity(nnz);
        for row in rows {
            debug_assert!(row.windows(2).all(|w| w[0] < w[1]));
            col_indices.extend_from_slice(row);
            row_offsets.push(col_indices.len());
        }
        CsrMatrix {
            n_rows: rows.len(),
            n_cols,
            row_offsets,
            col_indices,
            values: vec![value; nnz],
        }
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        CsrMatrix {
            n_rows,
            n_cols,
            row_offsets: vec![0; n_rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Stores every nonzero entry of `dense`.
    pub fn from_dense(dense: &DenseMatrix) -> Self {
        let mut triplets = Vec::new();
        for r in 0..dense.n_rows() {
            for (c, &v) in dense.row(r).iter().enumerate() {
                if v != 0.0 {
                    triplets.push((r, c, v));
                }
            }
        }
        CsrMatrix::from_triplets(dense.n_rows(), dense.n_cols(), triplets)
            .expect("dense matrix yields valid triplets")
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.n_rows, self.n_cols);
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out.set(r, c, v);
            }
        }
        out
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_rows, self.n_cols)
    }

    /// Number of stored entries.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.row_offsets[r], self.row_offsets[r + 1]);
        (&self.col_indices[lo..hi], &self.values[lo..hi])
    }

    /// Stored value at `(r, c)`, or 0.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map_or(0.0, |i| vals[i])
    }

    /// Same sparsity pattern with new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.nnz() {
            return Err(contract(format!(
                "expected {} values, got {}",
                self.nnz(),
                values.len()
            )));
        }
        Ok(CsrMatrix {
            values,
            ..self.clone()
        })
    }

    pub fn same_pattern(&self, other: &CsrMatrix) -> bool {
        self.shape() == other.shape()
            && self.row_offsets == other.row_offsets
            && self.col_indices == other.col_indices
    }

    /// Sparse × dense product `self · d`.
    pub fn spmm(&self, d: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = DenseMatrix::zeros(self.n_rows, d.n_cols());
        self.spmm_acc(1.0, d, &mut out)?;
        Ok(out)
    }

    /// `out += alpha · self · d`. Cost is `nnz × d.n_cols`.
    pub fn spmm_acc(&self, alpha: f64, d: &DenseMatrix, out: &mut DenseMatrix) -> Result<()> {
        if self.n_cols != d.n_rows() || out.shape() != (self.n_rows, d.n_cols()) {
            return Err(contract(format!(
                "spmm {:?} x {:?} into {:?}",
                self.shape(),
                d.shape(),
                out.shape()
            )));
        }
        let rows = RowSlices {
            offsets: &self.row_offsets,
            cols: &self.col_indices,
            values: &self.values,
        };
        dispatch_rows(&rows, alpha, d.n_cols(), d.data(), out.data_mut());
        Ok(())
    }

    /// `selfᵀ · d` without materializing the transpose (scatter over rows).
    pub fn t_spmm(&self, d: &DenseMatrix) -> Result<DenseMatrix> {
        if self.n_rows != d.n_rows() {
            return Err(contract(format!(
                "t_spmm {:?}ᵀ x {:?}",
                self.shape(),
                d.shape()
            )));
        }
        let k = d.n_cols();
        let mut out = DenseMatrix::zeros(self.n_cols, k);
        let dst = out.data_mut();
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            let src_row = d.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                for (o, &s) in dst[c * k..(c + 1) * k].iter_mut().zip(src_row) {
                    *o += v * s;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &c in &self.col_indices {
            counts[c + 1] += 1;
        }
        for c in 0..self.n_cols {
            counts[c + 1] += counts[c];
        }
        let row_offsets = counts.clone();
        let mut next = counts;
        let mut col_indices = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        // Visiting source rows in increasing order keeps output columns sorted.
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let slot = next[c];
                col_indices[slot] = r;
                values[slot] = v;
                next[c] += 1;
            }
        }
        CsrMatrix {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            row_offsets,
            col_indices,
            values,
        }
    }

    /// Divide each row by its sum. All-zero rows stay zero; the sparsity
    /// pattern is unchanged.
    pub fn row_normalize(&self) -> Result<CsrMatrix> {
        if let Some(v) = self.values.iter().find(|&&v| !(v >= 0.0)) {
            return Err(contract(format!("row_normalize needs nonnegative entries, found {v}")));
        }
        let mut values = self.values.clone();
        for r in 0..self.n_rows {
            let (lo, hi) = (self.row_offsets[r], self.row_offsets[r + 1]);
            let sum: f64 = values[lo..hi].iter().sum();
            if sum > 0.0 {
                values[lo..hi].iter_mut().for_each(|v| *v /= sum);
            }
        }
        self.with_values(values)
    }

    /// Symmetric normalization with self-loops, `D̃^{-1/2} (A + I) D̃^{-1/2}`
    /// with `D̃_ii = 1 + deg(i)`. `self` must be a square, pattern-symmetric
    /// adjacency without self-loops; stored values are treated as 1.
    pub fn sym_normalize(&self) -> Result<CsrMatrix> {
        if self.n_rows != self.n_cols {
            return Err(contract("sym_normalize needs a square matrix"));
        }
        let n = self.n_rows;
        for r in 0..n {
            let (cols, _) = self.row(r);
            if cols.binary_search(&r).is_ok() {
                return Err(contract(format!("self-loop at node {r}")));
            }
        }
        if !self.same_pattern(&self.transpose()) {
            return Err(contract("adjacency pattern is not symmetric"));
        }
        let inv_sqrt: Vec<f64> = (0..n)
            .map(|r| 1.0 / ((1 + self.row(r).0.len()) as f64).sqrt())
            .collect();
        let mut row_offsets = Vec::with_capacity(n + 1);
        row_offsets.push(0);
        let mut col_indices = Vec::with_capacity(self.nnz() + n);
        let mut values = Vec::with_capacity(self.nnz() + n);
        for r in 0..n {
            let (cols, _) = self.row(r);
            let split = cols.partition_point(|&c| c < r);
            let merged = cols[..split]
                .iter()
                .copied()
                .chain(std::iter::once(r))
                .chain(cols[split..].iter().copied());
            for c in merged {
                col_indices.push(c);
                values.push(inv_sqrt[r] * inv_sqrt[c]);
            }
            row_offsets.push(col_indices.len());
        }
        Ok(CsrMatrix {
            n_rows: n,
            n_cols: n,
            row_offsets,
            col_indices,
            values,
        })
    }
}

trait Index: Copy {
    fn ix(self) -> usize;
}

impl Index for usize {
    #[inline(always)]
    fn ix(self) -> usize {
        self
    }
}

impl Index for u32 {
    #[inline(always)]
    fn ix(self) -> usize {
        self as usize
    }
}

/// Borrowed CSR arrays; column indices are relative to the gathered slice.
struct RowSlices<'a, O, C> {
    offsets: &'a [O],
    cols: &'a [C],
    values: &'a [f64],
}

/// `dst += alpha · rows · src` with `src` and `dst` row-major of width `k`.
/// Each output row is summed into a local accumulator in stored order, then
/// added once, so the result does not depend on `k`-specialization.
fn dispatch_rows<O: Index, C: Index>(rows: &RowSlices<O, C>, alpha: f64, k: usize, src: &[f64], dst: &mut [f64]) {
    if k == 0 {
        return;
    }
    macro_rules! fixed {
        ($($n:literal)*) => {
            match k {
                $($n => rows_fixed::<O, C, $n>(rows, alpha, src, dst),)*
                _ => rows_dynamic(rows, alpha, k, src, dst),
            }
        };
    }
    fixed!(1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16);
}

fn rows_fixed<O: Index, C: Index, const K: usize>(rows: &RowSlices<O, C>, alpha: f64, src: &[f64], dst: &mut [f64]) {
    for (r, out) in dst.chunks_exact_mut(K).enumerate() {
        let (lo, hi) = (rows.offsets[r].ix(), rows.offsets[r + 1].ix());
        if lo == hi {
            continue;
        }
        let mut acc = [0.0; K];
        for (&c, &v) in rows.cols[lo..hi].iter().zip(&rows.values[lo..hi]) {
            let s: &[f64; K] = src[c.ix() * K..c.ix() * K + K].try_into().unwrap();
            for t in 0..K {
                acc[t] += v * s[t];
            }
        }
        for t in 0..K {
            out[t] += alpha * acc[t];
        }
    }
}

fn rows_dynamic<O: Index, C: Index>(rows: &RowSlices<O, C>, alpha: f64, k: usize, src: &[f64], dst: &mut [f64]) {
    let mut acc = vec![0.0; k];
    for (r, out) in dst.chunks_exact_mut(k).enumerate() {
        let (lo, hi) = (rows.offsets[r].ix(), rows.offsets[r + 1].ix());
        if lo == hi {
            continue;
        }
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (&c, &v) in rows.cols[lo..hi].iter().zip(&rows.values[lo..hi]) {
            for (a, &s) in acc.iter_mut().zip(&src[c.ix() * k..(c.ix() + 1) * k]) {
                *a += v * s;
            }
        }
        for (o, &a) in out.iter_mut().zip(&acc) {
            *o += alpha * a;
        }
    }
}

/// Columns per block of a [`BlockedCsr`]: 8192 rows of a 16-wide `f64`
/// operand occupy 1 MiB, which stays in a typical L2 cache.
pub const DEFAULT_BLOCK_COLS: usize = 8192;

/// Every block costs one pass over the output rows, which only pays off when
/// each row has a few entries per block.
const MIN_ENTRIES_PER_BLOCK_ROW: usize = 2;

#[derive(Debug, Clone)]
struct ColumnBlock {
    col_start: usize,
    col_end: usize,
    row_offsets: Vec<u32>,
    cols: Vec<u32>,
    values: Vec<f64>,
}

/// A CSR matrix split into contiguous column ranges for products with tall
/// dense operands. Each block only gathers rows from its own slice of the
/// operand, so the random accesses of a product stay cache-resident however
/// large the graph is. Per output entry, a block's contributions are summed
/// locally and added block by block in ascending column order; with a single
/// block this is exactly [`CsrMatrix::spmm_acc`].
#[derive(Debug, Clone)]
pub struct BlockedCsr {
    n_rows: usize,
    n_cols: usize,
    nnz: usize,
    blocks: Vec<ColumnBlock>,
}

impl BlockedCsr {
    /// Split `m` into column blocks of `block_cols`, or keep one block when
    /// `m` is too sparse for blocking to pay off.
    pub fn new(m: &CsrMatrix, block_cols: usize) -> Result<Self> {
        if block_cols == 0 || block_cols > u32::MAX as usize {
            return Err(contract(format!("block width {block_cols} out of range")));
        }
        let wanted = m.n_cols.div_ceil(block_cols).max(1);
        let block_cols = if m.nnz() >= MIN_ENTRIES_PER_BLOCK_ROW * m.n_rows * wanted {
            block_cols
        } else {
            m.n_cols.clamp(1, u32::MAX as usize)
        };
        Self::with_block_cols(m, block_cols)
    }

    /// Split into blocks of exactly `block_cols` columns.
    pub fn with_block_cols(m: &CsrMatrix, block_cols: usize) -> Result<Self> {
        if block_cols == 0 || block_cols > u32::MAX as usize {
            return Err(contract(format!("block width {block_cols} out of range")));
        }
        let n_blocks = m.n_cols.div_ceil(block_cols).max(1);
        let mut blocks: Vec<ColumnBlock> = (0..n_blocks)
            .map(|b| ColumnBlock {
                col_start: b * block_cols,
                col_end: ((b + 1) * block_cols).min(m.n_cols),
                row_offsets: Vec::with_capacity(m.n_rows + 1),
                cols: Vec::new(),
                values: Vec::new(),
            })
            .collect();
        for blk in &mut blocks {
            blk.row_offsets.push(0);
        }
        for r in 0..m.n_rows {
            let (cols, vals) = m.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let blk = &mut blocks[c / block_cols];
                blk.cols.push((c - blk.col_start) as u32);
                blk.values.push(v);
            }
            for blk in &mut blocks {
                let end = u32::try_from(blk.cols.len())
                    .map_err(|_| contract("column block exceeds u32 entries"))?;
                blk.row_offsets.push(end);
            }
        }
        Ok(BlockedCsr {
            n_rows: m.n_rows,
            n_cols: m.n_cols,
            nnz: m.nnz(),
            blocks,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// `self · d`.
    pub fn spmm(&self, d: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = DenseMatrix::zeros(self.n_rows, d.n_cols());
        self.spmm_acc(1.0, d, &mut out)?;
        Ok(out)
    }

    /// `out += alpha · self · d`.
    pub fn spmm_acc(&self, alpha: f64, d: &DenseMatrix, out: &mut DenseMatrix) -> Result<()> {
        if self.n_cols != d.n_rows() || out.shape() != (self.n_rows, d.n_cols()) {
            return Err(contract(format!(
                "spmm {}x{} x {:?} into {:?}",
                self.n_rows,
                self.n_cols,
                d.shape(),
                out.shape()
            )));
        }
        let k = d.n_cols();
        for blk in &self.blocks {
            let rows = RowSlices {
                offsets: &blk.row_offsets,
                cols: &blk.cols,
                values: &blk.values,
            };
            let src = &d.data()[blk.col_start * k..blk.col_end * k];
            dispatch_rows(&rows, alpha, k, src, out.data_mut());
        }
        Ok(())
    }
}
