//! Dense and sparse real matrices plus the kernels the sketchers build on.
//!
//! [`SparseMatrix`] is column-compressed (CSC): ESCK clusters the columns of
//! `M = XD`, so column access is the hot path. Row access (classification,
//! per-sample transforms) goes through a [`CsrMatrix`] view built once with
//! [`SparseMatrix::to_csr`].
//!
//! Every constructor rejects non-finite values, and sparse constructors never
//! store an explicit zero, so [`SparseMatrix::nnz`] is always the true count
//! of nonzero entries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default density above which a product is returned dense.
pub const DEFAULT_DENSITY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatrixError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate shape: {rows}x{cols} matrix has no entries")]
    DegenerateShape { rows: usize, cols: usize },
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("index {index} out of range for dimension {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid sparse structure: {0}")]
    InvalidStructure(String),
    #[error("sign entries must be +1 or -1, found {0}")]
    InvalidSign(i8),
}

pub type Result<T> = std::result::Result<T, MatrixError>;

fn shape_mismatch(what: &str, a: (usize, usize), b: (usize, usize)) -> MatrixError {
    MatrixError::ShapeMismatch(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

fn rate(nnz: usize, rows: usize, cols: usize) -> Result<f64> {
    let total = rows * cols;
    if total == 0 {
        return Err(MatrixError::DegenerateShape { rows, cols });
    }
    Ok(1.0 - nnz as f64 / total as f64)
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

/// Row-major dense matrix with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DenseRepr")]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct DenseRepr {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl TryFrom<DenseRepr> for DenseMatrix {
    type Error = MatrixError;

    fn try_from(r: DenseRepr) -> Result<Self> {
        DenseMatrix::from_vec(r.rows, r.cols, r.values)
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(MatrixError::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if let Some(p) = values.iter().position(|v| !v.is_finite()) {
            return Err(MatrixError::NonFinite {
                row: p / cols.max(1),
                col: p % cols.max(1),
            });
        }
        Ok(Self { rows, cols, values })
    }

    /// Builds from a slice of equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(MatrixError::ShapeMismatch("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(f(i, j));
            }
        }
        Self::from_vec(rows, cols, values)
    }

    /// Caller guarantees finiteness and length.
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), rows * cols);
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn nnz(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    pub fn sparsity_rate(&self) -> Result<f64> {
        rate(self.nnz(), self.rows, self.cols)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Vec::with_capacity(self.values.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                out.push(self.get(i, j));
            }
        }
        Self::from_vec_unchecked(self.cols, self.rows, out)
    }

    pub fn to_sparse(&self) -> SparseMatrix {
        SparseMatrix::from_dense(self)
    }
}

// ---------------------------------------------------------------------------
// Sparse vectors
// ---------------------------------------------------------------------------

/// A sparse real vector with strictly increasing indices and no stored zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    dim: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseVector {
    pub fn new(dim: usize, indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(MatrixError::InvalidStructure(
                "index and value lists differ in length".into(),
            ));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MatrixError::InvalidStructure(
                "indices must be strictly increasing".into(),
            ));
        }
        if let Some(&last) = indices.last() {
            if last >= dim {
                return Err(MatrixError::IndexOutOfRange { index: last, len: dim });
            }
        }
        for (&i, &v) in indices.iter().zip(&values) {
            if !v.is_finite() {
                return Err(MatrixError::NonFinite { row: i, col: 0 });
            }
            if v == 0.0 {
                return Err(MatrixError::InvalidStructure(format!(
                    "explicit zero stored at index {i}"
                )));
            }
        }
        Ok(Self { dim, indices, values })
    }

    pub fn from_dense(values: &[f64]) -> Self {
        let (indices, vals) = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .unzip();
        Self {
            dim: values.len(),
            indices,
            values: vals,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] = v;
        }
        out
    }
}

/// A real vector stored either densely or sparsely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RealVector {
    Dense(Vec<f64>),
    Sparse(SparseVector),
}

impl RealVector {
    /// Stores `values` sparsely when its density is below `threshold`.
    pub fn compact(values: Vec<f64>, threshold: f64) -> Self {
        let nnz = values.iter().filter(|v| **v != 0.0).count();
        if values.is_empty() || (nnz as f64) / (values.len() as f64) < threshold {
            RealVector::Sparse(SparseVector::from_dense(&values))
        } else {
            RealVector::Dense(values)
        }
    }

    pub fn len(&self) -> usize {
        match self {
            RealVector::Dense(v) => v.len(),
            RealVector::Sparse(s) => s.dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nnz(&self) -> usize {
        match self {
            RealVector::Dense(v) => v.iter().filter(|x| **x != 0.0).count(),
            RealVector::Sparse(s) => s.nnz(),
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.stored().map(|v| v * v).sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.stored().map(|v| v.abs()).sum()
    }

    fn stored(&self) -> std::slice::Iter<'_, f64> {
        match self {
            RealVector::Dense(v) => v.iter(),
            RealVector::Sparse(s) => s.values.iter(),
        }
    }

    pub fn get(&self, i: usize) -> f64 {
        match self {
            RealVector::Dense(v) => v[i],
            RealVector::Sparse(s) => s.indices.binary_search(&i).map_or(0.0, |p| s.values[p]),
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        match self {
            RealVector::Dense(v) => v.clone(),
            RealVector::Sparse(s) => s.to_dense(),
        }
    }
}

// ---------------------------------------------------------------------------
// Sparse matrices
// ---------------------------------------------------------------------------

/// Column-compressed sparse matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CscRepr")]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct CscRepr {
    rows: usize,
    cols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl TryFrom<CscRepr> for SparseMatrix {
    type Error = MatrixError;

    fn try_from(r: CscRepr) -> Result<Self> {
        SparseMatrix::from_csc(r.rows, r.cols, r.col_ptr, r.row_idx, r.values)
    }
}

/// Borrowed view of one stored column (or row, for [`CsrMatrix`]).
#[derive(Debug, Clone, Copy)]
pub struct Lane<'a> {
    pub indices: &'a [usize],
    pub values: &'a [f64],
}

impl<'a> Lane<'a> {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + 'a {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

impl SparseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            col_ptr: vec![0; cols + 1],
            row_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Validating constructor from raw CSC arrays.
    pub fn from_csc(
        rows: usize,
        cols: usize,
        col_ptr: Vec<usize>,
        row_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if col_ptr.len() != cols + 1 || col_ptr[0] != 0 {
            return Err(MatrixError::InvalidStructure("column pointer array malformed".into()));
        }
        if col_ptr.windows(2).any(|w| w[0] > w[1]) || col_ptr[cols] != row_idx.len() {
            return Err(MatrixError::InvalidStructure(
                "column pointers must be non-decreasing and end at nnz".into(),
            ));
        }
        if row_idx.len() != values.len() {
            return Err(MatrixError::InvalidStructure(
                "row index and value arrays differ in length".into(),
            ));
        }
        for j in 0..cols {
            let idx = &row_idx[col_ptr[j]..col_ptr[j + 1]];
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(MatrixError::InvalidStructure(format!(
                    "row indices of column {j} not strictly increasing"
                )));
            }
            for (p, &i) in idx.iter().enumerate() {
                if i >= rows {
                    return Err(MatrixError::IndexOutOfRange { index: i, len: rows });
                }
                let v = values[col_ptr[j] + p];
                if !v.is_finite() {
                    return Err(MatrixError::NonFinite { row: i, col: j });
                }
                if v == 0.0 {
                    return Err(MatrixError::InvalidStructure(format!(
                        "explicit zero stored at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            col_ptr,
            row_idx,
            values,
        })
    }

    /// Builds from `(row, col, value)` triplets. Duplicates are summed and
    /// zeros (given or produced by cancellation) are dropped.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted = triplets.to_vec();
        for &(i, j, v) in &sorted {
            if i >= rows {
                return Err(MatrixError::IndexOutOfRange { index: i, len: rows });
            }
            if j >= cols {
                return Err(MatrixError::IndexOutOfRange { index: j, len: cols });
            }
            if !v.is_finite() {
                return Err(MatrixError::NonFinite { row: i, col: j });
            }
        }
        sorted.sort_by_key(|&(i, j, _)| (j, i));
        let mut col_ptr = vec![0usize; cols + 1];
        let mut row_idx = Vec::with_capacity(sorted.len());
        let mut values = Vec::with_capacity(sorted.len());
        let mut k = 0;
        while k < sorted.len() {
            let (i, j, mut v) = sorted[k];
            k += 1;
            while k < sorted.len() && sorted[k].0 == i && sorted[k].1 == j {
                v += sorted[k].2;
                k += 1;
            }
            if v != 0.0 {
                row_idx.push(i);
                values.push(v);
                col_ptr[j + 1] += 1;
            }
        }
        for j in 0..cols {
            col_ptr[j + 1] += col_ptr[j];
        }
        Ok(Self {
            rows,
            cols,
            col_ptr,
            row_idx,
            values,
        })
    }

    pub fn from_dense(m: &DenseMatrix) -> Self {
        let mut col_ptr = Vec::with_capacity(m.cols + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for j in 0..m.cols {
            for i in 0..m.rows {
                let v = m.get(i, j);
                if v != 0.0 {
                    row_idx.push(i);
                    values.push(v);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Self {
            rows: m.rows,
            cols: m.cols,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// Stacks `columns` (each of length `rows`) side by side.
    pub fn from_columns(rows: usize, columns: &[RealVector]) -> Result<Self> {
        let mut col_ptr = Vec::with_capacity(columns.len() + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for (j, c) in columns.iter().enumerate() {
            if c.len() != rows {
                return Err(MatrixError::ShapeMismatch(format!(
                    "column {j} has length {} but matrix has {rows} rows",
                    c.len()
                )));
            }
            match c {
                RealVector::Dense(v) => {
                    for (i, &x) in v.iter().enumerate() {
                        if !x.is_finite() {
                            return Err(MatrixError::NonFinite { row: i, col: j });
                        }
                        if x != 0.0 {
                            row_idx.push(i);
                            values.push(x);
                        }
                    }
                }
                RealVector::Sparse(s) => {
                    row_idx.extend_from_slice(&s.indices);
                    values.extend_from_slice(&s.values);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Ok(Self {
            rows,
            cols: columns.len(),
            col_ptr,
            row_idx,
            values,
        })
    }

    pub(crate) fn from_csc_unchecked(
        rows: usize,
        cols: usize,
        col_ptr: Vec<usize>,
        row_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Self {
        debug_assert!(Self::from_csc(rows, cols, col_ptr.clone(), row_idx.clone(), values.clone()).is_ok());
        Self {
            rows,
            cols,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn sparsity_rate(&self) -> Result<f64> {
        rate(self.nnz(), self.rows, self.cols)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn column(&self, j: usize) -> Lane<'_> {
        let (lo, hi) = (self.col_ptr[j], self.col_ptr[j + 1]);
        Lane {
            indices: &self.row_idx[lo..hi],
            values: &self.values[lo..hi],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let col = self.column(j);
        col.indices.binary_search(&i).map_or(0.0, |p| col.values[p])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for j in 0..self.cols {
            for (i, v) in self.column(j).iter() {
                out.values[i * self.cols + j] = v;
            }
        }
        out
    }

    /// Row-compressed copy of the same matrix.
    pub fn to_csr(&self) -> CsrMatrix {
        let t = self.transpose();
        CsrMatrix {
            rows: self.rows,
            cols: self.cols,
            row_ptr: t.col_ptr,
            col_idx: t.row_idx,
            values: t.values,
        }
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.rows + 1];
        for &i in &self.row_idx {
            counts[i + 1] += 1;
        }
        for i in 0..self.rows {
            counts[i + 1] += counts[i];
        }
        let col_ptr = counts.clone();
        let mut next = counts;
        let mut row_idx = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for j in 0..self.cols {
            for (i, v) in self.column(j).iter() {
                let p = next[i];
                row_idx[p] = j;
                values[p] = v;
                next[i] += 1;
            }
        }
        SparseMatrix {
            rows: self.cols,
            cols: self.rows,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// Keeps the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<SparseMatrix> {
        let mut map = vec![usize::MAX; self.rows];
        for (new, &old) in rows.iter().enumerate() {
            if old >= self.rows {
                return Err(MatrixError::IndexOutOfRange {
                    index: old,
                    len: self.rows,
                });
            }
            if map[old] != usize::MAX {
                return Err(MatrixError::InvalidStructure(format!("row {old} selected twice")));
            }
            map[old] = new;
        }
        let mut col_ptr = Vec::with_capacity(self.cols + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        col_ptr.push(0);
        for j in 0..self.cols {
            scratch.clear();
            scratch.extend(
                self.column(j)
                    .iter()
                    .filter(|(i, _)| map[*i] != usize::MAX)
                    .map(|(i, v)| (map[i], v)),
            );
            scratch.sort_unstable_by_key(|e| e.0);
            for &(i, v) in &scratch {
                row_idx.push(i);
                values.push(v);
            }
            col_ptr.push(row_idx.len());
        }
        Ok(SparseMatrix {
            rows: rows.len(),
            cols: self.cols,
            col_ptr,
            row_idx,
            values,
        })
    }

    /// Squared Euclidean distance between column `i` and `c`, touching only
    /// the union of the two supports (plus a cached norm for dense `c`).
    pub fn column_sq_distance(&self, i: usize, c: &RealVector) -> Result<f64> {
        if i >= self.cols {
            return Err(MatrixError::IndexOutOfRange {
                index: i,
                len: self.cols,
            });
        }
        if c.len() != self.rows {
            return Err(MatrixError::ShapeMismatch(format!(
                "center length {} vs column length {}",
                c.len(),
                self.rows
            )));
        }
        Ok(lane_sq_distance(self.column(i), c, c.sq_norm()))
    }
}

/// Distance kernel shared with ESCK assignment; `c_sq_norm` must equal
/// `c.sq_norm()`.
pub(crate) fn lane_sq_distance(col: Lane<'_>, c: &RealVector, c_sq_norm: f64) -> f64 {
    match c {
        RealVector::Dense(cv) => {
            let mut acc = c_sq_norm;
            for (i, x) in col.iter() {
                let ci = cv[i];
                acc += (x - ci) * (x - ci) - ci * ci;
            }
            acc.max(0.0)
        }
        RealVector::Sparse(cs) => {
            let (ai, av) = (col.indices, col.values);
            let (bi, bv) = (&cs.indices, &cs.values);
            let (mut p, mut q, mut acc) = (0, 0, 0.0);
            while p < ai.len() && q < bi.len() {
                match ai[p].cmp(&bi[q]) {
                    std::cmp::Ordering::Less => {
                        acc += av[p] * av[p];
                        p += 1;
                    }
                    std::cmp::Ordering::Greater => {
                        acc += bv[q] * bv[q];
                        q += 1;
                    }
                    std::cmp::Ordering::Equal => {
                        let diff = av[p] - bv[q];
                        acc += diff * diff;
                        p += 1;
                        q += 1;
                    }
                }
            }
            acc += av[p..].iter().map(|v| v * v).sum::<f64>();
            acc += bv[q..].iter().map(|v| v * v).sum::<f64>();
            acc
        }
    }
}

/// Row-compressed sparse matrix, used as a row-access view.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> Lane<'_> {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        Lane {
            indices: &self.col_idx[lo..hi],
            values: &self.values[lo..hi],
        }
    }

    pub fn to_csc(&self) -> SparseMatrix {
        SparseMatrix {
            rows: self.cols,
            cols: self.rows,
            col_ptr: self.row_ptr.clone(),
            row_idx: self.col_idx.clone(),
            values: self.values.clone(),
        }
        .transpose()
    }

    /// Builds from per-row `(sorted column indices, values)`; zero values are
    /// dropped.
    pub fn from_rows(cols: usize, rows: Vec<(Vec<usize>, Vec<f64>)>) -> Result<Self> {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for (r, (idx, vals)) in rows.iter().enumerate() {
            if idx.len() != vals.len() {
                return Err(MatrixError::InvalidStructure(format!(
                    "row {r}: index and value lists differ in length"
                )));
            }
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(MatrixError::InvalidStructure(format!(
                    "row {r}: column indices not strictly increasing"
                )));
            }
            for (&j, &v) in idx.iter().zip(vals) {
                if j >= cols {
                    return Err(MatrixError::IndexOutOfRange { index: j, len: cols });
                }
                if !v.is_finite() {
                    return Err(MatrixError::NonFinite { row: r, col: j });
                }
                if v != 0.0 {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }
}

// ---------------------------------------------------------------------------
// Either layout
// ---------------------------------------------------------------------------

/// A matrix in whichever layout suits its density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Matrix {
    Dense(DenseMatrix),
    Sparse(SparseMatrix),
}

impl From<DenseMatrix> for Matrix {
    fn from(m: DenseMatrix) -> Self {
        Matrix::Dense(m)
    }
}

impl From<SparseMatrix> for Matrix {
    fn from(m: SparseMatrix) -> Self {
        Matrix::Sparse(m)
    }
}

impl Matrix {
    pub fn rows(&self) -> usize {
        match self {
            Matrix::Dense(m) => m.rows,
            Matrix::Sparse(m) => m.rows,
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            Matrix::Dense(m) => m.cols,
            Matrix::Sparse(m) => m.cols,
        }
    }

    pub fn nnz(&self) -> usize {
        match self {
            Matrix::Dense(m) => m.nnz(),
            Matrix::Sparse(m) => m.nnz(),
        }
    }

    pub fn sparsity_rate(&self) -> Result<f64> {
        rate(self.nnz(), self.rows(), self.cols())
    }

    pub fn frobenius_norm(&self) -> f64 {
        match self {
            Matrix::Dense(m) => m.frobenius_norm(),
            Matrix::Sparse(m) => m.frobenius_norm(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            Matrix::Dense(m) => m.get(i, j),
            Matrix::Sparse(m) => m.get(i, j),
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        match self {
            Matrix::Dense(m) => m.clone(),
            Matrix::Sparse(m) => m.to_dense(),
        }
    }

    pub fn to_sparse(&self) -> SparseMatrix {
        match self {
            Matrix::Dense(m) => SparseMatrix::from_dense(m),
            Matrix::Sparse(m) => m.clone(),
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self, Matrix::Sparse(_))
    }

    /// Re-packs into the layout `layout` asks for given the current density.
    pub fn with_layout(self, layout: OutputLayout) -> Matrix {
        let total = self.rows() * self.cols();
        let want_dense = match layout {
            OutputLayout::Dense => true,
            OutputLayout::Sparse => false,
            OutputLayout::Auto { threshold } => total > 0 && (self.nnz() as f64 / total as f64) >= threshold,
        };
        match (self, want_dense) {
            (Matrix::Sparse(m), true) => Matrix::Dense(m.to_dense()),
            (Matrix::Dense(m), false) => Matrix::Sparse(m.to_sparse()),
            (m, _) => m,
        }
    }
}

/// Result layout policy for [`multiply_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputLayout {
    /// Dense when result density is at least `threshold`, sparse otherwise.
    Auto {
        threshold: f64,
    },
    Dense,
    Sparse,
}

impl Default for OutputLayout {
    fn default() -> Self {
        OutputLayout::Auto {
            threshold: DEFAULT_DENSITY_THRESHOLD,
        }
    }
}

/// `a * b` with the default layout policy.
pub fn multiply(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    multiply_with(a, b, OutputLayout::default())
}

pub fn multiply_with(a: &Matrix, b: &Matrix, layout: OutputLayout) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(shape_mismatch("multiply", (a.rows(), a.cols()), (b.rows(), b.cols())));
    }
    let product = match (a, b) {
        (Matrix::Sparse(a), Matrix::Sparse(b)) => Matrix::Sparse(sparse_times_sparse(a, b)),
        (Matrix::Sparse(a), Matrix::Dense(b)) => Matrix::Dense(sparse_times_dense(a, b)),
        (Matrix::Dense(a), Matrix::Sparse(b)) => Matrix::Dense(dense_times_sparse(a, b)),
        (Matrix::Dense(a), Matrix::Dense(b)) => Matrix::Dense(dense_times_dense(a, b)),
    };
    Ok(product.with_layout(layout))
}

// Gustavson column-by-column product with a dense accumulator. Exact zeros
// left by cancellation are dropped.
fn sparse_times_sparse(a: &SparseMatrix, b: &SparseMatrix) -> SparseMatrix {
    let mut acc = vec![0.0; a.rows];
    let mut seen = vec![false; a.rows];
    let mut touched: Vec<usize> = Vec::new();
    let mut col_ptr = Vec::with_capacity(b.cols + 1);
    let mut row_idx = Vec::new();
    let mut values = Vec::new();
    col_ptr.push(0);
    for j in 0..b.cols {
        for (k, bkj) in b.column(j).iter() {
            for (i, aik) in a.column(k).iter() {
                if !seen[i] {
                    seen[i] = true;
                    touched.push(i);
                }
                acc[i] += aik * bkj;
            }
        }
        touched.sort_unstable();
        for &i in &touched {
            if acc[i] != 0.0 {
                row_idx.push(i);
                values.push(acc[i]);
            }
            acc[i] = 0.0;
            seen[i] = false;
        }
        touched.clear();
        col_ptr.push(row_idx.len());
    }
    SparseMatrix {
        rows: a.rows,
        cols: b.cols,
        col_ptr,
        row_idx,
        values,
    }
}

fn sparse_times_dense(a: &SparseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let p = b.cols;
    let mut out = vec![0.0; a.rows * p];
    for k in 0..a.cols {
        let brow = b.row(k);
        for (i, aik) in a.column(k).iter() {
            let orow = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    DenseMatrix::from_vec_unchecked(a.rows, p, out)
}

fn dense_times_sparse(a: &DenseMatrix, b: &SparseMatrix) -> DenseMatrix {
    let p = b.cols;
    let mut out = vec![0.0; a.rows * p];
    for j in 0..p {
        for (k, bkj) in b.column(j).iter() {
            for i in 0..a.rows {
                out[i * p + j] += a.get(i, k) * bkj;
            }
        }
    }
    DenseMatrix::from_vec_unchecked(a.rows, p, out)
}

fn dense_times_dense(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let p = b.cols;
    let mut out = vec![0.0; a.rows * p];
    for i in 0..a.rows {
        let orow = &mut out[i * p..(i + 1) * p];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(b.row(k)) {
                *o += aik * bv;
            }
        }
    }
    DenseMatrix::from_vec_unchecked(a.rows, p, out)
}

// ---------------------------------------------------------------------------
// Sign diagonal
// ---------------------------------------------------------------------------

/// Diagonal matrix with entries in {+1, -1}.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<i8>", into = "Vec<i8>")]
pub struct SignDiagonal {
    signs: Vec<i8>,
}

impl TryFrom<Vec<i8>> for SignDiagonal {
    type Error = MatrixError;

    fn try_from(signs: Vec<i8>) -> Result<Self> {
        SignDiagonal::new(signs)
    }
}

impl From<SignDiagonal> for Vec<i8> {
    fn from(d: SignDiagonal) -> Self {
        d.signs
    }
}

impl SignDiagonal {
    pub fn new(signs: Vec<i8>) -> Result<Self> {
        if let Some(&bad) = signs.iter().find(|s| **s != 1 && **s != -1) {
            return Err(MatrixError::InvalidSign(bad));
        }
        Ok(Self { signs })
    }

    pub fn ones(dim: usize) -> Self {
        Self { signs: vec![1; dim] }
    }

    /// Each sign independently +1 or -1 with probability 1/2.
    pub fn random<R: rand::Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            signs: (0..dim).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.signs.len()
    }

    pub fn sign(&self, j: usize) -> f64 {
        f64::from(self.signs[j])
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.signs
    }

    /// The diagonal as an explicit sparse `dim x dim` matrix.
    pub fn to_matrix(&self) -> SparseMatrix {
        let n = self.dim();
        SparseMatrix {
            rows: n,
            cols: n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: self.signs.iter().map(|&s| f64::from(s)).collect(),
        }
    }
}

/// `X D`: column `j` of `x` multiplied by `d[j]`. Preserves layout and nnz.
pub fn scale_columns_by_signs(x: &Matrix, d: &SignDiagonal) -> Result<Matrix> {
    if x.cols() != d.dim() {
        return Err(shape_mismatch(
            "scale_columns_by_signs",
            (x.rows(), x.cols()),
            (d.dim(), d.dim()),
        ));
    }
    Ok(match x {
        Matrix::Sparse(m) => Matrix::Sparse(scale_sparse_columns(m, d)),
        Matrix::Dense(m) => {
            let mut values = m.values.clone();
            for row in values.chunks_mut(m.cols.max(1)) {
                for (v, &s) in row.iter_mut().zip(&d.signs) {
                    if s < 0 {
                        *v = -*v;
                    }
                }
            }
            Matrix::Dense(DenseMatrix::from_vec_unchecked(m.rows, m.cols, values))
        }
    })
}

pub(crate) fn scale_sparse_columns(m: &SparseMatrix, d: &SignDiagonal) -> SparseMatrix {
    let mut out = m.clone();
    for j in 0..m.cols {
        if d.signs[j] < 0 {
            for v in &mut out.values[m.col_ptr[j]..m.col_ptr[j + 1]] {
                *v = -*v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sparse(rng: &mut ChaCha8Rng, rows: usize, cols: usize, density: f64) -> SparseMatrix {
        let mut trips = Vec::new();
        for i in 0..rows {
            for j in 0..cols {
                if rng.random::<f64>() < density {
                    trips.push((i, j, rng.random_range(-2.0..2.0)));
                }
            }
        }
        SparseMatrix::from_triplets(rows, cols, &trips).unwrap()
    }

    #[test]
    fn nnz_identity_and_zero() {
        assert_eq!(DenseMatrix::identity(3).nnz(), 3);
        assert_eq!(SparseMatrix::zeros(5, 4).nnz(), 0);
    }

    #[test]
    fn nnz_counts_distinct_triplets() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cells = std::collections::BTreeSet::new();
        while cells.len() < 17 {
            cells.insert((rng.random_range(0..10), rng.random_range(0..10)));
        }
        let trips: Vec<_> = cells.iter().map(|&(i, j)| (i, j, rng.random_range(0.5..3.0))).collect();
        assert_eq!(SparseMatrix::from_triplets(10, 10, &trips).unwrap().nnz(), 17);
    }

    #[test]
    fn sparsity_rate_examples() {
        let id = DenseMatrix::identity(3);
        assert!((id.sparsity_rate().unwrap() - 6.0 / 9.0).abs() < 1e-15);
        let full = DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(full.sparsity_rate().unwrap(), 0.0);
        let empty = SparseMatrix::zeros(0, 4);
        let err = empty.sparsity_rate().unwrap_err();
        assert!(err.to_string().contains("degenerate shape"));
    }

    #[test]
    fn frobenius_examples() {
        let m = DenseMatrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.frobenius_norm(), 5.0);
        assert_eq!(SparseMatrix::zeros(3, 3).frobenius_norm(), 0.0);
    }

    #[test]
    fn frobenius_matches_trace_formulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = DenseMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        // trace(A^T A) by explicit product
        let ata = multiply(&Matrix::Dense(a.transpose()), &Matrix::Dense(a.clone()))
            .unwrap()
            .to_dense();
        let trace: f64 = (0..6).map(|i| ata.get(i, i)).sum();
        let f = a.frobenius_norm();
        assert!((f - trace.sqrt()).abs() / f <= 1e-12);
    }

    #[test]
    fn constructors_reject_bad_input() {
        assert!(matches!(
            DenseMatrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(MatrixError::NonFinite { .. })
        ));
        assert!(SparseMatrix::from_csc(2, 1, vec![0, 2], vec![1, 0], vec![1.0, 1.0]).is_err());
        assert!(SparseMatrix::from_csc(2, 1, vec![0, 1], vec![0], vec![0.0]).is_err());
        assert!(SignDiagonal::new(vec![1, 0]).is_err());
    }

    #[test]
    fn triplets_sum_duplicates_and_drop_cancellation() {
        let m = SparseMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 0, -1.0), (1, 1, 2.0), (1, 1, 0.5)]).unwrap();
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.get(1, 1), 2.5);
    }

    #[test]
    fn multiply_by_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::Sparse(random_sparse(&mut rng, 4, 5, 0.4));
        let id = Matrix::Sparse(SparseMatrix::identity(5));
        let p = multiply(&a, &id).unwrap();
        assert_eq!(p.to_dense(), a.to_dense());
        let z = Matrix::Sparse(SparseMatrix::zeros(5, 3));
        let p = multiply(&a, &z).unwrap();
        assert_eq!(p.nnz(), 0);
        assert!(p.is_sparse());
    }

    #[test]
    fn multiply_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = random_sparse(&mut rng, 4, 5, 0.5);
            let b = DenseMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0)).unwrap();
            let got = multiply(&Matrix::Sparse(a.clone()), &Matrix::Dense(b.clone()))
                .unwrap()
                .to_dense();
            let ad = a.to_dense();
            for i in 0..4 {
                for j in 0..3 {
                    let want: f64 = (0..5).map(|k| ad.get(i, k) * b.get(k, j)).sum();
                    assert!((got.get(i, j) - want).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn multiply_all_layout_pairs_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_sparse(&mut rng, 6, 7, 0.3);
        let b = random_sparse(&mut rng, 7, 4, 0.3);
        let reference = multiply(&Matrix::Dense(a.to_dense()), &Matrix::Dense(b.to_dense()))
            .unwrap()
            .to_dense();
        for (x, y) in [
            (Matrix::Sparse(a.clone()), Matrix::Sparse(b.clone())),
            (Matrix::Sparse(a.clone()), Matrix::Dense(b.to_dense())),
            (Matrix::Dense(a.to_dense()), Matrix::Sparse(b.clone())),
        ] {
            let got = multiply(&x, &y).unwrap().to_dense();
            for (g, w) in got.as_slice().iter().zip(reference.as_slice()) {
                assert!((g - w).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn multiply_shape_mismatch() {
        let a = Matrix::Sparse(SparseMatrix::zeros(2, 3));
        let b = Matrix::Sparse(SparseMatrix::zeros(2, 3));
        assert!(matches!(multiply(&a, &b), Err(MatrixError::ShapeMismatch(_))));
    }

    #[test]
    fn layout_policy() {
        let dense_result = multiply(
            &Matrix::Dense(DenseMatrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap()),
            &Matrix::Dense(DenseMatrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap()),
        )
        .unwrap();
        assert!(!dense_result.is_sparse());
        let forced = multiply_with(
            &Matrix::Sparse(SparseMatrix::identity(3)),
            &Matrix::Sparse(SparseMatrix::identity(3)),
            OutputLayout::Dense,
        )
        .unwrap();
        assert!(!forced.is_sparse());
    }

    #[test]
    fn sign_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::Sparse(random_sparse(&mut rng, 5, 6, 0.5));
        let plus = SignDiagonal::ones(6);
        assert_eq!(scale_columns_by_signs(&x, &plus).unwrap(), x);
        let minus = SignDiagonal::new(vec![-1; 6]).unwrap();
        let neg = scale_columns_by_signs(&x, &minus).unwrap();
        for i in 0..5 {
            for j in 0..6 {
                assert_eq!(neg.get(i, j), -x.get(i, j));
            }
        }
        let d = SignDiagonal::random(6, &mut rng);
        let xd = scale_columns_by_signs(&x, &d).unwrap();
        assert_eq!(xd.nnz(), x.nnz());
        assert_eq!(scale_columns_by_signs(&xd, &d).unwrap(), x);
        let dense = Matrix::Dense(x.to_dense());
        let back = scale_columns_by_signs(&scale_columns_by_signs(&dense, &d).unwrap(), &d).unwrap();
        assert_eq!(back, dense);
        assert!(scale_columns_by_signs(&x, &SignDiagonal::ones(5)).is_err());
    }

    #[test]
    fn column_distance_examples() {
        let m = SparseMatrix::from_triplets(3, 2, &[(0, 0, 1.0), (2, 0, 2.0)]).unwrap();
        let same = RealVector::Dense(vec![1.0, 0.0, 2.0]);
        assert_eq!(m.column_sq_distance(0, &same).unwrap(), 0.0);
        let c = RealVector::Dense(vec![0.0, 3.0, 0.0]);
        assert_eq!(m.column_sq_distance(1, &c).unwrap(), 9.0);
        assert!(m.column_sq_distance(2, &c).is_err());
        assert!(m.column_sq_distance(0, &RealVector::Dense(vec![0.0; 2])).is_err());
    }

    #[test]
    fn column_distance_matches_dense_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let m = random_sparse(&mut rng, 12, 4, 0.3);
            let c: Vec<f64> = (0..12)
                .map(|_| {
                    if rng.random::<f64>() < 0.4 {
                        rng.random_range(-1.0..1.0)
                    } else {
                        0.0
                    }
                })
                .collect();
            for j in 0..4 {
                let col = m.to_dense().column(j);
                let want: f64 = col.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
                let dense = m.column_sq_distance(j, &RealVector::Dense(c.clone())).unwrap();
                let sparse = m
                    .column_sq_distance(j, &RealVector::Sparse(SparseVector::from_dense(&c)))
                    .unwrap();
                assert!((dense - want).abs() <= 1e-12);
                assert!((sparse - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn csr_round_trip_and_row_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_sparse(&mut rng, 7, 5, 0.4);
        let csr = m.to_csr();
        assert_eq!(csr.to_csc(), m);
        for i in 0..7 {
            for (j, v) in csr.row(i).iter() {
                assert_eq!(m.get(i, j), v);
            }
        }
        let sel = m.select_rows(&[5, 1]).unwrap();
        for j in 0..5 {
            assert_eq!(sel.get(0, j), m.get(5, j));
            assert_eq!(sel.get(1, j), m.get(1, j));
        }
        assert!(m.select_rows(&[1, 1]).is_err());
    }

    #[test]
    fn serde_validates() {
        let m = SparseMatrix::identity(3);
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<SparseMatrix>(&s).unwrap(), m);
        let bad = s.replace("1.0", "0.0");
        assert!(serde_json::from_str::<SparseMatrix>(&bad).is_err());
        let d = SignDiagonal::new(vec![1, -1]).unwrap();
        assert_eq!(serde_json::to_string(&d).unwrap(), "[1,-1]");
        assert!(serde_json::from_str::<SignDiagonal>("[1,2]").is_err());
    }
}
