//! Dense weight tensors, their 2-D GEMM view, and dense / compacted matrix
//! products.
//!
//! Convolution weights are stored as 4-D `(filters, channels, kh, kw)` arrays,
//! row-major. The GEMM view flattens each filter to one row, so filter-wise
//! sparsity is row sparsity and channel/shape sparsity is column sparsity of
//! the same memory. Column order within a row is channel-major
//! (`c * kh * kw + i * kw + j`).

use crate::error::{Error, Result};

/// 4-D convolution weight tensor `(F, C, KH, KW)`, row-major `f32`.
///
/// ```
/// use prunenet::tensor::WeightTensor;
///
/// let w = WeightTensor::new((2, 1, 1, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
/// let m = w.to_gemm();
/// assert_eq!((m.rows(), m.cols()), (2, 2));
/// assert_eq!(m.row(1), &[3.0, 4.0]); // row = flattened filter
/// assert_eq!(WeightTensor::from_gemm(&m, w.shape()).unwrap(), w);
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    data: Vec<f32>,
    filters: usize,
    channels: usize,
    kernel_h: usize,
    kernel_w: usize,
}

impl WeightTensor {
    pub fn new(shape: (usize, usize, usize, usize), data: Vec<f32>) -> Result<Self> {
        let (f, c, kh, kw) = shape;
        if f == 0 || c == 0 || kh == 0 || kw == 0 {
            return Err(Error::ShapeMismatch {
                context: "WeightTensor::new",
                expected: "all dimensions >= 1".into(),
                actual: format!("({f}, {c}, {kh}, {kw})"),
            });
        }
        if data.len() != f * c * kh * kw {
            return Err(Error::ShapeMismatch {
                context: "WeightTensor::new",
                expected: format!("{} elements", f * c * kh * kw),
                actual: format!("{} elements", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "WeightTensor::new: data contains NaN/Inf".into(),
            });
        }
        Ok(Self {
            data,
            filters: f,
            channels: c,
            kernel_h: kh,
            kernel_w: kw,
        })
    }

    pub fn zeros(shape: (usize, usize, usize, usize)) -> Result<Self> {
        let (f, c, kh, kw) = shape;
        Self::new(shape, vec![0.0; f * c * kh * kw])
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.filters, self.channels, self.kernel_h, self.kernel_w)
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kernel_h(&self) -> usize {
        self.kernel_h
    }

    pub fn kernel_w(&self) -> usize {
        self.kernel_w
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    pub fn at(&self, f: usize, c: usize, i: usize, j: usize) -> f32 {
        debug_assert!(f < self.filters && c < self.channels && i < self.kernel_h && j < self.kernel_w);
        self.data[((f * self.channels + c) * self.kernel_h + i) * self.kernel_w + j]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// GEMM view: row `r` is the flattened filter `r`; element
    /// `(r, c*KH*KW + i*KW + j)` equals `self[r, c, i, j]`. Because the 4-D
    /// layout is row-major over `(F, C, KH, KW)`, this is a straight copy.
    pub fn to_gemm(&self) -> GemmMatrix {
        GemmMatrix {
            data: self.data.clone(),
            rows: self.filters,
            cols: self.channels * self.kernel_h * self.kernel_w,
        }
    }

    /// Inverse of [`to_gemm`](Self::to_gemm). Requires `m.rows == F` and a
    /// matching element count.
    pub fn from_gemm(m: &GemmMatrix, shape: (usize, usize, usize, usize)) -> Result<Self> {
        let (f, c, kh, kw) = shape;
        if m.rows != f || m.rows * m.cols != f * c * kh * kw {
            return Err(Error::ShapeMismatch {
                context: "WeightTensor::from_gemm",
                expected: format!("{f}x{} matrix for shape ({f}, {c}, {kh}, {kw})", c * kh * kw),
                actual: format!("{}x{} matrix", m.rows, m.cols),
            });
        }
        Self::new(shape, m.data.clone())
    }
}

/// Row-major 2-D matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct GemmMatrix {
    data: Vec<f32>,
    rows: usize,
    cols: usize,
}

impl GemmMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: "GemmMatrix::new",
                expected: format!("{} elements for {rows}x{cols}", rows * cols),
                actual: format!("{} elements", data.len()),
            });
        }
        Ok(Self { data, rows, cols })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::ShapeMismatch {
                context: "GemmMatrix::from_rows",
                expected: format!("all rows of length {c}"),
                actual: "ragged rows".into(),
            });
        }
        Ok(Self {
            data: rows.concat(),
            rows: r,
            cols: c,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &GemmMatrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn transpose(&self) -> GemmMatrix {
        let mut out = GemmMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Frobenius norm, accumulated in f64.
    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &GemmMatrix) -> Result<GemmMatrix> {
        self.zip_with(other, "GemmMatrix::add", |a, b| a + b)
    }

    /// Elementwise difference; shapes must match.
    pub fn sub(&self, other: &GemmMatrix) -> Result<GemmMatrix> {
        self.zip_with(other, "GemmMatrix::sub", |a, b| a - b)
    }

    fn zip_with(
        &self,
        other: &GemmMatrix,
        context: &'static str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<GemmMatrix> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch {
                context,
                expected: format!("{}x{}", self.rows, self.cols),
                actual: format!("{}x{}", other.rows, other.cols),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(GemmMatrix {
            data,
            rows: self.rows,
            cols: self.cols,
        })
    }

    /// Standard matrix product. Each output element accumulates over `k` in
    /// ascending order, so the result is bit-identical to a naive
    /// row-by-column triple loop.
    pub fn matmul(&self, other: &GemmMatrix) -> Result<GemmMatrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                context: "GemmMatrix::matmul",
                expected: format!("rhs with {} rows", self.cols),
                actual: format!("{}x{}", other.rows, other.cols),
            });
        }
        let mut out = GemmMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    // Skipping exact-zero terms leaves every partial sum
                    // unchanged (x + 0.0*b adds nothing) and speeds up the
                    // masked matrices this crate spends its time on.
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        if !out.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "GemmMatrix::matmul: product overflowed".into(),
            });
        }
        Ok(out)
    }
}

/// A matrix with pruned rows/columns physically removed. The dense block is
/// fully populated; `row_index` / `col_index` record where each retained row
/// and column came from.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactedMatrix {
    dense: GemmMatrix,
    row_index: Vec<usize>,
    col_index: Vec<usize>,
    orig_rows: usize,
    orig_cols: usize,
}

/// Extract the retained rows/columns of `m` into a dense block. Every
/// discarded entry of `m` must be exactly zero; a nonzero discard is an error
/// rather than silent loss.
pub fn compact(m: &GemmMatrix, keep_rows: &[usize], keep_cols: &[usize]) -> Result<CompactedMatrix> {
    validate_index_list(keep_rows, m.rows(), "compact keep_rows")?;
    validate_index_list(keep_cols, m.cols(), "compact keep_cols")?;

    let row_set: Vec<bool> = membership(keep_rows, m.rows());
    let col_set: Vec<bool> = membership(keep_cols, m.cols());
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            let v = m.at(r, c);
            if v != 0.0 && (!row_set[r] || !col_set[c]) {
                return Err(Error::NonzeroDiscard { row: r, col: c, value: v });
            }
        }
    }

    let mut dense = GemmMatrix::zeros(keep_rows.len(), keep_cols.len());
    for (di, &r) in keep_rows.iter().enumerate() {
        for (dj, &c) in keep_cols.iter().enumerate() {
            dense.set(di, dj, m.at(r, c));
        }
    }
    Ok(CompactedMatrix {
        dense,
        row_index: keep_rows.to_vec(),
        col_index: keep_cols.to_vec(),
        orig_rows: m.rows(),
        orig_cols: m.cols(),
    })
}

fn validate_index_list(idx: &[usize], bound: usize, context: &'static str) -> Result<()> {
    for (i, &v) in idx.iter().enumerate() {
        if v >= bound {
            return Err(Error::IndexOutOfBounds {
                context,
                index: v,
                bound,
            });
        }
        if i > 0 && idx[i - 1] >= v {
            return Err(Error::IndexOrder { context });
        }
    }
    Ok(())
}

fn membership(idx: &[usize], bound: usize) -> Vec<bool> {
    let mut m = vec![false; bound];
    for &i in idx {
        m[i] = true;
    }
    m
}

impl CompactedMatrix {
    pub fn dense(&self) -> &GemmMatrix {
        &self.dense
    }

    pub fn row_index(&self) -> &[usize] {
        &self.row_index
    }

    pub fn col_index(&self) -> &[usize] {
        &self.col_index
    }

    pub fn orig_shape(&self) -> (usize, usize) {
        (self.orig_rows, self.orig_cols)
    }

    /// Scatter the dense block back into a zero-filled matrix of the original
    /// shape.
    pub fn expand(&self) -> GemmMatrix {
        let mut out = GemmMatrix::zeros(self.orig_rows, self.orig_cols);
        for (di, &r) in self.row_index.iter().enumerate() {
            for (dj, &c) in self.col_index.iter().enumerate() {
                out.set(r, c, self.dense.at(di, dj));
            }
        }
        out
    }

    /// Multiply against a full-height operand by gathering only the rows of
    /// `b` this block retained. Result rows correspond to `row_index`.
    pub fn matmul_compacted(&self, b: &GemmMatrix) -> Result<GemmMatrix> {
        if b.rows() != self.orig_cols {
            return Err(Error::ShapeMismatch {
                context: "CompactedMatrix::matmul_compacted",
                expected: format!("rhs with {} rows", self.orig_cols),
                actual: format!("{}x{}", b.rows(), b.cols()),
            });
        }
        let mut gathered = GemmMatrix::zeros(self.col_index.len(), b.cols());
        for (gi, &src) in self.col_index.iter().enumerate() {
            gathered.data[gi * b.cols()..(gi + 1) * b.cols()]
                .copy_from_slice(&b.data[src * b.cols()..(src + 1) * b.cols()]);
        }
        self.dense.matmul(&gathered)
    }

    /// Compacted product followed by zero-padded re-expansion of the result
    /// rows, yielding a matrix directly comparable to `original.matmul(b)`.
    pub fn matmul_expanded(&self, b: &GemmMatrix) -> Result<GemmMatrix> {
        let compacted = self.matmul_compacted(b)?;
        let mut out = GemmMatrix::zeros(self.orig_rows, b.cols());
        for (di, &r) in self.row_index.iter().enumerate() {
            out.data[r * b.cols()..(r + 1) * b.cols()]
                .copy_from_slice(&compacted.data[di * b.cols()..(di + 1) * b.cols()]);
        }
        Ok(out)
    }
}
