//! Dense row-major matrices and the handful of kernels the forward and
//! backward passes need.
//!
//! Two storage flavours exist. [`Matrix`] is ordinary owned storage used for
//! activations, gradients and datasets. [`AtomicMatrix`] backs model weights:
//! every scalar lives in an `AtomicU64` so that concurrent Hogwild writers can
//! race on the same matrix without ever producing a torn `f64`. Relaxed loads
//! and stores compile to plain moves on the usual targets, so the single
//! threaded cost is the same as a `Vec<f64>`.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinalgError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("buffer of length {len} cannot hold a {rows}x{cols} matrix")]
    BadLength { rows: usize, cols: usize, len: usize },
}

/// Read access to a row-major matrix, regardless of how it is stored.
pub trait MatrixSource: Sync {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    /// Element at flat row-major index `idx`.
    fn load(&self, idx: usize) -> f64;

    fn shape(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    fn at(&self, row: usize, col: usize) -> f64 {
        self.load(row * self.cols() + col)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn view(&self) -> MatrixView<'_> {
        MatrixView {
            rows: self.rows,
            cols: self.cols,
            data: &self.data,
        }
    }

    /// Contiguous run of `len` rows starting at `start`, without copying.
    pub fn row_range(&self, start: usize, len: usize) -> MatrixView<'_> {
        assert!(start + len <= self.rows, "row range out of bounds");
        MatrixView {
            rows: len,
            cols: self.cols,
            data: &self.data[start * self.cols..(start + len) * self.cols],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl MatrixSource for Matrix {
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.cols
    }
    #[inline]
    fn load(&self, idx: usize) -> f64 {
        self.data[idx]
    }
}

/// Borrowed row-major matrix, typically a range of dataset rows.
#[derive(Debug, Clone, Copy)]
pub struct MatrixView<'a> {
    rows: usize,
    cols: usize,
    data: &'a [f64],
}

impl<'a> MatrixView<'a> {
    pub fn new(rows: usize, cols: usize, data: &'a [f64]) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(MatrixView { rows, cols, data })
    }

    pub fn as_slice(&self) -> &'a [f64] {
        self.data
    }

    pub fn row_range(&self, start: usize, len: usize) -> MatrixView<'a> {
        assert!(start + len <= self.rows, "row range out of bounds");
        MatrixView {
            rows: len,
            cols: self.cols,
            data: &self.data[start * self.cols..(start + len) * self.cols],
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.to_vec(),
        }
    }
}

impl MatrixSource for MatrixView<'_> {
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.cols
    }
    #[inline]
    fn load(&self, idx: usize) -> f64 {
        self.data[idx]
    }
}

/// Matrix whose scalars can be read and written concurrently.
///
/// Each scalar store is a single word-sized atomic store, so readers see
/// either the old or the new value of every element and never a mix of bits.
/// No ordering is promised between different elements.
#[derive(Debug)]
pub struct AtomicMatrix {
    rows: usize,
    cols: usize,
    data: Box<[AtomicU64]>,
}

impl AtomicMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let data = (0..rows * cols).map(|_| AtomicU64::new(0f64.to_bits())).collect();
        AtomicMatrix { rows, cols, data }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        let data = m.data.iter().map(|v| AtomicU64::new(v.to_bits())).collect();
        AtomicMatrix {
            rows: m.rows,
            cols: m.cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.load(row * self.cols + col)
    }

    #[inline]
    pub fn set(&self, row: usize, col: usize, value: f64) {
        self.store(row * self.cols + col, value)
    }

    #[inline]
    pub fn store(&self, idx: usize, value: f64) {
        self.data[idx].store(value.to_bits(), Ordering::Relaxed);
    }

    /// Element-by-element snapshot. Under concurrent writers the result may
    /// mix update generations, but every scalar is one that was stored.
    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|a| f64::from_bits(a.load(Ordering::Relaxed)))
                .collect(),
        }
    }

    /// `self += scale * source` with one indivisible store per scalar.
    ///
    /// Concurrent callers may lose each other's increments on the same
    /// scalar (read-modify-write is not atomic as a whole); that is the
    /// Hogwild contract.
    pub fn axpy(&self, source: &Matrix, scale: f64) -> Result<(), LinalgError> {
        if self.shape() != source.shape() {
            return Err(LinalgError::ShapeMismatch {
                op: "axpy",
                left: self.shape(),
                right: source.shape(),
            });
        }
        for (cell, s) in self.data.iter().zip(&source.data) {
            let cur = f64::from_bits(cell.load(Ordering::Relaxed));
            cell.store((cur + scale * s).to_bits(), Ordering::Relaxed);
        }
        Ok(())
    }
}

impl Clone for AtomicMatrix {
    fn clone(&self) -> Self {
        AtomicMatrix::from_matrix(&self.to_matrix())
    }
}

impl MatrixSource for AtomicMatrix {
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.cols
    }
    #[inline]
    fn load(&self, idx: usize) -> f64 {
        f64::from_bits(self.data[idx].load(Ordering::Relaxed))
    }
}

/// `op(a) * op(b)` where `op` optionally transposes.
///
/// Every output element is accumulated from `0.0` over the inner index in
/// ascending order, whichever loop nest is used, so results are bit-for-bit
/// reproducible for identical inputs.
pub fn gemm<A, B>(a: &A, b: &B, transpose_a: bool, transpose_b: bool) -> Result<Matrix, LinalgError>
where
    A: MatrixSource + ?Sized,
    B: MatrixSource + ?Sized,
{
    let (m, k) = if transpose_a {
        (a.cols(), a.rows())
    } else {
        (a.rows(), a.cols())
    };
    let (k2, n) = if transpose_b {
        (b.cols(), b.rows())
    } else {
        (b.rows(), b.cols())
    };
    if k != k2 {
        return Err(LinalgError::ShapeMismatch {
            op: "gemm",
            left: (m, k),
            right: (k2, n),
        });
    }
    let a_cols = a.cols();
    let b_cols = b.cols();
    let mut out = vec![0.0; m * n];

    match (transpose_a, transpose_b) {
        (false, false) => {
            for i in 0..m {
                let out_row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a.load(i * a_cols + p);
                    let b_base = p * b_cols;
                    for (j, o) in out_row.iter_mut().enumerate() {
                        *o += av * b.load(b_base + j);
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let a_base = i * a_cols;
                for j in 0..n {
                    let b_base = j * b_cols;
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a.load(a_base + p) * b.load(b_base + p);
                    }
                    out[i * n + j] = acc;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let a_base = p * a_cols;
                let b_base = p * b_cols;
                for i in 0..m {
                    let av = a.load(a_base + i);
                    let out_row = &mut out[i * n..(i + 1) * n];
                    for (j, o) in out_row.iter_mut().enumerate() {
                        *o += av * b.load(b_base + j);
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a.load(p * a_cols + i) * b.load(j * b_cols + p);
                    }
                    out[i * n + j] = acc;
                }
            }
        }
    }
    Ok(Matrix {
        rows: m,
        cols: n,
        data: out,
    })
}

#[inline]
fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn sigmoid<M: MatrixSource + ?Sized>(m: &M) -> Matrix {
    let (rows, cols) = m.shape();
    let data = (0..rows * cols).map(|i| sigmoid_scalar(m.load(i))).collect();
    Matrix { rows, cols, data }
}

pub fn sigmoid_in_place(m: &mut Matrix) {
    for v in &mut m.data {
        *v = sigmoid_scalar(*v);
    }
}

/// `s * (1 - s)` for `s` already passed through the sigmoid.
pub fn sigmoid_deriv_from_output(s: &Matrix) -> Matrix {
    Matrix {
        rows: s.rows,
        cols: s.cols,
        data: s.data.iter().map(|v| v * (1.0 - v)).collect(),
    }
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax_rows<M: MatrixSource + ?Sized>(m: &M) -> Matrix {
    let (rows, cols) = m.shape();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let base = r * cols;
        let row_max = (0..cols)
            .map(|c| m.load(base + c))
            .fold(f64::NEG_INFINITY, f64::max);
        let out_row = &mut out.data[base..base + cols];
        let mut sum = 0.0;
        for (c, o) in out_row.iter_mut().enumerate() {
            *o = (m.load(base + c) - row_max).exp();
            sum += *o;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// `target += scale * source`.
pub fn axpy_in_place(target: &mut Matrix, source: &Matrix, scale: f64) -> Result<(), LinalgError> {
    if target.shape() != source.shape() {
        return Err(LinalgError::ShapeMismatch {
            op: "axpy",
            left: target.shape(),
            right: source.shape(),
        });
    }
    for (t, s) in target.data.iter_mut().zip(&source.data) {
        *t += scale * s;
    }
    Ok(())
}

/// `target *= other` element-wise.
pub fn hadamard_in_place(target: &mut Matrix, other: &Matrix) -> Result<(), LinalgError> {
    if target.shape() != other.shape() {
        return Err(LinalgError::ShapeMismatch {
            op: "hadamard",
            left: target.shape(),
            right: other.shape(),
        });
    }
    for (t, o) in target.data.iter_mut().zip(&other.data) {
        *t *= o;
    }
    Ok(())
}
