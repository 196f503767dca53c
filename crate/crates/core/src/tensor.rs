//! Dense row-major matrices and the handful of products the encoder needs.
//!
//! Every product is computed one output row at a time with a fixed
//! accumulation order (bias first, then the inner dimension ascending), so a
//! row's result never depends on which other rows share the matrix or on how
//! many rayon workers are running. Bitwise reproducibility of the encoder
//! rests on this.

use std::fmt::{self, Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Result, SegtError};

/// Floating-point precision of a model or a file payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Scalar type the numeric kernels are generic over (`f32` or `f64`).
pub trait Real: Float + Sum + Default + Debug + Display + Send + Sync + 'static {
    const PRECISION: Precision;
    const BYTES: usize;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// `bytes` must hold exactly `Self::BYTES` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;
    const BYTES: usize = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;
    const BYTES: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Debug> Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Matrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish_non_exhaustive()
    }
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SegtError::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
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

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    /// First (row, col) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        let cols = self.cols.max(1);
        self.data
            .iter()
            .position(|x| !x.is_finite())
            .map(|i| (i / cols, i % cols))
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some((row, col)) => Err(SegtError::NonFinite { row, col }),
            None => Ok(()),
        }
    }

    pub(crate) fn par_rows_mut(&mut self) -> rayon::slice::ChunksMut<'_, T> {
        self.data.par_chunks_mut(self.cols.max(1))
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> T {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// `a · w + bias`, with `bias` broadcast across rows.
pub fn linear<T: Real>(a: &Matrix<T>, w: &Matrix<T>, bias: &[T]) -> Matrix<T> {
    assert_eq!(a.cols, w.rows, "linear: inner dimensions differ");
    assert_eq!(w.cols, bias.len(), "linear: bias length");
    let mut out = Matrix::zeros(a.rows, w.cols);
    out.par_rows_mut().enumerate().for_each(|(r, dst)| {
        dst.copy_from_slice(bias);
        for (k, &x) in a.row(r).iter().enumerate() {
            for (d, &wk) in dst.iter_mut().zip(w.row(k)) {
                *d = *d + x * wk;
            }
        }
    });
    out
}

/// `a · b`.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let zero = vec![T::zero(); b.cols];
    linear(a, b, &zero)
}

/// `a · bᵀ`.
pub fn matmul_nt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.cols, b.cols, "matmul_nt: inner dimensions differ");
    let mut out = Matrix::zeros(a.rows, b.rows);
    out.par_rows_mut().enumerate().for_each(|(r, dst)| {
        let ar = a.row(r);
        for (j, d) in dst.iter_mut().enumerate() {
            *d = dot(ar, b.row(j));
        }
    });
    out
}

/// `aᵀ · b`, used for weight gradients.
pub fn matmul_tn<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.rows, b.rows, "matmul_tn: inner dimensions differ");
    let mut out = Matrix::zeros(a.cols, b.cols);
    out.par_rows_mut().enumerate().for_each(|(i, dst)| {
        for r in 0..a.rows {
            let x = a.get(r, i);
            for (d, &bv) in dst.iter_mut().zip(b.row(r)) {
                *d = *d + x * bv;
            }
        }
    });
    out
}

/// Column sums, accumulated top to bottom.
pub fn column_sums<T: Real>(m: &Matrix<T>) -> Vec<T> {
    let mut acc = vec![T::zero(); m.cols];
    for r in 0..m.rows {
        for (a, &v) in acc.iter_mut().zip(m.row(r)) {
            *a = *a + v;
        }
    }
    acc
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}
