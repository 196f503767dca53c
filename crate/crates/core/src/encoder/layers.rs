//! Row-wise layer norm and the GELU feed-forward block.

use crate::tensor::{linear, Matrix, Real};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn layer_norm<T: Real>(x: &Matrix<T>, gain: &[T], bias: &[T]) -> Matrix<T> {
    let c = x.cols();
    let eps = T::from_f64(LAYER_NORM_EPS);
    let inv_c = T::one() / T::from_f64(c as f64);
    let mut out = Matrix::zeros(x.rows(), c);
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_c;
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            * inv_c;
        let inv_std = T::one() / (var + eps).sqrt();
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (row[j] - mean) * inv_std * gain[j] + bias[j];
        }
    }
    out
}

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let k = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let c = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

pub fn feed_forward<T: Real>(x: &Matrix<T>, w1: &Matrix<T>, b1: &[T], w2: &Matrix<T>, b2: &[T]) -> Matrix<T> {
    let mut hidden = linear(x, w1, b1);
    for v in hidden.as_mut_slice() {
        *v = gelu(*v);
    }
    linear(&hidden, w2, b2)
}
