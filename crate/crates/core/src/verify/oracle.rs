//! Reference implementations kept deliberately naive and independent of the
//! production kernels: the curve is built by recursive substitution, the
//! attention by nested loops over plain vectors.

use crate::attention::{AttentionConfig, AttentionParams};
use crate::tensor::Matrix;

fn gray(w: u32) -> u32 {
    w ^ (w >> 1)
}

/// Corner at which the sub-curve of cell `w` starts, as a bit mask.
fn sub_entry(w: u32) -> u32 {
    if w == 0 {
        0
    } else {
        gray(2 * ((w - 1) / 2))
    }
}

/// Axis along which the sub-curve of cell `w` leaves, counted from the top bit.
fn sub_direction(w: u32, n: u32) -> u32 {
    let ones = |x: u32| x.trailing_ones();
    if w == 0 {
        0
    } else if w % 2 == 0 {
        ones(w - 1) % n
    } else {
        ones(w) % n
    }
}

/// Every cell of the `d`-dimensional level-`level` curve, in curve order.
/// Axis `j` of the base pattern is bit `d-1-j` of the Gray code, so the 2D
/// base runs (0,0) (0,1) (1,1) (1,0).
pub fn reference_curve(level: u32, d: usize) -> Vec<[u32; 3]> {
    assert!(d == 2 || d == 3);
    let n = d as u32;
    if level == 0 {
        return vec![[0; 3]];
    }
    let inner = reference_curve(level - 1, d);
    let s = 1u32 << (level - 1);
    let mut out = Vec::with_capacity(inner.len() << d);
    for w in 0..(1u32 << n) {
        let (g, e, dir) = (gray(w), sub_entry(w), sub_direction(w, n));
        for q in &inner {
            let mut p = [0u32; 3];
            for j in 0..d {
                let bit = n - 1 - j as u32;
                let mut v = q[(j + dir as usize + 1) % d];
                if (e >> bit) & 1 == 1 {
                    v = s - 1 - v;
                }
                p[j] = ((g >> bit) & 1) * s + v;
            }
            out.push(p);
        }
    }
    out
}

/// Full (ungrouped) multi-head self-attention over all `f` rows with the
/// additive coordinate embedding, written with nested loops.
pub fn dense_attention(
    f: &Matrix<f64>,
    coords: &[[u32; 3]],
    dims: [u32; 3],
    cfg: &AttentionConfig,
    p: &AttentionParams<f64>,
) -> Matrix<f64> {
    let (n, c, heads) = (f.rows(), cfg.channels(), cfg.heads());
    let dh = c / heads;
    let affine = |x: &[f64], w: &Matrix<f64>, b: &[f64]| -> Vec<f64> {
        (0..w.cols())
            .map(|j| {
                let mut acc = b[j];
                for (i, xi) in x.iter().enumerate() {
                    acc += xi * w.get(i, j);
                }
                acc
            })
            .collect()
    };

    let mut x = Vec::with_capacity(n);
    for (i, coord) in coords.iter().enumerate() {
        let centre: Vec<f64> = (0..3)
            .map(|a| (2.0 * coord[a] as f64 + 1.0) / dims[a] as f64 - 1.0)
            .collect();
        let e = affine(&centre, &p.w_pos, &p.b_pos);
        x.push(f.row(i).iter().zip(&e).map(|(a, b)| a + b).collect::<Vec<f64>>());
    }
    let q: Vec<Vec<f64>> = x.iter().map(|r| affine(r, &p.w_q, &p.b_q)).collect();
    let k: Vec<Vec<f64>> = x.iter().map(|r| affine(r, &p.w_k, &p.b_k)).collect();
    let v: Vec<Vec<f64>> = x.iter().map(|r| affine(r, &p.w_v, &p.b_v)).collect();

    let mut out = Matrix::zeros(n, c);
    for (i, qi) in q.iter().enumerate() {
        let mut o = vec![0.0; c];
        for h in 0..heads {
            let lo = h * dh;
            let logits: Vec<f64> = (0..n)
                .map(|j| (lo..lo + dh).map(|t| qi[t] * k[j][t]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for j in 0..n {
                for t in lo..lo + dh {
                    o[t] += w[j] / z * v[j][t];
                }
            }
        }
        for (j, y) in affine(&o, &p.w_o, &p.b_o).into_iter().enumerate() {
            out.set(i, j, y);
        }
    }
    out
}

/// Central difference `(f(x+h) - f(x-h)) / 2h` of a scalar function with
/// respect to one coordinate of `x`, restoring `x` afterwards.
pub fn central_difference(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}
