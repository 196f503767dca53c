use rayon::prelude::*;

use super::{AttentionCache, AttentionParams, GroupBatch};
use crate::error::{Result, SegtError};
use crate::tensor::{column_sums, dot, matmul_nt, matmul_tn, Matrix, Real};

/// Gradients of a scalar loss given `d_out = dL/dF_hat`.
///
/// Returns `dL/dF_z` and the parameter gradients (same layout as the
/// parameters). Padding rows neither receive nor pass gradient.
pub fn group_attention_backward<T: Real>(
    cache: &AttentionCache<T>,
    params: &AttentionParams<T>,
    d_out: &Matrix<T>,
) -> Result<(Matrix<T>, AttentionParams<T>)> {
    let cfg = cache.cfg;
    let c = cfg.channels();
    if d_out.shape() != (cache.tokens(), c) {
        return Err(SegtError::shape(format!(
            "upstream gradient is {:?}, forward produced {:?}",
            d_out.shape(),
            (cache.tokens(), c)
        )));
    }
    if params.channels() != c {
        return Err(SegtError::shape("parameters do not match the cached forward"));
    }

    let batch = GroupBatch::from_parts(cache.q.clone(), cache.mask.clone(), cfg.group_size())?;
    let d_out_b = batch.repack(d_out);

    let mut grads = AttentionParams::zeros(c);
    grads.w_o = matmul_tn(&cache.o, &d_out_b);
    grads.b_o = column_sums(&d_out_b);
    let d_o = matmul_nt(&d_out_b, &params.w_o);

    let rows = cache.q.rows();
    let mut dq = Matrix::zeros(rows, c);
    let mut dk = Matrix::zeros(rows, c);
    let mut dv = Matrix::zeros(rows, c);
    let g = cfg.group_size();
    let chunk = g * c;
    if rows > 0 {
        dq.as_mut_slice()
            .par_chunks_mut(chunk)
            .zip(dk.as_mut_slice().par_chunks_mut(chunk))
            .zip(dv.as_mut_slice().par_chunks_mut(chunk))
            .enumerate()
            .for_each(|(gi, ((dq_c, dk_c), dv_c))| {
                group_backward(gi, cache, &d_o, dq_c, dk_c, dv_c);
            });
    }
    let dq = batch.unpack(&dq);
    let dk = batch.unpack(&dk);
    let dv = batch.unpack(&dv);

    grads.w_q = matmul_tn(&cache.x, &dq);
    grads.b_q = column_sums(&dq);
    grads.w_k = matmul_tn(&cache.x, &dk);
    grads.b_k = column_sums(&dk);
    grads.w_v = matmul_tn(&cache.x, &dv);
    grads.b_v = column_sums(&dv);

    let mut dx = matmul_nt(&dq, &params.w_q);
    for part in [matmul_nt(&dk, &params.w_k), matmul_nt(&dv, &params.w_v)] {
        for (a, &b) in dx.as_mut_slice().iter_mut().zip(part.as_slice()) {
            *a = *a + b;
        }
    }
    grads.w_pos = matmul_tn(&cache.centres, &dx);
    grads.b_pos = column_sums(&dx);
    Ok((dx, grads))
}

fn group_backward<T: Real>(
    gi: usize,
    cache: &AttentionCache<T>,
    d_o: &Matrix<T>,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let cfg = &cache.cfg;
    let (g, c, dh) = (cfg.group_size(), cfg.channels(), cfg.head_dim());
    let scale = T::one() / T::from_f64((dh as f64).sqrt());
    let r0 = gi * g;
    let mut dp = vec![T::zero(); g];
    for h in 0..cfg.heads() {
        let cols = h * dh..(h + 1) * dh;
        for qi in 0..g {
            if !cache.mask[r0 + qi] {
                continue;
            }
            let p = cache.probs(gi, h, qi);
            let d_o_row = &d_o.row(r0 + qi)[cols.clone()];
            for (kj, d) in dp.iter_mut().enumerate() {
                *d = dot(d_o_row, &cache.v.row(r0 + kj)[cols.clone()]);
            }
            let t = dot(p, &dp);
            let q_row = &cache.q.row(r0 + qi)[cols.clone()];
            for kj in 0..g {
                if !cache.mask[r0 + kj] {
                    continue;
                }
                let pk = p[kj];
                let ds = pk * (dp[kj] - t) * scale;
                let k_row = &cache.k.row(r0 + kj)[cols.clone()];
                let base_q = qi * c + cols.start;
                let base_k = kj * c + cols.start;
                for j in 0..dh {
                    dv[base_k + j] = dv[base_k + j] + pk * d_o_row[j];
                    dq[base_q + j] = dq[base_q + j] + ds * k_row[j];
                    dk[base_k + j] = dk[base_k + j] + ds * q_row[j];
                }
            }
        }
    }
}
