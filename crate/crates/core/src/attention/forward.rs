use rayon::prelude::*;

use super::{embed_positions, normalized_centres, AttentionConfig, AttentionParams, GroupBatch};
use crate::error::{Result, SegtError};
use crate::tensor::{dot, linear, Matrix, Real};

/// Intermediates kept by [`group_attention_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    pub(super) cfg: AttentionConfig,
    /// `F + E`, one row per token.
    pub(super) x: Matrix<T>,
    pub(super) centres: Matrix<T>,
    pub(super) mask: Vec<bool>,
    pub(super) q: Matrix<T>,
    pub(super) k: Matrix<T>,
    pub(super) v: Matrix<T>,
    /// Pre-projection head outputs, batch-shaped.
    pub(super) o: Matrix<T>,
    /// Softmax weights, `[group][head][query][key]`.
    pub(super) probs: Vec<T>,
}

impl<T: Real> AttentionCache<T> {
    pub fn tokens(&self) -> usize {
        self.x.rows()
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Softmax weights of `query` (row within the group) over the keys of
    /// `group` for `head`.
    pub fn probs(&self, group: usize, head: usize, query: usize) -> &[T] {
        let g = self.cfg.group_size();
        let start = ((group * self.cfg.heads() + head) * g + query) * g;
        &self.probs[start..start + g]
    }
}

fn check_inputs<T: Real>(
    f_z: &Matrix<T>,
    coords_z: &[[u32; 3]],
    cfg: &AttentionConfig,
    params: &AttentionParams<T>,
) -> Result<()> {
    if f_z.cols() != cfg.channels() {
        return Err(SegtError::shape(format!(
            "features have {} channels, attention expects {}",
            f_z.cols(),
            cfg.channels()
        )));
    }
    if f_z.rows() != coords_z.len() {
        return Err(SegtError::shape(format!(
            "{} feature rows for {} coordinates",
            f_z.rows(),
            coords_z.len()
        )));
    }
    params.check(cfg.channels())?;
    f_z.ensure_finite()
}

/// Group attention over rows already in ordered-field order. Returns the
/// output and the cache needed by [`super::group_attention_backward`].
pub fn group_attention_forward<T: Real>(
    f_z: &Matrix<T>,
    coords_z: &[[u32; 3]],
    dims: [u32; 3],
    cfg: &AttentionConfig,
    params: &AttentionParams<T>,
) -> Result<(Matrix<T>, AttentionCache<T>)> {
    check_inputs(f_z, coords_z, cfg, params)?;
    let (x, centres) = with_positions(f_z, coords_z, dims, params);
    let batch = GroupBatch::pack(&x, cfg.group_size());
    let run = run_batch(&batch, cfg, params, true);
    let out = batch.unpack(&run.out);
    let cache = AttentionCache {
        cfg: *cfg,
        x,
        centres,
        mask: batch.mask().to_vec(),
        q: run.q,
        k: run.k,
        v: run.v,
        o: run.o,
        probs: run.probs,
    };
    Ok((out, cache))
}

/// Forward pass without keeping intermediates.
pub fn group_attention<T: Real>(
    f_z: &Matrix<T>,
    coords_z: &[[u32; 3]],
    dims: [u32; 3],
    cfg: &AttentionConfig,
    params: &AttentionParams<T>,
) -> Result<Matrix<T>> {
    check_inputs(f_z, coords_z, cfg, params)?;
    let (x, _) = with_positions(f_z, coords_z, dims, params);
    let batch = GroupBatch::pack(&x, cfg.group_size());
    let run = run_batch(&batch, cfg, params, false);
    Ok(batch.unpack(&run.out))
}

/// Attention over an already-embedded, already-padded batch. The output is
/// batch-shaped; rows under a false mask are meaningless.
pub fn attend_batch<T: Real>(
    batch: &GroupBatch<T>,
    cfg: &AttentionConfig,
    params: &AttentionParams<T>,
) -> Result<Matrix<T>> {
    if batch.group_size() != cfg.group_size() || batch.data().cols() != cfg.channels() {
        return Err(SegtError::shape("batch does not match attention config"));
    }
    params.check(cfg.channels())?;
    Ok(run_batch(batch, cfg, params, false).out)
}

fn with_positions<T: Real>(
    f_z: &Matrix<T>,
    coords_z: &[[u32; 3]],
    dims: [u32; 3],
    params: &AttentionParams<T>,
) -> (Matrix<T>, Matrix<T>) {
    let centres = normalized_centres(coords_z, dims);
    let mut x = embed_positions(coords_z, dims, params);
    for (xv, &fv) in x.as_mut_slice().iter_mut().zip(f_z.as_slice()) {
        *xv = fv + *xv;
    }
    (x, centres)
}

struct BatchRun<T> {
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    o: Matrix<T>,
    probs: Vec<T>,
    out: Matrix<T>,
}

fn run_batch<T: Real>(
    batch: &GroupBatch<T>,
    cfg: &AttentionConfig,
    params: &AttentionParams<T>,
    keep_probs: bool,
) -> BatchRun<T> {
    let x = batch.data();
    let q = linear(x, &params.w_q, &params.b_q);
    let k = linear(x, &params.w_k, &params.b_k);
    let v = linear(x, &params.w_v, &params.b_v);
    let (o, probs) = attend_groups(&q, &k, &v, batch.mask(), cfg, keep_probs);
    let out = linear(&o, &params.w_o, &params.b_o);
    BatchRun {
        q,
        k,
        v,
        o,
        probs,
        out,
    }
}

fn attend_groups<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    mask: &[bool],
    cfg: &AttentionConfig,
    keep_probs: bool,
) -> (Matrix<T>, Vec<T>) {
    let (g, heads, c) = (cfg.group_size(), cfg.heads(), cfg.channels());
    let groups = q.rows() / g;
    let mut o = Matrix::zeros(q.rows(), c);
    if groups == 0 {
        return (o, Vec::new());
    }
    let per_group = heads * g * g;
    let mut probs = if keep_probs {
        vec![T::zero(); groups * per_group]
    } else {
        Vec::new()
    };
    let kernel = |gi: usize, o_chunk: &mut [T], mut p_chunk: Option<&mut [T]>| {
        group_kernel(gi, q, k, v, mask, cfg, o_chunk, p_chunk.as_deref_mut());
    };
    if keep_probs {
        o.as_mut_slice()
            .par_chunks_mut(g * c)
            .zip(probs.par_chunks_mut(per_group))
            .enumerate()
            .for_each(|(gi, (oc, pc))| kernel(gi, oc, Some(pc)));
    } else {
        o.as_mut_slice()
            .par_chunks_mut(g * c)
            .enumerate()
            .for_each(|(gi, oc)| kernel(gi, oc, None));
    }
    (o, probs)
}

#[allow(clippy::too_many_arguments)]
fn group_kernel<T: Real>(
    gi: usize,
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    mask: &[bool],
    cfg: &AttentionConfig,
    o_chunk: &mut [T],
    mut p_chunk: Option<&mut [T]>,
) {
    let (g, c, dh) = (cfg.group_size(), cfg.channels(), cfg.head_dim());
    let scale = T::one() / T::from_f64((dh as f64).sqrt());
    let r0 = gi * g;
    let mut weights = vec![T::zero(); g];
    for h in 0..cfg.heads() {
        let cols = h * dh..(h + 1) * dh;
        for qi in 0..g {
            if !mask[r0 + qi] {
                continue;
            }
            let q_row = &q.row(r0 + qi)[cols.clone()];
            let mut max = T::neg_infinity();
            for (kj, w) in weights.iter_mut().enumerate() {
                *w = if mask[r0 + kj] {
                    dot(q_row, &k.row(r0 + kj)[cols.clone()]) * scale
                } else {
                    T::neg_infinity()
                };
                max = max.max(*w);
            }
            let mut sum = T::zero();
            for w in weights.iter_mut() {
                *w = (*w - max).exp();
                sum = sum + *w;
            }
            let out = &mut o_chunk[qi * c + cols.start..qi * c + cols.end];
            for (kj, &w) in weights.iter().enumerate() {
                let p = w / sum;
                if let Some(pc) = p_chunk.as_deref_mut() {
                    pc[(h * g + qi) * g + kj] = p;
                }
                for (ov, &vv) in out.iter_mut().zip(&v.row(r0 + kj)[cols.clone()]) {
                    *ov = *ov + p * vv;
                }
            }
        }
    }
}
