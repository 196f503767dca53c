//! Multi-head group self-attention over an ordered voxel sequence.
//!
//! Rows are cut into consecutive groups of `group_size`; every token attends
//! only to tokens of its own group. The last group is padded to full size and
//! padding keys get `-inf` logits, so each group is a rectangular
//! `G x G` problem. A learned linear position embedding of the voxel centres
//! is added to the features before the Q/K/V projections.

mod backward;
mod forward;

pub use backward::group_attention_backward;
pub use forward::{attend_batch, group_attention, group_attention_forward, AttentionCache};

use crate::error::{Result, SegtError};
use crate::rng::SeededRng;
use crate::tensor::{linear, Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AttentionConfig {
    channels: usize,
    heads: usize,
    group_size: usize,
}

impl AttentionConfig {
    pub fn new(channels: usize, heads: usize, group_size: usize) -> Result<Self> {
        if channels == 0 {
            return Err(SegtError::config("channels", "must be positive"));
        }
        if heads == 0 || channels % heads != 0 {
            return Err(SegtError::config(
                "heads",
                format!("{heads} does not divide {channels} channels"),
            ));
        }
        if group_size == 0 {
            return Err(SegtError::config("group_size", "must be at least 1"));
        }
        Ok(AttentionConfig {
            channels,
            heads,
            group_size,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn with_group_size(self, group_size: usize) -> Result<Self> {
        Self::new(self.channels, self.heads, group_size)
    }
}

/// Learnable attention weights, row-vector convention: `q = x · w_q + b_q`.
/// `w_pos`/`b_pos` map a normalized voxel centre to a `C`-dim embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub w_pos: Matrix<T>,
    pub b_pos: Vec<T>,
    pub w_q: Matrix<T>,
    pub b_q: Vec<T>,
    pub w_k: Matrix<T>,
    pub b_k: Vec<T>,
    pub w_v: Matrix<T>,
    pub b_v: Vec<T>,
    pub w_o: Matrix<T>,
    pub b_o: Vec<T>,
}

impl<T: Real> AttentionParams<T> {
    pub fn zeros(channels: usize) -> Self {
        let sq = || Matrix::zeros(channels, channels);
        let v = || vec![T::zero(); channels];
        AttentionParams {
            w_pos: Matrix::zeros(3, channels),
            b_pos: v(),
            w_q: sq(),
            b_q: v(),
            w_k: sq(),
            b_k: v(),
            w_v: sq(),
            b_v: v(),
            w_o: sq(),
            b_o: v(),
        }
    }

    /// Projections uniform in `(-1/sqrt(C), 1/sqrt(C))`, biases zero.
    pub fn random(channels: usize, rng: &mut SeededRng) -> Self {
        let mut p = Self::zeros(channels);
        let bound = 1.0 / (channels as f64).sqrt();
        for (name, data) in p.tensors_mut() {
            if name.starts_with("w_") {
                for x in data.iter_mut() {
                    *x = T::from_f64(rng.uniform(-bound, bound));
                }
            }
        }
        p
    }

    pub fn channels(&self) -> usize {
        self.b_q.len()
    }

    /// Tensors in their serialized order, with shapes.
    pub fn tensors(&self) -> Vec<(&'static str, (usize, usize), &[T])> {
        let c = self.channels();
        vec![
            ("w_pos", self.w_pos.shape(), self.w_pos.as_slice()),
            ("b_pos", (1, c), &self.b_pos),
            ("w_q", self.w_q.shape(), self.w_q.as_slice()),
            ("b_q", (1, c), &self.b_q),
            ("w_k", self.w_k.shape(), self.w_k.as_slice()),
            ("b_k", (1, c), &self.b_k),
            ("w_v", self.w_v.shape(), self.w_v.as_slice()),
            ("b_v", (1, c), &self.b_v),
            ("w_o", self.w_o.shape(), self.w_o.as_slice()),
            ("b_o", (1, c), &self.b_o),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        vec![
            ("w_pos", self.w_pos.as_mut_slice()),
            ("b_pos", &mut self.b_pos),
            ("w_q", self.w_q.as_mut_slice()),
            ("b_q", &mut self.b_q),
            ("w_k", self.w_k.as_mut_slice()),
            ("b_k", &mut self.b_k),
            ("w_v", self.w_v.as_mut_slice()),
            ("b_v", &mut self.b_v),
            ("w_o", self.w_o.as_mut_slice()),
            ("b_o", &mut self.b_o),
        ]
    }

    /// Shapes match `channels` and every entry is finite.
    pub fn check(&self, channels: usize) -> Result<()> {
        let c = channels;
        for (name, shape, data) in self.tensors() {
            let want = match name {
                "w_pos" => (3, c),
                n if n.starts_with("w_") => (c, c),
                _ => (1, c),
            };
            if shape != want || data.len() != want.0 * want.1 {
                return Err(SegtError::shape(format!(
                    "attention {name} is {shape:?}, expected {want:?}"
                )));
            }
            if data.iter().any(|x| !x.is_finite()) {
                return Err(SegtError::shape(format!("attention {name} holds non-finite values")));
            }
        }
        Ok(())
    }
}

/// Voxel centres mapped to `[-1, 1]` per axis: `(2c + 1) / dims - 1`.
pub fn normalized_centres<T: Real>(coords: &[[u32; 3]], dims: [u32; 3]) -> Matrix<T> {
    Matrix::from_fn(coords.len(), 3, |r, a| {
        T::from_f64((2.0 * coords[r][a] as f64 + 1.0) / dims[a] as f64 - 1.0)
    })
}

/// `normalize(coords) · w_pos + b_pos`, one row per voxel.
pub fn embed_positions<T: Real>(coords: &[[u32; 3]], dims: [u32; 3], params: &AttentionParams<T>) -> Matrix<T> {
    linear(&normalized_centres(coords, dims), &params.w_pos, &params.b_pos)
}

/// Rows cut into groups of `group_size`, padded to a whole number of groups.
/// `mask[r]` is false for padding rows.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupBatch<T> {
    group_size: usize,
    data: Matrix<T>,
    mask: Vec<bool>,
}

impl<T: Real> GroupBatch<T> {
    /// Consecutive rows of `x` in groups of `group_size`; only the last group
    /// carries padding.
    pub fn pack(x: &Matrix<T>, group_size: usize) -> Self {
        assert!(group_size > 0);
        let n = x.rows();
        let rows = n.div_ceil(group_size) * group_size;
        let mut data = Matrix::zeros(rows, x.cols());
        data.as_mut_slice()[..x.as_slice().len()].copy_from_slice(x.as_slice());
        GroupBatch {
            group_size,
            data,
            mask: (0..rows).map(|r| r < n).collect(),
        }
    }

    /// A batch with an explicit mask; padding may sit anywhere.
    pub fn from_parts(data: Matrix<T>, mask: Vec<bool>, group_size: usize) -> Result<Self> {
        if group_size == 0 || data.rows() % group_size != 0 || mask.len() != data.rows() {
            return Err(SegtError::shape(format!(
                "{} rows with {} mask entries do not form groups of {group_size}",
                data.rows(),
                mask.len()
            )));
        }
        Ok(GroupBatch {
            group_size,
            data,
            mask,
        })
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn groups(&self) -> usize {
        self.data.rows() / self.group_size
    }

    pub fn data(&self) -> &Matrix<T> {
        &self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn valid_rows(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Valid rows of a batch-shaped matrix, in batch order.
    pub fn unpack(&self, m: &Matrix<T>) -> Matrix<T> {
        debug_assert_eq!(m.rows(), self.mask.len());
        let mut out = Matrix::zeros(self.valid_rows(), m.cols());
        let mut dst = 0;
        for (r, &valid) in self.mask.iter().enumerate() {
            if valid {
                out.row_mut(dst).copy_from_slice(m.row(r));
                dst += 1;
            }
        }
        out
    }

    /// Batch-shaped copy of `m` (one row per valid slot), zeros in padding.
    pub fn repack(&self, m: &Matrix<T>) -> Matrix<T> {
        let mut out = Matrix::zeros(self.mask.len(), m.cols());
        let mut src = 0;
        for (r, &valid) in self.mask.iter().enumerate() {
            if valid {
                out.row_mut(r).copy_from_slice(m.row(src));
                src += 1;
            }
        }
        out
    }
}
