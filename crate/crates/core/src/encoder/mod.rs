//! The stacked encoder: pre-norm residual layers, each wrapping group
//! attention in an expansion (gather) and its inverse (scatter), with the two
//! conjugate strategies alternating layer by layer.

mod bev;
mod layers;

use std::time::{Duration, Instant};

pub use bev::{bev_scatter, BevGrid};
pub use layers::{feed_forward, gelu, layer_norm, LAYER_NORM_EPS};

use crate::attention::{group_attention, AttentionConfig, AttentionParams};
use crate::error::{Result, SegtError};
use crate::rng::SeededRng;
use crate::spacecurve::{gather, scatter, serialize_coords, ExpansionConfig, Strategy};
use crate::tensor::{linear, Matrix, Real};
use crate::voxelizer::VoxelSet;

pub const STAGES: usize = 4;
pub const BLOCKS_PER_STAGE: usize = 2;
/// Each block is one `Plus` layer followed by one `Minus` layer.
pub const LAYERS_PER_BLOCK: usize = 2;
pub const LAYERS: usize = STAGES * BLOCKS_PER_STAGE * LAYERS_PER_BLOCK;
pub const FFN_EXPANSION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub expansion: ExpansionConfig,
    pub attention: AttentionConfig,
}

/// How freshly generated parameters start out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InitMode {
    #[default]
    Random,
    /// Random, except the residual output projections (`w_o`, `b_o`,
    /// `ffn_w2`, `ffn_b2`) are zero, so every layer is the identity.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub norm1_gain: Vec<T>,
    pub norm1_bias: Vec<T>,
    pub attention: AttentionParams<T>,
    pub norm2_gain: Vec<T>,
    pub norm2_bias: Vec<T>,
    pub ffn_w1: Matrix<T>,
    pub ffn_b1: Vec<T>,
    pub ffn_w2: Matrix<T>,
    pub ffn_b2: Vec<T>,
}

impl<T: Real> LayerParams<T> {
    /// Every entry zero, gains included.
    pub fn zeros(channels: usize) -> Self {
        let c = channels;
        LayerParams {
            norm1_gain: vec![T::zero(); c],
            norm1_bias: vec![T::zero(); c],
            attention: AttentionParams::zeros(c),
            norm2_gain: vec![T::zero(); c],
            norm2_bias: vec![T::zero(); c],
            ffn_w1: Matrix::zeros(c, FFN_EXPANSION * c),
            ffn_b1: vec![T::zero(); FFN_EXPANSION * c],
            ffn_w2: Matrix::zeros(FFN_EXPANSION * c, c),
            ffn_b2: vec![T::zero(); c],
        }
    }

    /// Weight matrices uniform in `(-1/sqrt(C), 1/sqrt(C))` drawn in
    /// serialized order; biases zero; norm gains one.
    pub fn random(channels: usize, mode: InitMode, rng: &mut SeededRng) -> Self {
        let mut p = Self::zeros(channels);
        p.norm1_gain = vec![T::one(); channels];
        p.norm2_gain = vec![T::one(); channels];
        let bound = 1.0 / (channels as f64).sqrt();
        for (name, data) in p.tensors_mut() {
            if is_weight(name) {
                for x in data.iter_mut() {
                    *x = T::from_f64(rng.uniform(-bound, bound));
                }
            }
        }
        if mode == InitMode::Identity {
            p.zero_residual_outputs();
        }
        p
    }

    pub fn zero_residual_outputs(&mut self) {
        let c = self.ffn_b2.len();
        self.attention.w_o = Matrix::zeros(c, c);
        self.attention.b_o = vec![T::zero(); c];
        self.ffn_w2 = Matrix::zeros(FFN_EXPANSION * c, c);
        self.ffn_b2 = vec![T::zero(); c];
    }

    pub fn channels(&self) -> usize {
        self.ffn_b2.len()
    }

    /// Tensors in serialized order, with shapes.
    pub fn tensors(&self) -> Vec<(&'static str, (usize, usize), &[T])> {
        let c = self.channels();
        let mut out: Vec<(&'static str, (usize, usize), &[T])> = vec![
            ("norm1_gain", (1, c), &self.norm1_gain),
            ("norm1_bias", (1, c), &self.norm1_bias),
        ];
        out.extend(self.attention.tensors());
        out.extend([
            ("norm2_gain", (1, c), &self.norm2_gain[..]),
            ("norm2_bias", (1, c), &self.norm2_bias[..]),
            ("ffn_w1", self.ffn_w1.shape(), self.ffn_w1.as_slice()),
            ("ffn_b1", (1, self.ffn_b1.len()), &self.ffn_b1[..]),
            ("ffn_w2", self.ffn_w2.shape(), self.ffn_w2.as_slice()),
            ("ffn_b2", (1, c), &self.ffn_b2[..]),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        let mut out: Vec<(&'static str, &mut [T])> = vec![
            ("norm1_gain", &mut self.norm1_gain),
            ("norm1_bias", &mut self.norm1_bias),
        ];
        out.extend(self.attention.tensors_mut());
        out.extend([
            ("norm2_gain", &mut self.norm2_gain[..]),
            ("norm2_bias", &mut self.norm2_bias[..]),
            ("ffn_w1", self.ffn_w1.as_mut_slice()),
            ("ffn_b1", &mut self.ffn_b1[..]),
            ("ffn_w2", self.ffn_w2.as_mut_slice()),
            ("ffn_b2", &mut self.ffn_b2[..]),
        ]);
        out
    }

    /// Expected `(rows, cols)` of each tensor for `channels`.
    pub fn expected_shapes(channels: usize) -> Vec<(&'static str, (usize, usize))> {
        Self::zeros(channels)
            .tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect()
    }

    pub fn check(&self, channels: usize) -> Result<()> {
        let want = Self::expected_shapes(channels);
        for ((name, shape, data), (_, expected)) in self.tensors().into_iter().zip(want) {
            if shape != expected || data.len() != expected.0 * expected.1 {
                return Err(SegtError::shape(format!(
                    "layer {name} is {shape:?}, expected {expected:?}"
                )));
            }
            if data.iter().any(|x| !x.is_finite()) {
                return Err(SegtError::shape(format!("layer {name} holds non-finite values")));
            }
        }
        Ok(())
    }
}

fn is_weight(name: &str) -> bool {
    name.starts_with("w_") || name.starts_with("ffn_w")
}

/// Optional linear lift from the voxelizer's channel count to the encoder
/// width.
#[derive(Clone, Debug, PartialEq)]
pub struct InputProjection<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub plus: LayerParams<T>,
    pub minus: LayerParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T> {
    pub blocks: Vec<Block<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub cfg: EncoderConfig,
    pub input_projection: Option<InputProjection<T>>,
    pub stages: Vec<Stage<T>>,
}

impl<T: Real> EncoderParams<T> {
    /// Generates a full stack. Draw order: input projection weight (if
    /// `in_channels != channels`), then each layer in stack order.
    pub fn generate(cfg: EncoderConfig, in_channels: usize, seed: u64, mode: InitMode) -> Self {
        let c = cfg.attention.channels();
        let mut rng = SeededRng::new(seed);
        let input_projection = (in_channels != c).then(|| {
            let bound = 1.0 / (in_channels as f64).sqrt();
            InputProjection {
                weight: Matrix::from_fn(in_channels, c, |_, _| T::from_f64(rng.uniform(-bound, bound))),
                bias: vec![T::zero(); c],
            }
        });
        let stages = (0..STAGES)
            .map(|_| Stage {
                blocks: (0..BLOCKS_PER_STAGE)
                    .map(|_| Block {
                        plus: LayerParams::random(c, mode, &mut rng),
                        minus: LayerParams::random(c, mode, &mut rng),
                    })
                    .collect(),
            })
            .collect();
        EncoderParams {
            cfg,
            input_projection,
            stages,
        }
    }

    pub fn channels(&self) -> usize {
        self.cfg.attention.channels()
    }

    pub fn in_channels(&self) -> usize {
        self.input_projection
            .as_ref()
            .map_or(self.channels(), |p| p.weight.rows())
    }

    /// Layers in application order with their default strategies.
    pub fn layers(&self) -> impl Iterator<Item = (Strategy, &LayerParams<T>)> {
        self.stages.iter().flat_map(|s| {
            s.blocks
                .iter()
                .flat_map(|b| [(Strategy::Plus, &b.plus), (Strategy::Minus, &b.minus)])
        })
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut LayerParams<T>> {
        self.stages
            .iter_mut()
            .flat_map(|s| s.blocks.iter_mut().flat_map(|b| [&mut b.plus, &mut b.minus]))
    }

    pub fn check(&self) -> Result<()> {
        if self.stages.len() != STAGES || self.stages.iter().any(|s| s.blocks.len() != BLOCKS_PER_STAGE) {
            return Err(SegtError::shape(format!(
                "encoder needs {STAGES} stages of {BLOCKS_PER_STAGE} blocks"
            )));
        }
        let c = self.channels();
        if let Some(p) = &self.input_projection {
            if p.weight.cols() != c || p.bias.len() != c || p.weight.rows() == c {
                return Err(SegtError::shape("input projection does not map into the encoder width"));
            }
        }
        self.layers().try_for_each(|(_, l)| l.check(c))
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        let v = |x: &[T]| x.iter().map(|&a| U::from_f64(a.to_f64())).collect::<Vec<U>>();
        let layer = |l: &LayerParams<T>| {
            let mut out = LayerParams::<U>::zeros(l.channels());
            for ((_, dst), (_, _, src)) in out.tensors_mut().into_iter().zip(l.tensors()) {
                dst.copy_from_slice(&v(src));
            }
            out
        };
        EncoderParams {
            cfg: self.cfg,
            input_projection: self.input_projection.as_ref().map(|p| InputProjection {
                weight: p.weight.cast(),
                bias: v(&p.bias),
            }),
            stages: self
                .stages
                .iter()
                .map(|s| Stage {
                    blocks: s
                        .blocks
                        .iter()
                        .map(|b| Block {
                            plus: layer(&b.plus),
                            minus: layer(&b.minus),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

/// `Plus, Minus, Plus, Minus, ...` over all layers.
pub fn default_schedule() -> Vec<Strategy> {
    (0..LAYERS)
        .map(|i| if i % 2 == 0 { Strategy::Plus } else { Strategy::Minus })
        .collect()
}

/// One encoder layer on raw matrices:
/// expand -> (x + attn(LN x)) -> (y + FFN(LN y)) -> inverse expand.
pub fn layer_forward<T: Real>(
    features: &Matrix<T>,
    coords: &[[u32; 3]],
    dims: [u32; 3],
    strategy: Strategy,
    layer: &LayerParams<T>,
    cfg: &EncoderConfig,
) -> Result<Matrix<T>> {
    let plan = serialize_coords(coords, dims, strategy, &cfg.expansion)?;
    let f_z = gather(features, &plan)?;
    let coords_z = plan.gather_items(coords);

    let h = layer_norm(&f_z, &layer.norm1_gain, &layer.norm1_bias);
    let attn = group_attention(&h, &coords_z, dims, &cfg.attention, &layer.attention)?;
    let mut y = f_z;
    add_assign(&mut y, &attn);

    let h = layer_norm(&y, &layer.norm2_gain, &layer.norm2_bias);
    let ffn = feed_forward(&h, &layer.ffn_w1, &layer.ffn_b1, &layer.ffn_w2, &layer.ffn_b2);
    add_assign(&mut y, &ffn);

    scatter(&y, &plan)
}

fn add_assign<T: Real>(a: &mut Matrix<T>, b: &Matrix<T>) {
    for (x, &y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *x = *x + y;
    }
}

/// A single layer applied to a voxel set; coordinates and row order are kept.
pub fn segt_layer<T: Real>(
    voxels: &VoxelSet,
    strategy: Strategy,
    layer: &LayerParams<T>,
    cfg: &EncoderConfig,
) -> Result<VoxelSet> {
    check_width(voxels.channels(), cfg.attention.channels())?;
    layer.check(cfg.attention.channels())?;
    let f = voxels.features().cast::<T>();
    let out = layer_forward(&f, voxels.coords(), voxels.grid().dims(), strategy, layer, cfg)?;
    voxels.with_features(out.cast())
}

fn check_width(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(SegtError::shape(format!(
            "voxels carry {got} channels, encoder expects {want}"
        )));
    }
    Ok(())
}

/// All layers with the default alternating schedule.
pub fn encoder_forward<T: Real>(voxels: &VoxelSet, params: &EncoderParams<T>) -> Result<VoxelSet> {
    encoder_forward_with(voxels, params, &default_schedule(), |_, _| {})
}

/// All layers with an explicit strategy per layer; `on_stage(i, elapsed)`
/// fires after each stage.
pub fn encoder_forward_with<T: Real>(
    voxels: &VoxelSet,
    params: &EncoderParams<T>,
    schedule: &[Strategy],
    mut on_stage: impl FnMut(usize, Duration),
) -> Result<VoxelSet> {
    params.check()?;
    if schedule.len() != LAYERS {
        return Err(SegtError::shape(format!(
            "schedule has {} strategies for {LAYERS} layers",
            schedule.len()
        )));
    }
    check_width(voxels.channels(), params.in_channels())?;
    let dims = voxels.grid().dims();
    params.cfg.expansion.check_covers(dims)?;

    let mut f = voxels.features().cast::<T>();
    f.ensure_finite()?;
    if let Some(p) = &params.input_projection {
        f = linear(&f, &p.weight, &p.bias);
    }
    let per_stage = BLOCKS_PER_STAGE * LAYERS_PER_BLOCK;
    let mut stage_start = Instant::now();
    for (i, ((_, layer), &strategy)) in params.layers().zip(schedule).enumerate() {
        f = layer_forward(&f, voxels.coords(), dims, strategy, layer, &params.cfg)?;
        if (i + 1) % per_stage == 0 {
            on_stage(i / per_stage, stage_start.elapsed());
            stage_start = Instant::now();
        }
    }
    voxels.with_features(f.cast())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxelizer::{random_voxel_set, GridSpec};

    fn small_cfg(group: usize) -> EncoderConfig {
        EncoderConfig {
            expansion: ExpansionConfig::new(2, 1).unwrap(),
            attention: AttentionConfig::new(8, 2, group).unwrap(),
        }
    }

    fn grid() -> GridSpec {
        GridSpec::from_dims([8, 8, 1]).unwrap()
    }

    #[test]
    fn all_zero_layer_is_identity() {
        let v = random_voxel_set(&grid(), 20, 8, &mut SeededRng::new(1)).unwrap();
        let out = segt_layer(&v, Strategy::Minus, &LayerParams::<f64>::zeros(8), &small_cfg(4)).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn single_voxel_ignores_group_and_strategy() {
        let v = random_voxel_set(&grid(), 1, 8, &mut SeededRng::new(2)).unwrap();
        let layer = LayerParams::<f64>::random(8, InitMode::Random, &mut SeededRng::new(3));
        let a = segt_layer(&v, Strategy::Plus, &layer, &small_cfg(1)).unwrap();
        let b = segt_layer(&v, Strategy::Minus, &layer, &small_cfg(64)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_init_stack_is_identity() {
        let v = random_voxel_set(&grid(), 30, 8, &mut SeededRng::new(4)).unwrap();
        let params = EncoderParams::<f64>::generate(small_cfg(4), 8, 9, InitMode::Identity);
        assert_eq!(encoder_forward(&v, &params).unwrap(), v);
    }

    #[test]
    fn empty_set_passes_through() {
        let params = EncoderParams::<f64>::generate(small_cfg(4), 8, 9, InitMode::Random);
        let v = VoxelSet::empty(grid(), 8);
        assert_eq!(encoder_forward(&v, &params).unwrap(), v);
    }

    #[test]
    fn coords_and_row_order_preserved() {
        let v = random_voxel_set(&grid(), 25, 8, &mut SeededRng::new(5)).unwrap();
        let params = EncoderParams::<f64>::generate(small_cfg(4), 8, 1, InitMode::Random);
        let out = encoder_forward(&v, &params).unwrap();
        assert_eq!(out.coords(), v.coords());
        assert_ne!(out.features(), v.features());
    }

    #[test]
    fn input_projection_lifts_channels() {
        let v = random_voxel_set(&grid(), 10, 5, &mut SeededRng::new(6)).unwrap();
        let params = EncoderParams::<f32>::generate(small_cfg(4), 5, 2, InitMode::Random);
        assert!(params.input_projection.is_some());
        let out = encoder_forward(&v, &params).unwrap();
        assert_eq!(out.channels(), 8);
        let wrong = random_voxel_set(&grid(), 10, 6, &mut SeededRng::new(6)).unwrap();
        assert!(matches!(encoder_forward(&wrong, &params), Err(SegtError::Shape(_))));
    }

    #[test]
    fn stage_observer_fires_per_stage() {
        let v = random_voxel_set(&grid(), 10, 8, &mut SeededRng::new(7)).unwrap();
        let params = EncoderParams::<f64>::generate(small_cfg(4), 8, 2, InitMode::Random);
        let mut seen = Vec::new();
        encoder_forward_with(&v, &params, &default_schedule(), |s, _| seen.push(s)).unwrap();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        assert!(encoder_forward_with(&v, &params, &[Strategy::Plus], |_, _| {}).is_err());
    }

    #[test]
    fn structure_is_checked() {
        let mut params = EncoderParams::<f64>::generate(small_cfg(4), 8, 2, InitMode::Random);
        assert_eq!(params.layers().count(), LAYERS);
        params.stages.pop();
        assert!(params.check().is_err());
    }

    #[test]
    fn identity_mode_only_zeroes_residual_outputs() {
        let r = EncoderParams::<f64>::generate(small_cfg(4), 8, 11, InitMode::Random);
        let mut i = EncoderParams::<f64>::generate(small_cfg(4), 8, 11, InitMode::Identity);
        assert_ne!(r, i);
        let mut r2 = r.clone();
        r2.layers_mut().for_each(|l| l.zero_residual_outputs());
        i.layers_mut().for_each(|l| l.zero_residual_outputs());
        assert_eq!(r2, i);
    }
}
