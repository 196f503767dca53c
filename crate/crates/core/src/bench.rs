//! Wall-clock timing of the hot paths on seeded random voxel sets.

use std::time::{Duration, Instant};

use crate::attention::{group_attention, AttentionParams};
use crate::encoder::{encoder_forward, layer_forward, EncoderParams, InitMode, LayerParams};
use crate::error::{Result, SegtError};
use crate::model_io::RunConfig;
use crate::rng::SeededRng;
use crate::spacecurve::{gather, serialize, Strategy};
use crate::tensor::{Precision, Real};
use crate::voxelizer::{random_voxel_set, VoxelSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timing {
    pub name: &'static str,
    pub min: Duration,
    pub median: Duration,
}

impl Timing {
    pub fn from_samples(name: &'static str, samples: &mut [Duration]) -> Self {
        assert!(!samples.is_empty());
        samples.sort();
        let mid = samples.len() / 2;
        let median = if samples.len() % 2 == 1 {
            samples[mid]
        } else {
            (samples[mid - 1] + samples[mid]) / 2
        };
        Timing {
            name,
            min: samples[0],
            median,
        }
    }
}

/// Runs `f` `repeat` times and returns each wall time.
pub fn time_repeated(repeat: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<Duration>> {
    (0..repeat)
        .map(|_| {
            let t = Instant::now();
            f()?;
            Ok(t.elapsed())
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub voxels: usize,
    pub seed: u64,
    pub repeat: usize,
    /// Also time one full encoder forward per repeat.
    pub full_encoder: bool,
}

/// Times `serialize`, `attention` (gather plus group attention) and `layer`
/// (one full layer) on `opts.voxels` random voxels drawn in `cfg.grid`, with
/// `cfg.channels` features so no input projection is involved.
pub fn run_bench(cfg: &RunConfig, opts: &BenchOptions) -> Result<Vec<Timing>> {
    if opts.voxels == 0 {
        return Err(SegtError::config("voxels", "must be at least 1"));
    }
    if opts.repeat == 0 {
        return Err(SegtError::config("repeat", "must be at least 1"));
    }
    let mut rng = SeededRng::new(opts.seed);
    let voxels = random_voxel_set(&cfg.grid, opts.voxels, cfg.channels, &mut rng)?;
    match cfg.precision {
        Precision::F32 => bench_at::<f32>(cfg, opts, &voxels),
        Precision::F64 => bench_at::<f64>(cfg, opts, &voxels),
    }
}

fn bench_at<T: Real>(cfg: &RunConfig, opts: &BenchOptions, voxels: &VoxelSet) -> Result<Vec<Timing>> {
    let dims = voxels.grid().dims();
    let enc = cfg.encoder_config(dims)?;
    let mut rng = SeededRng::new(opts.seed ^ 0x5eed);
    let attn = AttentionParams::<T>::random(cfg.channels, &mut rng);
    let layer = LayerParams::<T>::random(cfg.channels, InitMode::Random, &mut rng);
    let f = voxels.features().cast::<T>();

    let mut out = Vec::new();
    let mut s = time_repeated(opts.repeat, || serialize(voxels, Strategy::Plus, &enc.expansion).map(drop))?;
    out.push(Timing::from_samples("serialize", &mut s));

    let mut s = time_repeated(opts.repeat, || {
        let plan = serialize(voxels, Strategy::Plus, &enc.expansion)?;
        let f_z = gather(&f, &plan)?;
        let coords_z = plan.gather_items(voxels.coords());
        group_attention(&f_z, &coords_z, dims, &enc.attention, &attn).map(drop)
    })?;
    out.push(Timing::from_samples("attention", &mut s));

    let mut s = time_repeated(opts.repeat, || {
        layer_forward(&f, voxels.coords(), dims, Strategy::Plus, &layer, &enc).map(drop)
    })?;
    out.push(Timing::from_samples("layer", &mut s));

    if opts.full_encoder {
        let params = EncoderParams::<T>::generate(enc, cfg.channels, opts.seed, InitMode::Random);
        let mut s = time_repeated(opts.repeat, || encoder_forward(voxels, &params).map(drop))?;
        out.push(Timing::from_samples("encoder", &mut s));
    }
    Ok(out)
}
