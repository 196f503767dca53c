//! Embedded invariant suite shared by `segt selftest` and the acceptance
//! test target. Each criterion builds its own seeded instance and returns an
//! [`Outcome`]; none of them panic on failure.

mod oracle;

use std::collections::HashMap;
use std::time::{Duration, Instant};

pub use oracle::{central_difference, dense_attention, reference_curve};

use crate::attention::{
    attend_batch, group_attention, group_attention_backward, group_attention_forward, AttentionConfig,
    AttentionParams, GroupBatch,
};
use crate::bench::{time_repeated, Timing};
use crate::encoder::{
    bev_scatter, default_schedule, encoder_forward, encoder_forward_with, EncoderParams, InitMode,
};
use crate::error::{Result, SegtError};
use crate::model_io::RunConfig;
use crate::rng::SeededRng;
use crate::spacecurve::{
    gather, hilbert_decode, hilbert_encode, scatter, serialize, set_curve_fault, ExpansionConfig,
    SerializationPlan, Strategy,
};
use crate::tensor::Matrix;
use crate::voxelizer::{random_voxel_set, GridSpec, VoxelSet};

#[derive(Clone, Debug)]
pub struct Outcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {} ({}) {:.1} ms",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.elapsed.as_secs_f64() * 1e3
        )
    }
}

/// Deliberate defects for negative-control runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Faults {
    pub corrupt_curve: bool,
}

fn run(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Outcome {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Outcome {
        name,
        passed,
        detail,
        elapsed: t.elapsed(),
    }
}

pub type Criterion = (&'static str, fn() -> Outcome);

/// Every criterion, in reporting order.
pub const CRITERIA: &[Criterion] = &[
    ("curve_bijectivity", curve_bijectivity),
    ("curve_adjacency", curve_adjacency),
    ("curve_oracle", curve_oracle),
    ("plan_round_trip", plan_round_trip),
    ("conjugacy", conjugacy),
    ("dense_oracle", dense_oracle),
    ("softmax_normalization", softmax_normalization),
    ("padding_neutrality", padding_neutrality),
    ("group_isolation", group_isolation),
    ("gradient_check", gradient_check),
    ("encoder_identity", encoder_identity),
    ("permutation_invariance", permutation_invariance),
    ("strategy_sensitivity", strategy_sensitivity),
    ("bev_conservation", bev_conservation),
    ("throughput", throughput),
];

/// Runs every criterion, with `faults` active for the duration.
pub fn run_all(faults: Faults) -> Vec<Outcome> {
    set_curve_fault(faults.corrupt_curve);
    let out = CRITERIA.iter().map(|(_, f)| f()).collect();
    set_curve_fault(false);
    out
}

/// Curve shapes checked exhaustively: 2D levels 1..=5, 3D levels 1..=4.
const CURVE_CASES: [(usize, u32); 9] = [(2, 1), (2, 2), (2, 3), (2, 4), (2, 5), (3, 1), (3, 2), (3, 3), (3, 4)];

fn lattice(d: usize, level: u32) -> impl Iterator<Item = [u32; 3]> {
    let side = 1u32 << level;
    let zs = if d == 3 { side } else { 1 };
    (0..zs).flat_map(move |z| (0..side).flat_map(move |y| (0..side).map(move |x| [x, y, z])))
}

pub fn curve_bijectivity() -> Outcome {
    run("curve_bijectivity", || {
        let mut cells = 0usize;
        let mut bad = Vec::new();
        for (d, level) in CURVE_CASES {
            let mut seen = vec![false; 1 << (d as u32 * level)];
            for p in lattice(d, level) {
                cells += 1;
                let h = hilbert_encode(&p[..d], level)?;
                let back = hilbert_decode(h, level, d)?;
                let fresh = !std::mem::replace(&mut seen[h as usize], true);
                if back != p || !fresh {
                    bad.push(format!("{d}d/L{level} at {p:?}"));
                    break;
                }
            }
        }
        Ok((bad.is_empty(), format!("cells={cells} failures=[{}]", bad.join(", "))))
    })
    .with_budget(Duration::from_secs(1))
}

pub fn curve_adjacency() -> Outcome {
    run("curve_adjacency", || {
        let mut steps = 0usize;
        let mut bad = Vec::new();
        for (d, level) in CURVE_CASES {
            let mut prev = hilbert_decode(0, level, d)?;
            for i in 1..1u64 << (d as u32 * level) {
                let p = hilbert_decode(i, level, d)?;
                let dist: u32 = (0..3).map(|a| p[a].abs_diff(prev[a])).sum();
                steps += 1;
                if dist != 1 {
                    bad.push(format!("{d}d/L{level} index {i} distance {dist}"));
                    break;
                }
                prev = p;
            }
        }
        Ok((bad.is_empty(), format!("steps={steps} failures=[{}]", bad.join(", "))))
    })
}

/// The production kernel against the recursive construction, both ways.
pub fn curve_oracle() -> Outcome {
    run("curve_oracle", || {
        let mut bad = Vec::new();
        for (d, level) in CURVE_CASES {
            for (i, p) in reference_curve(level, d).into_iter().enumerate() {
                if hilbert_decode(i as u64, level, d)? != p || hilbert_encode(&p[..d], level)? != i as u64 {
                    bad.push(format!("{d}d/L{level} index {i}"));
                    break;
                }
            }
        }
        Ok((bad.is_empty(), format!("failures=[{}]", bad.join(", "))))
    })
}

fn is_bijective(plan: &SerializationPlan) -> bool {
    let n = plan.len();
    plan.order().len() == n
        && plan.inverse().len() == n
        && (0..n).all(|i| plan.order()[plan.inverse()[i]] == i && plan.inverse()[plan.order()[i]] == i)
}

fn default_expansion(grid: &GridSpec) -> Result<ExpansionConfig> {
    RunConfig::default().expansion(grid.dims())
}

pub fn plan_round_trip() -> Outcome {
    run("plan_round_trip", || {
        let grid = GridSpec::nuscenes();
        let cfg = default_expansion(&grid)?;
        let mut rng = SeededRng::new(11);
        let mut notes = Vec::new();
        let mut ok = true;
        for n in [0, 1, 1000, 65536] {
            let v = random_voxel_set(&grid, n, 4, &mut rng)?;
            for strategy in [Strategy::Plus, Strategy::Minus] {
                let plan = serialize(&v, strategy, &cfg)?;
                let back = scatter(&gather(v.features(), &plan)?, &plan)?;
                let same = bits_equal(back.as_slice(), v.features().as_slice());
                ok &= same && is_bijective(&plan);
            }
            notes.push(n.to_string());
        }
        Ok((ok, format!("n=[{}]", notes.join(","))))
    })
}

pub fn conjugacy() -> Outcome {
    run("conjugacy", || {
        let grid = GridSpec::nuscenes();
        let cfg = default_expansion(&grid)?;
        let v = random_voxel_set(&grid, 1000, 1, &mut SeededRng::new(12))?;
        let plus = serialize(&v, Strategy::Plus, &cfg)?;
        let minus = serialize(&v, Strategy::Minus, &cfg)?;
        let moved = plus.order().iter().zip(minus.order()).filter(|(a, b)| a != b).count();
        let ok = moved > 0 && is_bijective(&plus) && is_bijective(&minus);
        Ok((ok, format!("ranks_differing={moved}/1000")))
    })
}

type AttentionInstance = (Matrix<f64>, Vec<[u32; 3]>, AttentionParams<f64>);

/// Seeded attention instance with nonzero biases, so every parameter is
/// exercised.
fn attention_instance(n: usize, dims: [u32; 3], cfg: &AttentionConfig, seed: u64) -> Result<AttentionInstance> {
    let mut rng = SeededRng::new(seed);
    let grid = GridSpec::from_dims(dims)?;
    let v = random_voxel_set(&grid, n, cfg.channels(), &mut rng)?;
    let mut p = AttentionParams::random(cfg.channels(), &mut rng);
    for (name, data) in p.tensors_mut() {
        if name.starts_with("b_") {
            data.iter_mut().for_each(|x| *x = rng.uniform(-0.5, 0.5));
        }
    }
    let (f, coords, _) = v.into_parts();
    Ok((f, coords, p))
}

pub fn dense_oracle() -> Outcome {
    run("dense_oracle", || {
        let dims = [16, 16, 4];
        let mut worst = 0.0f64;
        for g in [64, 100] {
            let cfg = AttentionConfig::new(16, 4, g)?;
            let (f, coords, p) = attention_instance(64, dims, &cfg, 13)?;
            let got = group_attention(&f, &coords, dims, &cfg, &p)?;
            let want = dense_attention(&f, &coords, dims, &cfg, &p);
            worst = worst.max(got.max_abs_diff(&want));
        }
        Ok((worst <= 1e-10, format!("max_abs_diff={worst:e} tol=1e-10")))
    })
}

pub fn softmax_normalization() -> Outcome {
    run("softmax_normalization", || {
        let dims = [8, 8, 1];
        let cfg = AttentionConfig::new(8, 2, 6)?;
        let (f, coords, p) = attention_instance(17, dims, &cfg, 14)?;
        let (_, cache) = group_attention_forward(&f, &coords, dims, &cfg, &p)?;
        let mask = cache.mask().to_vec();
        let g = cfg.group_size();
        let mut worst = 0.0f64;
        let mut leaked = false;
        for group in 0..mask.len() / g {
            for head in 0..cfg.heads() {
                for q in (0..g).filter(|&q| mask[group * g + q]) {
                    let row = cache.probs(group, head, q);
                    let sum: f64 = row.iter().sum();
                    worst = worst.max((sum - 1.0).abs());
                    leaked |= row.iter().enumerate().any(|(k, &w)| !mask[group * g + k] && w != 0.0);
                }
            }
        }
        Ok((
            worst <= 1e-12 && !leaked,
            format!("max_row_sum_error={worst:e} padding_weight_nonzero={leaked}"),
        ))
    })
}

/// Garbage in padding rows, or a whole extra padding group, must not move
/// any valid output bit.
pub fn padding_neutrality() -> Outcome {
    run("padding_neutrality", || {
        let cfg = AttentionConfig::new(8, 2, 8)?;
        let (f, _, p) = attention_instance(10, [8, 8, 1], &cfg, 15)?;
        let base = GroupBatch::pack(&f, 8);
        let want = base.unpack(&attend_batch(&base, &cfg, &p)?);

        let mut rng = SeededRng::new(16);
        let mut data = Matrix::zeros(24, 8);
        let mask: Vec<bool> = (0..24).map(|r| r < 10).collect();
        for (r, &valid) in mask.iter().enumerate() {
            if valid {
                data.row_mut(r).copy_from_slice(f.row(r));
            } else {
                data.row_mut(r).iter_mut().for_each(|x| *x = rng.uniform(-1e3, 1e3));
            }
        }
        let noisy = GroupBatch::from_parts(data, mask, 8)?;
        let got = noisy.unpack(&attend_batch(&noisy, &cfg, &p)?);
        let same = bits_equal(got.as_slice(), want.as_slice());
        Ok((same, format!("valid_rows_bitwise_equal={same}")))
    })
}

pub fn group_isolation() -> Outcome {
    run("group_isolation", || {
        let dims = [8, 8, 2];
        let cfg = AttentionConfig::new(16, 4, 8)?;
        let n = 36;
        let (f, coords, p) = attention_instance(n, dims, &cfg, 17)?;
        let (out, cache) = group_attention_forward(&f, &coords, dims, &cfg, &p)?;
        let ones = Matrix::from_fn(n, cfg.channels(), |_, _| 1.0);
        let (dx, _) = group_attention_backward(&cache, &p, &ones)?;
        let g = cfg.group_size();
        let mut violations = 0usize;
        for t in 0..n {
            let mut f2 = f.clone();
            f2.row_mut(t).iter_mut().for_each(|x| *x += 0.75);
            let (out2, cache2) = group_attention_forward(&f2, &coords, dims, &cfg, &p)?;
            let (dx2, _) = group_attention_backward(&cache2, &p, &ones)?;
            for r in (0..n).filter(|r| r / g != t / g) {
                if !bits_equal(out.row(r), out2.row(r)) || !bits_equal(dx.row(r), dx2.row(r)) {
                    violations += 1;
                }
            }
        }
        Ok((violations == 0, format!("perturbed_tokens={n} rows_changed_outside_group={violations}")))
    })
}

/// Relative error used by the gradient check: `|a - n| / max(|a|, |n|)`,
/// with the denominator floored at `GRAD_FLOOR`. Some gradients are zero by
/// construction (a key bias shifts every logit of a query equally), and
/// there the central difference returns pure roundoff, around 1e-11 at
/// h = 1e-5; the floor judges those entries on absolute error instead.
pub const GRAD_FLOOR: f64 = 1e-4;

pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradientReport {
    pub checked: usize,
    /// Entries where both gradients were below `GRAD_FLOOR`.
    pub floored: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Analytic gradients of `loss = sum(upstream * F_hat)` against central
/// differences with step `h`, over every parameter entry and every input
/// feature.
pub fn gradient_report(
    f: &Matrix<f64>,
    coords: &[[u32; 3]],
    dims: [u32; 3],
    cfg: &AttentionConfig,
    params: &AttentionParams<f64>,
    upstream: &Matrix<f64>,
    h: f64,
) -> Result<GradientReport> {
    let loss = |f: &Matrix<f64>, p: &AttentionParams<f64>| -> Result<f64> {
        let out = group_attention(f, coords, dims, cfg, p)?;
        Ok(out.as_slice().iter().zip(upstream.as_slice()).map(|(a, b)| a * b).sum())
    };
    let (_, cache) = group_attention_forward(f, coords, dims, cfg, params)?;
    let (dx, grads) = group_attention_backward(&cache, params, upstream)?;

    let mut report = GradientReport {
        checked: 0,
        floored: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    let mut record = |what: String, a: f64, n: f64| {
        let e = gradient_error(a, n);
        report.checked += 1;
        if a.abs().max(n.abs()) < GRAD_FLOOR {
            report.floored += 1;
        }
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = e;
            report.worst = format!("{what} analytic={a:e} numeric={n:e}");
        }
    };

    let analytic: Vec<(&str, Vec<f64>)> = grads.tensors().into_iter().map(|(n, _, d)| (n, d.to_vec())).collect();
    for (t, (name, a)) in analytic.iter().enumerate() {
        for (i, &ai) in a.iter().enumerate() {
            let mut p = params.clone();
            let mut flat = p.tensors_mut().swap_remove(t).1.to_vec();
            let mut err = None;
            let num = central_difference(&mut flat, i, h, |x| {
                p.tensors_mut().swap_remove(t).1.copy_from_slice(x);
                loss(f, &p).unwrap_or_else(|e| {
                    err = Some(e);
                    f64::NAN
                })
            });
            if let Some(e) = err {
                return Err(e);
            }
            record(format!("{name}[{i}]"), ai, num);
        }
    }
    let mut flat = f.as_slice().to_vec();
    for i in 0..flat.len() {
        let mut err = None;
        let num = central_difference(&mut flat, i, h, |x| {
            let m = Matrix::from_vec(f.rows(), f.cols(), x.to_vec()).expect("same shape");
            loss(&m, params).unwrap_or_else(|e| {
                err = Some(e);
                f64::NAN
            })
        });
        if let Some(e) = err {
            return Err(e);
        }
        record(format!("input[{i}]"), dx.as_slice()[i], num);
    }
    Ok(report)
}

pub fn gradient_check() -> Outcome {
    run("gradient_check", || {
        let dims = [4, 4, 4];
        let cfg = AttentionConfig::new(4, 2, 4)?;
        let (f, coords, p) = attention_instance(8, dims, &cfg, 18)?;
        let ones = Matrix::from_fn(8, 4, |_, _| 1.0);
        let r = gradient_report(&f, &coords, dims, &cfg, &p, &ones, 1e-5)?;
        Ok((
            r.max_rel_error < 1e-5,
            format!(
                "checked={} floored={} max_rel_error={:e} tol=1e-5 worst={}",
                r.checked, r.floored, r.max_rel_error, r.worst
            ),
        ))
    })
    .with_budget(Duration::from_secs(10))
}

/// The configuration the encoder-level criteria run at: library defaults
/// (C=128, H=8, G=128, nuScenes grid).
fn encoder_setup(in_channels: usize, n: usize, seed: u64, mode: InitMode) -> Result<(VoxelSet, EncoderParams<f64>)> {
    let cfg = RunConfig::default();
    let grid = cfg.grid;
    let v = random_voxel_set(&grid, n, in_channels, &mut SeededRng::new(seed))?;
    let params = EncoderParams::generate(cfg.encoder_config(grid.dims())?, in_channels, seed, mode);
    Ok((v, params))
}

pub fn encoder_identity() -> Outcome {
    run("encoder_identity", || {
        let (v, params) = encoder_setup(128, 500, 19, InitMode::Identity)?;
        let out = encoder_forward(&v, &params)?;
        let same = bits_equal(out.features().as_slice(), v.features().as_slice()) && out.coords() == v.coords();
        Ok((same, format!("voxels=500 layers=16 bitwise_identity={same}")))
    })
}

fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| SegtError::config("threads", e.to_string()))?;
    Ok(pool.install(f))
}

pub fn permutation_invariance() -> Outcome {
    run("permutation_invariance", || {
        let (v, params) = encoder_setup(5, 2000, 20, InitMode::Random)?;
        let mut perm: Vec<usize> = (0..v.len()).collect();
        SeededRng::new(21).shuffle(&mut perm);
        let shuffled = v.reordered(&perm);
        let (a, b) = single_threaded(|| -> Result<_> {
            Ok((encoder_forward(&v, &params)?, encoder_forward(&shuffled, &params)?))
        })??;
        let by_coord: HashMap<[u32; 3], usize> = b.coords().iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let mismatched = a
            .coords()
            .iter()
            .enumerate()
            .filter(|&(i, c)| by_coord.get(c).map_or(true, |&j| !bits_equal(a.features().row(i), b.features().row(j))))
            .count();
        Ok((mismatched == 0, format!("voxels=2000 layers=16 rows_mismatched={mismatched}")))
    })
}

pub fn strategy_sensitivity() -> Outcome {
    run("strategy_sensitivity", || {
        let (v, params) = encoder_setup(5, 2000, 20, InitMode::Random)?;
        let alternating = encoder_forward_with(&v, &params, &default_schedule(), |_, _| {})?;
        let plus_only = vec![Strategy::Plus; default_schedule().len()];
        let same_strategy = encoder_forward_with(&v, &params, &plus_only, |_, _| {})?;
        let diff = alternating.features().max_abs_diff(same_strategy.features());
        Ok((diff > 1e-6, format!("max_abs_diff={diff:e} threshold=1e-6")))
    })
}

/// Dyadic features (multiples of 2^-10 in [-1, 1]) on a multi-layer grid,
/// so every partial sum is exact and stacked voxels really add.
pub fn bev_conservation() -> Outcome {
    run("bev_conservation", || {
        let grid = GridSpec::from_dims([64, 64, 8])?;
        let mut rng = SeededRng::new(22);
        let v = random_voxel_set(&grid, 5000, 6, &mut rng)?;
        let f = v.features().as_slice().iter().map(|x| (x * 1024.0).round() / 1024.0).collect();
        let v = v.with_features(Matrix::from_vec(v.len(), 6, f)?)?;
        let bev = bev_scatter(&v);
        let want = crate::tensor::column_sums(v.features());
        let got = bev.channel_sums();
        let same = bits_equal(&got, &want);
        Ok((same, format!("voxels=5000 channels=6 sums_equal={same}")))
    })
}

/// Soft budget for serializing 100k voxels on one thread; only twice the
/// budget counts as a failure.
pub const SERIALIZE_BUDGET: Duration = Duration::from_millis(100);

pub fn serialize_timing(n: usize, repeat: usize) -> Result<Timing> {
    let grid = GridSpec::nuscenes();
    let cfg = default_expansion(&grid)?;
    let v = random_voxel_set(&grid, n, 1, &mut SeededRng::new(23))?;
    let mut samples = single_threaded(|| time_repeated(repeat, || serialize(&v, Strategy::Plus, &cfg).map(drop)))??;
    Ok(Timing::from_samples("serialize", &mut samples))
}

pub fn throughput() -> Outcome {
    run("throughput", || {
        let t = serialize_timing(100_000, 7)?;
        let ms = t.median.as_secs_f64() * 1e3;
        Ok((
            t.median < 2 * SERIALIZE_BUDGET,
            format!(
                "voxels=100000 median_ms={ms:.2} min_ms={:.2} within_budget={}",
                t.min.as_secs_f64() * 1e3,
                t.median < SERIALIZE_BUDGET
            ),
        ))
    })
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

impl Outcome {
    fn with_budget(mut self, budget: Duration) -> Self {
        if self.elapsed >= budget {
            self.passed = false;
            self.detail.push_str(&format!(" over_budget_ms={}", budget.as_millis()));
        }
        self
    }
}
