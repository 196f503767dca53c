//! C ABI over `segt`.
//!
//! Every fallible call returns a [`SegtStatus`] and writes results through
//! out-pointers. On failure, [`segt_last_error`] holds a message for the
//! calling thread. Objects are opaque handles created by `segt_*_new`,
//! `segt_*_load` and friends, and released with the matching `segt_*_free`.
//! Pointers returned by accessors borrow from their handle and stay valid
//! until it is freed.
//!
//! Panics never cross the boundary; they surface as
//! [`SegtStatus::Panic`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use segt::encoder::encoder_forward;
use segt::model_io::{init_params, load_params, read_voxels, save_params, write_bev, write_voxels, AnyParams};
use segt::spacecurve::{hilbert_decode, hilbert_encode};
use segt::voxelizer::voxelize_with_stats;
use segt::{bev_scatter, serialize, BevGrid, InitMode, Matrix, PointCloud, RunConfig, SegtError, SerializationPlan, Strategy, VoxelSet};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Ingest = 4,
    Parse = 5,
    Config = 6,
    Domain = 7,
    Shape = 8,
    NonFinite = 9,
    Format = 10,
    Truncated = 11,
    Panic = 12,
}

pub const SEGT_FORMAT_BIN: u32 = 0;
pub const SEGT_FORMAT_CSV: u32 = 1;

/// Hilbert expansion in the given orientation.
pub const SEGT_STRATEGY_PLUS: u32 = 0;
/// The conjugate orientation.
pub const SEGT_STRATEGY_MINUS: u32 = 1;

pub const SEGT_INIT_RANDOM: u32 = 0;
/// Residual branches start at zero, so the encoder passes features through.
pub const SEGT_INIT_IDENTITY: u32 = 1;

/// Parsed run configuration.
pub struct SegtConfig(RunConfig);

/// Sparse voxels: integer coordinates plus an `n x channels` feature matrix.
pub struct SegtVoxelSet(VoxelSet);

/// Serialization order of a voxel set.
pub struct SegtPlan(SerializationPlan);

/// Encoder weights with the configuration they were built for.
pub struct SegtEncoder {
    cfg: RunConfig,
    params: AnyParams,
}

/// Dense bird's-eye-view grid, `[x][y][channel]`.
pub struct SegtBev(BevGrid);

struct Failure {
    status: SegtStatus,
    message: String,
}

impl Failure {
    fn new(status: SegtStatus, message: impl Into<String>) -> Self {
        Failure {
            status,
            message: message.into(),
        }
    }

    fn null(name: &str) -> Self {
        Failure::new(SegtStatus::NullPointer, format!("`{name}` is null"))
    }

    fn invalid(message: impl Into<String>) -> Self {
        Failure::new(SegtStatus::InvalidArgument, message)
    }
}

impl From<SegtError> for Failure {
    fn from(e: SegtError) -> Self {
        let status = match &e {
            SegtError::Ingest { .. } => SegtStatus::Ingest,
            SegtError::Domain(_) => SegtStatus::Domain,
            SegtError::Config { .. } => SegtStatus::Config,
            SegtError::Parse { .. } => SegtStatus::Parse,
            SegtError::Shape(_) => SegtStatus::Shape,
            SegtError::NonFinite { .. } => SegtStatus::NonFinite,
            SegtError::Format { .. } => SegtStatus::Format,
            SegtError::Truncated { .. } => SegtStatus::Truncated,
            SegtError::Io(_) => SegtStatus::Io,
        };
        Failure::new(status, e.to_string())
    }
}

type FfiResult<T> = Result<T, Failure>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: Option<String>) {
    let message = message.map(|m| CString::new(m.replace('\0', " ")).unwrap_or_default());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = message);
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> SegtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error(None);
            SegtStatus::Ok
        }
        Ok(Err(fail)) => {
            set_last_error(Some(fail.message));
            fail.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(Some(format!("panic: {msg}")));
            SegtStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| Failure::null(name))
}

/// Nulls `*out` up front so callers never see a stale handle on failure.
unsafe fn out_slot<'a, T>(out: *mut *mut T, name: &str) -> FfiResult<&'a mut *mut T> {
    let slot = out.as_mut().ok_or_else(|| Failure::null(name))?;
    *slot = ptr::null_mut();
    Ok(slot)
}

unsafe fn string<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure::null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::invalid(format!("`{name}` is not valid UTF-8")))
}

unsafe fn path(p: *const c_char, name: &str) -> FfiResult<PathBuf> {
    string(p, name).map(PathBuf::from)
}

/// `len` elements at `p`; a null `p` is accepted only when `len` is zero.
unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn checked_len(a: usize, b: usize, name: &str) -> FfiResult<usize> {
    a.checked_mul(b)
        .ok_or_else(|| Failure::invalid(format!("`{name}` length overflows")))
}

fn io_error(p: &std::path::Path, e: std::io::Error) -> Failure {
    Failure::new(SegtStatus::Io, format!("{}: {e}", p.display()))
}

fn read_file(p: &std::path::Path) -> FfiResult<Vec<u8>> {
    std::fs::read(p).map_err(|e| io_error(p, e))
}

fn write_file(p: &std::path::Path, f: impl FnOnce(&mut BufWriter<File>) -> segt::Result<()>) -> FfiResult<()> {
    let file = File::create(p).map_err(|e| io_error(p, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush().map_err(|e| io_error(p, e))
}

fn strategy(code: u32) -> FfiResult<Strategy> {
    match code {
        SEGT_STRATEGY_PLUS => Ok(Strategy::Plus),
        SEGT_STRATEGY_MINUS => Ok(Strategy::Minus),
        _ => Err(Failure::invalid(format!("unknown strategy {code}"))),
    }
}

fn boxed<T>(slot: &mut *mut T, value: T) {
    *slot = Box::into_raw(Box::new(value));
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn segt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failed call on this thread, or null if the
/// last status-returning call succeeded. Valid until the next such call on
/// this thread.
#[no_mangle]
pub extern "C" fn segt_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

// ---- configuration ----

#[no_mangle]
pub unsafe extern "C" fn segt_config_default(out: *mut *mut SegtConfig) -> SegtStatus {
    guard(|| {
        boxed(out_slot(out, "out")?, SegtConfig(RunConfig::default()));
        Ok(())
    })
}

/// Parses `key = value` configuration text.
#[no_mangle]
pub unsafe extern "C" fn segt_config_parse(text: *const c_char, out: *mut *mut SegtConfig) -> SegtStatus {
    guard(|| {
        let slot = out_slot(out, "out")?;
        let cfg = RunConfig::parse(string(text, "text")?)?;
        boxed(slot, SegtConfig(cfg));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn segt_config_load(file: *const c_char, out: *mut *mut SegtConfig) -> SegtStatus {
    guard(|| {
        let slot = out_slot(out, "out")?;
        let p = path(file, "path")?;
        let text = String::from_utf8(read_file(&p)?)
            .map_err(|_| Failure::new(SegtStatus::Parse, format!("{}: not UTF-8", p.display())))?;
        boxed(slot, SegtConfig(RunConfig::parse(&text)?));
        Ok(())
    })
}

/// Writes the canonical text form into `buf` (truncated to `cap - 1` bytes
/// plus a NUL) and its full length, excluding the NUL, into `*len`. Pass a
/// null `buf` with `cap == 0` to query the length.
#[no_mangle]
pub unsafe extern "C" fn segt_config_to_text(
    cfg: *const SegtConfig,
    buf: *mut c_char,
    cap: usize,
    len: *mut usize,
) -> SegtStatus {
    guard(|| {
        let text = borrow(cfg, "cfg")?.0.to_text();
        if let Some(len) = len.as_mut() {
            *len = text.len();
        }
        if cap > 0 {
            if buf.is_null() {
                return Err(Failure::null("buf"));
            }
            let n = text.len().min(cap - 1);
            ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn segt_config_free(cfg: *mut SegtConfig) {
    free(cfg);
}

// ---- voxels ----

/// Voxelizes `n_points` interleaved records of `stride` doubles
/// (x, y, z, then `stride - 3` extras) on the configuration's grid.
/// `dropped`, if non-null, receives the number of points outside the grid.
#[no_mangle]
pub unsafe extern "C" fn segt_voxelize_points(
    cfg: *const SegtConfig,
    points: *const f64,
    n_points: usize,
    stride: usize,
    out: *mut *mut SegtVoxelSet,
    dropped: *mut usize,
) -> SegtStatus {
    guard(|| {
        let slot = out_slot(out, "out")?;
        let cfg = &borrow(cfg, "cfg")?.0;
        let values = slice(points, checked_len(n_points, stride, "points")?, "points")?;
        let cloud = PointCloud::from_flat(values.to_vec(), stride)?;
        let (voxels, stats) = voxelize_with_stats(&cloud, &cfg.grid)?;
        if let Some(d) = dropped.as_mut() {
            *d = stats.dropped;
        }
        boxed(slot, SegtVoxelSet(voxels));
        Ok(())
    })
}

/// Reads a point file (`SEGT_FORMAT_BIN` with the configuration's stride,
/// or `SEGT_FORMAT_CSV`) and voxelizes it.
#[no_mangle]
pub unsafe extern "C" fn segt_voxelize_file(
    cfg: *const SegtConfig,
    file: *const c_char,
    format: u32,
    out: *mut *mut SegtVoxelSet,
    dropped: *mut usize,
) -> SegtStatus {
    guard(|| {
        let slot = out_slot(out, "out")?;
        let cfg = &borrow(cfg, "cfg")?.0;
        let p = path(file, "path")?;
        let reader = BufReader::new(File::open(&p).map_err(|e| io_error(&p, e))?);
        let cloud = match format {
            SEGT_FORMAT_BIN => PointCloud::read_bin(reader, cfg.stride)?,
            SEGT_FORMAT_CSV => PointCloud::read_csv(reader)?,
            _ => return Err(Failure::invalid(format!("unknown point format {format}"))),
        };
        let (voxels, stats) = voxelize_with_stats(&cloud, &cfg.grid)?;
        if let Some(d) = dropped.as_mut() {
            *d = stats.dropped;
        }
        boxed(slot, SegtVoxelSet(voxels));
        Ok(())
    })
}

/// Builds a voxel set on the configuration's grid from `n` coordinate
/// triples and an `n x channels` row-major feature block. Coordinates must be
/// distinct and inside the grid.
#[no_mangle]
pub unsafe extern "C" fn segt_voxelset_new(
    cfg: *const SegtConfig,
    coords: *const u32,
    features: *const f64,
    n: usize,
    channels: usize,
    out: *mut *mut SegtVoxelSet,
) -> SegtStatus {
    guard(|| {
        let slot = out_slot(out, "out")?;
        let cfg = &borrow(cfg, "cfg")?.0;
        let flat = slice(coords, checked_len(n, 3, "coords")?, "coords")?;
        let f = slice(features, checked_len(n, channels, "features")?, "features")?;
        let coords = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let features = Matrix::from_vec(n, channels, f.to_vec())?;
        boxed(slot, SegtVoxelSet(VoxelSet::new(features, coords, cfg.grid)?));
        Ok(())
    })
}

/// Reads a `SEGV` voxel container.
#[no_mangle]
pub unsafe extern "C" fn segt_voxelset_read(file: *const c_char, out: *mut *mut SegtVoxelSet) -> SegtStatus {
    guard(|| {
        let slot = out_slot(out, "out")?;
        let bytes = read_file(&path(file, "path")?)?;
        boxed(slot, SegtVoxelSet(read_voxels(&bytes)?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn segt_voxelset_write(voxels: *const SegtVoxelSet, file: *const c_char) -> SegtStatus {
    guard(|| {
        let v = &borrow(voxels, "voxels")?.0;
        write_file(&path(file, "path")?, |w| write_voxels(w, v))
    })
}

/// Number of voxels; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn segt_voxelset_len(voxels: *const SegtVoxelSet) -> usize {
    voxels.as_ref().map_or(0, |v| v.0.len())
}

#[no_mangle]
pub unsafe extern "C" fn segt_voxelset_channels(voxels: *const SegtVoxelSet) -> usize {
    voxels.as_ref().map_or(0, |v| v.0.channels())
}

/// Grid extent in voxels, written to `dims[0..3]`.
#[no_mangle]
pub unsafe extern "C" fn segt_voxelset_dims(voxels: *const SegtVoxelSet, dims: *mut u32) -> SegtStatus {
    guard(|| {
        let v = &borrow(voxels, "voxels")?.0;
        if dims.is_null() {
            return Err(Failure::null("dims"));
        }
        ptr::copy_nonoverlapping(v.grid().dims().as_ptr(), dims, 3);
        Ok(())
    })
}

/// `len * 3` coordinates, row-major. Borrowed from the handle.
#[no_mangle]
pub unsafe extern "C" fn segt_voxelset_coords(voxels: *const SegtVoxelSet) -> *const u32 {
    voxels.as_ref().map_or(ptr::null(), |v| v.0.coords().as_ptr().cast())
}

/// `len * channels` features, row-major. Borrowed from the handle.
#[no_mangle]
pub unsafe extern "C" fn segt_voxelset_features(voxels: *const SegtVoxelSet) -> *const f64 {
    voxels.as_ref().map_or(ptr::null(), |v| v.0.features().as_slice().as_ptr())
}

#[no_mangle]
pub unsafe extern "C" fn segt_voxelset_free(voxels: *mut SegtVoxelSet) {
    free(voxels);
}

// ---- space-filling curve ----

/// Hilbert index of a `d`-dimensional point (`d` is 2 or 3) at `level` bits
/// per axis.
#[no_mangle]
pub unsafe extern "C" fn segt_hilbert_encode(coord: *const u32, d: usize, level: u32, index: *mut u64) -> SegtStatus {
    guard(|| {
        let c = slice(coord, d, "coord")?;
        let out = index.as_mut().ok_or_else(|| Failure::null("index"))?;
        *out = hilbert_encode(c, level)?;
        Ok(())
    })
}

/// Inverse of `segt_hilbert_encode`; writes `d` coordinates to `coord`.
#[no_mangle]
pub unsafe extern "C" fn segt_hilbert_decode(index: u64, level: u32, d: usize, coord: *mut u32) -> SegtStatus {
    guard(|| {
        if coord.is_null() {
            return Err(Failure::null("coord"));
        }
        let p = hilbert_decode(index, level, d)?;
        ptr::copy_nonoverlapping(p.as_ptr(), coord, d);
        Ok(())
    })
}

/// Orders `voxels` along the two-level curve picked by `strategy`, with the
/// expansion levels from `cfg`.
#[no_mangle]
pub unsafe extern "C" fn segt_serialize(
    cfg: *const SegtConfig,
    voxels: *const SegtVoxelSet,
    strategy_code: u32,
    out: *mut *mut SegtPlan,
) -> SegtStatus {
    guard(|| {
        let slot = out_slot(out, "out")?;
        let cfg = &borrow(cfg, "cfg")?.0;
        let v = &borrow(voxels, "voxels")?.0;
        let expansion = cfg.expansion(v.grid().dims())?;
        boxed(slot, SegtPlan(serialize(v, strategy(strategy_code)?, &expansion)?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn segt_plan_len(plan: *const SegtPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.0.len())
}

/// `order[rank]` is the voxel row at that rank. Borrowed from the handle.
#[no_mangle]
pub unsafe extern "C" fn segt_plan_order(plan: *const SegtPlan) -> *const usize {
    plan.as_ref().map_or(ptr::null(), |p| p.0.order().as_ptr())
}

/// `inverse[row]` is the rank of that voxel row. Borrowed from the handle.
#[no_mangle]
pub unsafe extern "C" fn segt_plan_inverse(plan: *const SegtPlan) -> *const usize {
    plan.as_ref().map_or(ptr::null(), |p| p.0.inverse().as_ptr())
}

/// Copies the per-row global and local curve keys into two arrays of
/// `segt_plan_len` entries each. Either array may be null.
#[no_mangle]
pub unsafe extern "C" fn segt_plan_keys(plan: *const SegtPlan, global: *mut u64, local: *mut u64) -> SegtStatus {
    guard(|| {
        let p = &borrow(plan, "plan")?.0;
        for (i, &(g, l)) in p.keys().iter().enumerate() {
            if !global.is_null() {
                *global.add(i) = g;
            }
            if !local.is_null() {
                *local.add(i) = l;
            }
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn segt_plan_free(plan: *mut SegtPlan) {
    free(plan);
}

// ---- encoder ----

/// Seeded weights for `cfg` (seed, width, heads, input channels and
/// precision all come from it).
#[no_mangle]
pub unsafe extern "C" fn segt_encoder_new(cfg: *const SegtConfig, init: u32, out: *mut *mut SegtEncoder) -> SegtStatus {
    guard(|| {
        let slot = out_slot(out, "out")?;
        let cfg = borrow(cfg, "cfg")?.0.clone();
        let mode = match init {
            SEGT_INIT_RANDOM => InitMode::Random,
            SEGT_INIT_IDENTITY => InitMode::Identity,
            _ => return Err(Failure::invalid(format!("unknown init mode {init}"))),
        };
        let params = init_params(&cfg, mode)?;
        boxed(slot, SegtEncoder { cfg, params });
        Ok(())
    })
}

/// Reads a `SEGW` weights file.
#[no_mangle]
pub unsafe extern "C" fn segt_encoder_load(file: *const c_char, out: *mut *mut SegtEncoder) -> SegtStatus {
    guard(|| {
        let slot = out_slot(out, "out")?;
        let (cfg, params) = load_params(&read_file(&path(file, "path")?)?)?;
        boxed(slot, SegtEncoder { cfg, params });
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn segt_encoder_save(encoder: *const SegtEncoder, file: *const c_char) -> SegtStatus {
    guard(|| {
        let e = borrow(encoder, "encoder")?;
        write_file(&path(file, "path")?, |w| save_params(w, &e.params, &e.cfg))
    })
}

/// Channels the encoder expects on its input voxels.
#[no_mangle]
pub unsafe extern "C" fn segt_encoder_in_channels(encoder: *const SegtEncoder) -> usize {
    encoder.as_ref().map_or(0, |e| match &e.params {
        AnyParams::F32(p) => p.in_channels(),
        AnyParams::F64(p) => p.in_channels(),
    })
}

#[no_mangle]
pub unsafe extern "C" fn segt_encoder_channels(encoder: *const SegtEncoder) -> usize {
    encoder.as_ref().map_or(0, |e| match &e.params {
        AnyParams::F32(p) => p.channels(),
        AnyParams::F64(p) => p.channels(),
    })
}

/// Runs every layer over `voxels`; the result keeps the input's row order.
#[no_mangle]
pub unsafe extern "C" fn segt_encoder_forward(
    encoder: *const SegtEncoder,
    voxels: *const SegtVoxelSet,
    out: *mut *mut SegtVoxelSet,
) -> SegtStatus {
    guard(|| {
        let slot = out_slot(out, "out")?;
        let e = borrow(encoder, "encoder")?;
        let v = &borrow(voxels, "voxels")?.0;
        let encoded = match &e.params {
            AnyParams::F32(p) => encoder_forward(v, p)?,
            AnyParams::F64(p) => encoder_forward(v, p)?,
        };
        boxed(slot, SegtVoxelSet(encoded));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn segt_encoder_free(encoder: *mut SegtEncoder) {
    free(encoder);
}

// ---- bird's-eye view ----

/// Sums features over z into a dense `nx x ny x channels` grid.
#[no_mangle]
pub unsafe extern "C" fn segt_bev_scatter(voxels: *const SegtVoxelSet, out: *mut *mut SegtBev) -> SegtStatus {
    guard(|| {
        let slot = out_slot(out, "out")?;
        let v = &borrow(voxels, "voxels")?.0;
        boxed(slot, SegtBev(bev_scatter(v)));
        Ok(())
    })
}

/// Writes `nx`, `ny` and `channels`; any of them may be null.
#[no_mangle]
pub unsafe extern "C" fn segt_bev_shape(bev: *const SegtBev, nx: *mut usize, ny: *mut usize, channels: *mut usize) -> SegtStatus {
    guard(|| {
        let b = &borrow(bev, "bev")?.0;
        for (dst, value) in [(nx, b.nx()), (ny, b.ny()), (channels, b.channels())] {
            if let Some(d) = dst.as_mut() {
                *d = value;
            }
        }
        Ok(())
    })
}

/// `nx * ny * channels` values laid out `[x][y][channel]`. Borrowed from the
/// handle.
#[no_mangle]
pub unsafe extern "C" fn segt_bev_data(bev: *const SegtBev) -> *const f64 {
    bev.as_ref().map_or(ptr::null(), |b| b.0.data().as_ptr())
}

/// Writes a `SEGB` container.
#[no_mangle]
pub unsafe extern "C" fn segt_bev_write(bev: *const SegtBev, file: *const c_char) -> SegtStatus {
    guard(|| {
        let b = &borrow(bev, "bev")?.0;
        write_file(&path(file, "path")?, |w| write_bev(w, b))
    })
}

#[no_mangle]
pub unsafe extern "C" fn segt_bev_free(bev: *mut SegtBev) {
    free(bev);
}
