use std::io::Write;

use super::{ByteReader, FORMAT_VERSION};
use crate::encoder::BevGrid;
use crate::error::{Result, SegtError};
use crate::tensor::Matrix;
use crate::voxelizer::{GridSpec, VoxelSet};

pub const VOXEL_MAGIC: &[u8; 4] = b"SEGV";
pub const BEV_MAGIC: &[u8; 4] = b"SEGB";

/// `SEGV` layout, all little-endian:
///
/// ```text
/// magic  "SEGV"
/// u16    version (1)
/// u64    N voxels
/// u16    C channels
/// u32x3  dims (x, y, z)
/// u32x3  coords, N rows
/// f32    features, N x C row-major
/// ```
///
/// Features are rounded to `f32`; the grid keeps only its dims.
pub fn write_voxels<W: Write>(out: &mut W, voxels: &VoxelSet) -> Result<()> {
    let c = u16::try_from(voxels.channels())
        .map_err(|_| SegtError::shape(format!("{} channels exceed u16", voxels.channels())))?;
    let mut buf = Vec::with_capacity(24 + voxels.len() * (12 + 4 * voxels.channels()));
    buf.extend_from_slice(VOXEL_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(voxels.len() as u64).to_le_bytes());
    buf.extend_from_slice(&c.to_le_bytes());
    for d in voxels.grid().dims() {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for coord in voxels.coords() {
        for v in coord {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &v in voxels.features().as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_voxels(bytes: &[u8]) -> Result<VoxelSet> {
    let mut r = ByteReader::new(bytes, "SEGV");
    r.header(VOXEL_MAGIC)?;
    let n = r.u64()?;
    let c = r.u16()? as usize;
    let dims = [r.u32()?, r.u32()?, r.u32()?];
    r.expect_remaining(n as u128 * (12 + 4 * c as u128))?;
    let n = n as usize;
    let grid = GridSpec::from_dims(dims).map_err(|e| r.bad(e.to_string()))?;
    let mut coords = Vec::with_capacity(n);
    for _ in 0..n {
        coords.push([r.u32()?, r.u32()?, r.u32()?]);
    }
    let raw = r.take(n * c * 4)?;
    let values = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    r.finish()?;
    let features = Matrix::from_vec(n, c, values)?;
    VoxelSet::new(features, coords, grid).map_err(|e| r.bad(e.to_string()))
}

/// `SEGB` layout, all little-endian:
///
/// ```text
/// magic  "SEGB"
/// u16    version (1)
/// u32    nx
/// u32    ny
/// u32    C
/// f32    cells, [x][y][channel] order
/// ```
pub fn write_bev<W: Write>(out: &mut W, bev: &BevGrid) -> Result<()> {
    let mut buf = Vec::with_capacity(18 + bev.data().len() * 4);
    buf.extend_from_slice(BEV_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in [bev.nx(), bev.ny(), bev.channels()] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in bev.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_bev(bytes: &[u8]) -> Result<BevGrid> {
    let mut r = ByteReader::new(bytes, "SEGB");
    r.header(BEV_MAGIC)?;
    let (nx, ny, c) = (r.u32()?, r.u32()?, r.u32()? as usize);
    let count = nx as u128 * ny as u128 * c as u128;
    r.expect_remaining(count * 4)?;
    let raw = r.take(count as usize * 4)?;
    r.finish()?;
    let grid = GridSpec::from_dims([nx, ny, 1]).map_err(|e| r.bad(e.to_string()))?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    BevGrid::from_data(grid, c, data).ok_or_else(|| r.bad("payload size".into()))
}

/// One channel of the occupied cells as CSV `x,y,value`. A cell counts as
/// occupied when any of its channels is nonzero.
pub fn write_bev_csv<W: Write>(out: &mut W, bev: &BevGrid, channel: usize) -> Result<()> {
    if channel >= bev.channels() {
        return Err(SegtError::config(
            "bev_channel",
            format!("{channel} out of range for {} channels", bev.channels()),
        ));
    }
    writeln!(out, "x,y,value")?;
    for x in 0..bev.nx() {
        for y in 0..bev.ny() {
            let cell = bev.cell(x, y);
            if cell.iter().any(|&v| v != 0.0) {
                writeln!(out, "{x},{y},{}", cell[channel])?;
            }
        }
    }
    Ok(())
}
