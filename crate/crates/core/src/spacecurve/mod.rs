//! Conjugate Hilbert expansion: ordering voxels along one of two
//! rotation-conjugate space-filling curves, and moving features between the
//! voxel field and the ordered field.

mod hilbert;
mod plan;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

pub use hilbert::{hilbert_decode, hilbert_encode};
#[doc(hidden)]
pub use hilbert::set_curve_fault;
pub use plan::{gather, scatter, serialize, serialize_coords, SerializationPlan};

use crate::error::{Result, SegtError};

/// Which of the two conjugate expansions to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Hilbert order in the voxel frame.
    Plus,
    /// Hilbert order after a quarter turn of the XY frame.
    Minus,
}

impl Strategy {
    pub fn symbol(self) -> char {
        match self {
            Strategy::Plus => '+',
            Strategy::Minus => '-',
        }
    }

    pub fn conjugate(self) -> Strategy {
        match self {
            Strategy::Plus => Strategy::Minus,
            Strategy::Minus => Strategy::Plus,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

impl FromStr for Strategy {
    type Err = SegtError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "+" | "plus" | "Plus" => Ok(Strategy::Plus),
            "-" | "minus" | "Minus" => Ok(Strategy::Minus),
            other => Err(SegtError::config(
                "strategy",
                format!("`{other}` is not one of +, -"),
            )),
        }
    }
}

/// Global and local expansion levels. Voxel coordinates are padded to a cube
/// of side `2^(l_glb + l_lcl)`; the top `l_glb` bits of each axis pick a
/// coarse cell, the low `l_lcl` bits the position inside it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ExpansionConfig {
    l_glb: u32,
    l_lcl: u32,
}

pub const MAX_LEVEL: u32 = 16;

impl ExpansionConfig {
    pub fn new(l_glb: u32, l_lcl: u32) -> Result<Self> {
        if !(1..=MAX_LEVEL).contains(&l_glb) {
            return Err(SegtError::config("l_glb", format!("{l_glb} not in [1, {MAX_LEVEL}]")));
        }
        if l_lcl > MAX_LEVEL {
            return Err(SegtError::config("l_lcl", format!("{l_lcl} not in [0, {MAX_LEVEL}]")));
        }
        Ok(ExpansionConfig { l_glb, l_lcl })
    }

    /// `l_lcl` chosen so the curve exactly covers the largest serialized axis:
    /// `max(0, ceil(log2(max_dim)) - l_glb)`. 384 needs 9 bits, so
    /// `l_glb = 6` gives `l_lcl = 3`.
    pub fn for_dims(l_glb: u32, dims: [u32; 3]) -> Result<Self> {
        let max_dim = serialized_axes(dims).map(|a| dims[a]).max().unwrap_or(1);
        let need = bits_for(max_dim);
        Self::new(l_glb, need.saturating_sub(l_glb))
    }

    pub fn l_glb(&self) -> u32 {
        self.l_glb
    }

    pub fn l_lcl(&self) -> u32 {
        self.l_lcl
    }

    pub fn total_bits(&self) -> u32 {
        self.l_glb + self.l_lcl
    }

    /// Side of the padded cube, `2^(l_glb + l_lcl)`.
    pub fn padded_side(&self) -> u64 {
        1u64 << self.total_bits()
    }

    pub fn check_covers(&self, dims: [u32; 3]) -> Result<()> {
        let side = self.padded_side();
        for a in serialized_axes(dims) {
            if dims[a] as u64 > side {
                return Err(SegtError::config(
                    "l_glb",
                    format!(
                        "levels {}+{} cover {side} voxels but axis {} spans {}",
                        self.l_glb,
                        self.l_lcl,
                        ["x", "y", "z"][a],
                        dims[a]
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Ceil(log2(n)), with 1 -> 0.
fn bits_for(n: u32) -> u32 {
    if n <= 1 {
        0
    } else {
        32 - (n - 1).leading_zeros()
    }
}

/// Curve dimension for a lattice: 2D over (x, y) when there is a single z
/// layer, 3D otherwise.
pub fn curve_dims(dims: [u32; 3]) -> usize {
    if dims[2] == 1 {
        2
    } else {
        3
    }
}

fn serialized_axes(dims: [u32; 3]) -> std::ops::Range<usize> {
    0..curve_dims(dims)
}

/// Frame transform behind each strategy. `Plus` is the identity; `Minus`
/// turns the XY plane a quarter: `x' = side - 1 - y, y' = x, z' = z`.
pub fn apply_strategy(coord: [u32; 3], strategy: Strategy, cfg: &ExpansionConfig) -> Result<[u64; 3]> {
    let side = cfg.padded_side();
    if coord.iter().any(|&c| c as u64 >= side) {
        return Err(SegtError::domain(format!(
            "coordinate {coord:?} outside the padded cube of side {side}"
        )));
    }
    Ok(transform(coord, strategy, side))
}

#[inline]
pub(crate) fn transform(c: [u32; 3], strategy: Strategy, side: u64) -> [u64; 3] {
    let (x, y, z) = (c[0] as u64, c[1] as u64, c[2] as u64);
    match strategy {
        Strategy::Plus => [x, y, z],
        Strategy::Minus => [side - 1 - y, x, z],
    }
}

/// Writes the whole curve at `level` as CSV `index,x,y,z` (z is 0 in 2D).
pub fn write_curve_csv<W: Write>(out: &mut W, level: u32, d: usize) -> Result<()> {
    writeln!(out, "index,x,y,z")?;
    let bits = d as u64 * level as u64;
    if bits >= 64 {
        return Err(SegtError::domain(format!("curve of {bits} bits is too long to dump")));
    }
    for h in 0..(1u64 << bits) {
        let c = hilbert_decode(h, level, d)?;
        writeln!(out, "{h},{},{},{}", c[0], c[1], c[2])?;
    }
    Ok(())
}
