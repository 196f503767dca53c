//! Hilbert indexing in two and three dimensions.
//!
//! The curve is the Gray-code construction where each sub-cube `w` is entered
//! at corner `entry(w)` and leaves along axis `direction(w)`; the encoder
//! below walks the bit planes from the top, carrying the current (entry,
//! direction) frame. Axis 0 (x) is the most significant bit of each
//! sub-cube label, which fixes the level-1 2D pattern to
//! (0,0) -> (0,1) -> (1,1) -> (1,0).
//!
//! `verify::reference_curve` builds the same curve recursively from
//! transformed copies of the previous level; the two must agree exhaustively.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Result, SegtError};

/// Test hook: when set, the encoder drops the lowest index bit so pairs of
/// cells collide. Only the `selftest --inject-fault curve` path sets it.
static CURVE_FAULT: AtomicBool = AtomicBool::new(false);

#[doc(hidden)]
pub fn set_curve_fault(on: bool) {
    CURVE_FAULT.store(on, Ordering::Relaxed);
}

/// Largest `d * level` that fits an index in `u64`.
const INDEX_BITS: u32 = 64;

#[inline]
fn gray(w: u32) -> u32 {
    w ^ (w >> 1)
}

#[inline]
fn gray_inverse(mut g: u32) -> u32 {
    let mut w = g;
    while g > 1 {
        g >>= 1;
        w ^= g;
    }
    w
}

#[inline]
fn rotl(x: u32, r: u32, n: u32) -> u32 {
    let mask = (1 << n) - 1;
    let r = r % n;
    if r == 0 {
        x & mask
    } else {
        ((x << r) | (x >> (n - r))) & mask
    }
}

#[inline]
fn rotr(x: u32, r: u32, n: u32) -> u32 {
    rotl(x, n - r % n, n)
}

/// Entry corner of sub-cube `w`, as an `n`-bit label.
#[inline]
pub(crate) fn entry(w: u32) -> u32 {
    if w == 0 {
        0
    } else {
        gray(2 * ((w - 1) / 2))
    }
}

/// Axis along which sub-cube `w` is traversed, in `[0, n)`.
#[inline]
pub(crate) fn direction(w: u32, n: u32) -> u32 {
    let trailing_ones = |x: u32| x.trailing_ones();
    if w == 0 {
        0
    } else if w % 2 == 0 {
        trailing_ones(w - 1) % n
    } else {
        trailing_ones(w) % n
    }
}

fn check_shape(d: usize, level: u32) -> Result<u32> {
    if d != 2 && d != 3 {
        return Err(SegtError::domain(format!("curve dimension {d} is not 2 or 3")));
    }
    if d as u32 * level > INDEX_BITS {
        return Err(SegtError::domain(format!(
            "level {level} in {d}D needs {} index bits",
            d as u32 * level
        )));
    }
    Ok(d as u32)
}

/// Hilbert index of `coord` (2 or 3 components) on the curve of side
/// `2^level`. Level 0 is the single-cell curve.
pub fn hilbert_encode(coord: &[u32], level: u32) -> Result<u64> {
    let n = check_shape(coord.len(), level)?;
    if let Some(&c) = coord.iter().find(|&&c| level < 32 && (c as u64) >> level != 0) {
        return Err(SegtError::domain(format!(
            "coordinate {c} outside [0, 2^{level}) in {coord:?}"
        )));
    }
    let mut p = [0u32; 3];
    p[..coord.len()].copy_from_slice(coord);
    Ok(encode_unchecked(p, level, n))
}

/// Inverse of [`hilbert_encode`]. The result always has three slots; for
/// `d = 2` the third is zero.
pub fn hilbert_decode(index: u64, level: u32, d: usize) -> Result<[u32; 3]> {
    let n = check_shape(d, level)?;
    let bits = n * level;
    if bits < 64 && index >> bits != 0 {
        return Err(SegtError::domain(format!(
            "index {index} outside [0, 2^{bits})"
        )));
    }
    Ok(decode_unchecked(index, level, n))
}

#[inline]
pub(crate) fn encode_unchecked(p: [u32; 3], level: u32, n: u32) -> u64 {
    let mut e = 0u32;
    let mut d = 0u32;
    let mut h = 0u64;
    for i in (0..level).rev() {
        let mut l = 0u32;
        for (j, &pj) in p.iter().take(n as usize).enumerate() {
            l |= ((pj >> i) & 1) << (n - 1 - j as u32);
        }
        let w = gray_inverse(rotr(l ^ e, d, n));
        e ^= rotl(entry(w), d, n);
        d = (d + direction(w, n) + 1) % n;
        h = (h << n) | w as u64;
    }
    if CURVE_FAULT.load(Ordering::Relaxed) {
        h &= !1;
    }
    h
}

#[inline]
pub(crate) fn decode_unchecked(h: u64, level: u32, n: u32) -> [u32; 3] {
    let mask = (1u64 << n) - 1;
    let mut e = 0u32;
    let mut d = 0u32;
    let mut p = [0u32; 3];
    for i in (0..level).rev() {
        let w = ((h >> (i * n)) & mask) as u32;
        let l = rotl(gray(w), d, n) ^ e;
        for (j, pj) in p.iter_mut().take(n as usize).enumerate() {
            *pj |= ((l >> (n - 1 - j as u32)) & 1) << i;
        }
        e ^= rotl(entry(w), d, n);
        d = (d + direction(w, n) + 1) % n;
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_one_base_orientation() {
        assert_eq!(hilbert_encode(&[0, 0], 1).unwrap(), 0);
        let order: Vec<u64> = [[0, 0], [0, 1], [1, 1], [1, 0]]
            .iter()
            .map(|c| hilbert_encode(c, 1).unwrap())
            .collect();
        assert_eq!(order, vec![0, 1, 2, 3]);
        assert_eq!(hilbert_decode(0, 1, 2).unwrap(), [0, 0, 0]);
    }

    #[test]
    fn level_zero_is_a_single_cell() {
        assert_eq!(hilbert_encode(&[0, 0, 0], 0).unwrap(), 0);
        assert!(hilbert_encode(&[1, 0], 0).is_err());
        assert_eq!(hilbert_decode(0, 0, 3).unwrap(), [0, 0, 0]);
    }

    #[test]
    fn round_trip_2d_level5_exhaustive() {
        for x in 0..32 {
            for y in 0..32 {
                let h = hilbert_encode(&[x, y], 5).unwrap();
                assert_eq!(hilbert_decode(h, 5, 2).unwrap(), [x, y, 0]);
            }
        }
    }

    #[test]
    fn round_trip_3d_level2_exhaustive() {
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    let h = hilbert_encode(&[x, y, z], 2).unwrap();
                    assert!(h < 64);
                    assert_eq!(hilbert_decode(h, 2, 3).unwrap(), [x, y, z]);
                }
            }
        }
    }

    #[test]
    fn level_one_3d_path_is_adjacent() {
        let cells: Vec<[u32; 3]> = (0..8).map(|h| hilbert_decode(h, 1, 3).unwrap()).collect();
        for w in cells.windows(2) {
            let dist: u32 = (0..3).map(|a| w[0][a].abs_diff(w[1][a])).sum();
            assert_eq!(dist, 1, "{:?} -> {:?}", w[0], w[1]);
        }
    }

    #[test]
    fn domain_errors() {
        assert!(hilbert_encode(&[4, 0], 2).is_err());
        assert!(hilbert_encode(&[0, 0, 0, 0], 2).is_err());
        assert!(hilbert_decode(16, 2, 2).is_err());
        assert!(hilbert_decode(0, 22, 3).is_err());
        assert!(hilbert_decode(u64::MAX, 32, 2).is_ok());
    }

    #[test]
    fn large_levels_round_trip() {
        let c = [0xdead_beef, 0x1234_5678];
        let h = hilbert_encode(&c, 32).unwrap();
        assert_eq!(hilbert_decode(h, 32, 2).unwrap(), [c[0], c[1], 0]);
        let c = [0x1f_ffff, 0x0a_bcde, 0x15_5555];
        let h = hilbert_encode(&c, 21).unwrap();
        assert_eq!(hilbert_decode(h, 21, 3).unwrap(), c);
    }
}
