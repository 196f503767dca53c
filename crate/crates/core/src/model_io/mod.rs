//! Configuration text, seeded parameter generation and the little-endian
//! binary containers:
//!
//! | magic  | contents                 |
//! |--------|--------------------------|
//! | `SEGV` | voxel set                |
//! | `SEGW` | encoder weights + config |
//! | `SEGB` | BEV grid                 |
//!
//! Layouts are documented on the writer of each container.

mod config;
mod containers;
mod weights;

pub use config::RunConfig;
pub use containers::{read_bev, read_voxels, write_bev, write_bev_csv, write_voxels, BEV_MAGIC, VOXEL_MAGIC};
pub use weights::{init_params, load_params, save_params, AnyParams, WEIGHTS_MAGIC};

use crate::error::{Result, SegtError};

pub const FORMAT_VERSION: u16 = 1;

/// Bounds-checked little-endian reader over a byte slice.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    container: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], container: &'static str) -> Self {
        ByteReader {
            bytes,
            pos: 0,
            container,
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(SegtError::Truncated {
                container: self.container,
                offset: self.pos,
                needed: n - remaining,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(self.bad(format!("magic is not {}", String::from_utf8_lossy(magic))));
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(self.bad(format!("version {version}, expected {FORMAT_VERSION}")));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.bad(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }

    /// Fails early when a declared payload cannot fit in what is left.
    pub(crate) fn expect_remaining(&self, n: u128) -> Result<()> {
        let remaining = (self.bytes.len() - self.pos) as u128;
        if n > remaining {
            return Err(SegtError::Truncated {
                container: self.container,
                offset: self.pos,
                needed: usize::try_from(n - remaining).unwrap_or(usize::MAX),
            });
        }
        Ok(())
    }

    pub(crate) fn bad(&self, reason: String) -> SegtError {
        SegtError::Format {
            container: self.container,
            reason,
        }
    }
}
