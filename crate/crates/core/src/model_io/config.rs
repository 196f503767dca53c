//! Flat `key = value` run configuration.
//!
//! ```text
//! # nuScenes defaults
//! range_min = -54, -54, -5
//! range_max = 54, 54, 3
//! voxel_size = 0.28125, 0.28125, 8
//! l_glb = 6
//! l_lcl = auto
//! group_size = 128
//! channels = 128
//! heads = 8
//! in_channels = 5
//! seed = 0
//! precision = f64
//! stride = 5
//! ```
//!
//! `#` starts a comment. Unknown or repeated keys are errors; missing keys
//! keep the defaults above. `l_lcl = auto` derives the local level from the
//! grid so the curve just covers it.

use std::fmt::Write as _;

use crate::attention::AttentionConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Result, SegtError};
use crate::spacecurve::ExpansionConfig;
use crate::tensor::Precision;
use crate::voxelizer::GridSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub l_glb: u32,
    /// `None` means derived from the grid.
    pub l_lcl: Option<u32>,
    pub group_size: usize,
    pub channels: usize,
    pub heads: usize,
    /// Channels of the incoming voxel features; a learned projection lifts
    /// them to `channels` when the two differ.
    pub in_channels: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Floats per point in binary point files.
    pub stride: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid: GridSpec::nuscenes(),
            l_glb: 6,
            l_lcl: None,
            group_size: 128,
            channels: 128,
            heads: 8,
            in_channels: 5,
            seed: 0,
            precision: Precision::F64,
            stride: 5,
        }
    }
}

const KEYS: [&str; 12] = [
    "range_min",
    "range_max",
    "voxel_size",
    "l_glb",
    "l_lcl",
    "group_size",
    "channels",
    "heads",
    "in_channels",
    "seed",
    "precision",
    "stride",
];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut range_min = cfg.grid.range_min();
        let mut range_max = cfg.grid.range_max();
        let mut voxel_size = cfg.grid.voxel_size();
        let mut seen: Vec<&str> = Vec::new();

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| SegtError::Parse {
                line,
                reason: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let Some(&known) = KEYS.iter().find(|&&k| k == key) else {
                return Err(SegtError::Parse {
                    line,
                    reason: format!("unknown key `{key}`"),
                });
            };
            if seen.contains(&known) {
                return Err(SegtError::Parse {
                    line,
                    reason: format!("`{key}` given twice"),
                });
            }
            seen.push(known);
            let bad = |what: &str| SegtError::Parse {
                line,
                reason: format!("`{key}`: `{value}` is not {what}"),
            };
            match known {
                "range_min" => range_min = parse_vec3(value).ok_or_else(|| bad("three numbers"))?,
                "range_max" => range_max = parse_vec3(value).ok_or_else(|| bad("three numbers"))?,
                "voxel_size" => voxel_size = parse_vec3(value).ok_or_else(|| bad("three numbers"))?,
                "l_glb" => cfg.l_glb = value.parse().map_err(|_| bad("an integer"))?,
                "l_lcl" => {
                    cfg.l_lcl = if value == "auto" {
                        None
                    } else {
                        Some(value.parse().map_err(|_| bad("an integer or `auto`"))?)
                    }
                }
                "group_size" => cfg.group_size = value.parse().map_err(|_| bad("an integer"))?,
                "channels" => cfg.channels = value.parse().map_err(|_| bad("an integer"))?,
                "heads" => cfg.heads = value.parse().map_err(|_| bad("an integer"))?,
                "in_channels" => cfg.in_channels = value.parse().map_err(|_| bad("an integer"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("an unsigned integer"))?,
                "precision" => {
                    cfg.precision = match value {
                        "f32" => Precision::F32,
                        "f64" => Precision::F64,
                        _ => return Err(bad("`f32` or `f64`")),
                    }
                }
                "stride" => cfg.stride = value.parse().map_err(|_| bad("an integer"))?,
                _ => unreachable!(),
            }
        }
        cfg.grid = GridSpec::new(range_min, range_max, voxel_size)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.expansion(self.grid.dims())?.check_covers(self.grid.dims())?;
        self.attention()?;
        if self.stride < 3 {
            return Err(SegtError::config("stride", "must be at least 3 (x, y, z)"));
        }
        if self.in_channels == 0 {
            return Err(SegtError::config("in_channels", "must be positive"));
        }
        Ok(())
    }

    /// Expansion levels for a lattice of `dims`, resolving `l_lcl = auto`.
    pub fn expansion(&self, dims: [u32; 3]) -> Result<ExpansionConfig> {
        match self.l_lcl {
            Some(l) => ExpansionConfig::new(self.l_glb, l),
            None => ExpansionConfig::for_dims(self.l_glb, dims),
        }
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.channels, self.heads, self.group_size)
    }

    pub fn encoder_config(&self, dims: [u32; 3]) -> Result<EncoderConfig> {
        Ok(EncoderConfig {
            expansion: self.expansion(dims)?,
            attention: self.attention()?,
        })
    }

    /// Canonical text; `parse(to_text(c)) == c` and the text is stable.
    pub fn to_text(&self) -> String {
        let v3 = |v: [f64; 3]| format!("{}, {}, {}", v[0], v[1], v[2]);
        let mut s = String::new();
        let _ = writeln!(s, "range_min = {}", v3(self.grid.range_min()));
        let _ = writeln!(s, "range_max = {}", v3(self.grid.range_max()));
        let _ = writeln!(s, "voxel_size = {}", v3(self.grid.voxel_size()));
        let _ = writeln!(s, "l_glb = {}", self.l_glb);
        match self.l_lcl {
            Some(l) => writeln!(s, "l_lcl = {l}"),
            None => writeln!(s, "l_lcl = auto"),
        }
        .ok();
        let _ = writeln!(s, "group_size = {}", self.group_size);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "in_channels = {}", self.in_channels);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "precision = {}", self.precision);
        let _ = writeln!(s, "stride = {}", self.stride);
        s
    }
}

fn parse_vec3(s: &str) -> Option<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().ok())
        .collect::<Option<_>>()?;
    parts.try_into().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.l_glb, 6);
        assert_eq!(cfg.group_size, 128);
        assert_eq!(cfg.grid.voxel_size(), [0.28125, 0.28125, 8.0]);
        assert_eq!(cfg.grid.range_min(), [-54.0, -54.0, -5.0]);
        assert_eq!(cfg.grid.range_max(), [54.0, 54.0, 3.0]);
        assert_eq!(cfg.expansion(cfg.grid.dims()).unwrap().l_lcl(), 3);
    }

    #[test]
    fn single_override() {
        let cfg = RunConfig::parse("l_glb = 7\n").unwrap();
        let want = RunConfig {
            l_glb: 7,
            ..RunConfig::default()
        };
        assert_eq!(cfg, want);
        assert_eq!(cfg.expansion(cfg.grid.dims()).unwrap().l_lcl(), 2);
    }

    #[test]
    fn zero_group_size_names_key() {
        match RunConfig::parse("group_size = 0").unwrap_err() {
            SegtError::Config { key, .. } => assert_eq!(key, "group_size"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = RunConfig::parse("# comment\n\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, SegtError::Parse { line: 3, .. }), "{err}");
        let err = RunConfig::parse("seed = 1\nseed = 2").unwrap_err();
        assert!(matches!(err, SegtError::Parse { line: 2, .. }));
        let err = RunConfig::parse("heads 4").unwrap_err();
        assert!(matches!(err, SegtError::Parse { line: 1, .. }));
        let err = RunConfig::parse("voxel_size = 1, 2").unwrap_err();
        assert!(matches!(err, SegtError::Parse { line: 1, .. }));
    }

    #[test]
    fn invariant_violations_name_keys() {
        let key = |text: &str| match RunConfig::parse(text).unwrap_err() {
            SegtError::Config { key, .. } => key,
            e => panic!("unexpected {e}"),
        };
        assert_eq!(key("heads = 3"), "heads");
        assert_eq!(key("stride = 2"), "stride");
        assert_eq!(key("l_glb = 0"), "l_glb");
        assert_eq!(key("l_glb = 4\nl_lcl = 2"), "l_glb");
        assert_eq!(key("voxel_size = 0, 1, 1"), "voxel_size");
    }

    #[test]
    fn echo_is_stable() {
        let text = "l_glb = 5 # coarse\nl_lcl = 4\nprecision = f32\nseed = 99\nvoxel_size = 0.1 0.1 0.2\nrange_min = 0,0,0\nrange_max=10, 10, 4\n";
        let cfg = RunConfig::parse(text).unwrap();
        let echo = cfg.to_text();
        let again = RunConfig::parse(&echo).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_text(), echo);
        assert!(echo.contains("voxel_size = 0.1, 0.1, 0.2\n"));
    }
}
