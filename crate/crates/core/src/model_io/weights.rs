use std::io::Write;

use super::{ByteReader, RunConfig, FORMAT_VERSION};
use crate::encoder::{EncoderParams, InitMode, LayerParams};
use crate::error::{Result, SegtError};
use crate::tensor::{Matrix, Precision, Real};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"SEGW";

/// Encoder parameters at whichever precision the run selected.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyParams {
    F32(EncoderParams<f32>),
    F64(EncoderParams<f64>),
}

impl AnyParams {
    pub fn precision(&self) -> Precision {
        match self {
            AnyParams::F32(_) => Precision::F32,
            AnyParams::F64(_) => Precision::F64,
        }
    }

    pub fn check(&self) -> Result<()> {
        match self {
            AnyParams::F32(p) => p.check(),
            AnyParams::F64(p) => p.check(),
        }
    }
}

impl From<EncoderParams<f32>> for AnyParams {
    fn from(p: EncoderParams<f32>) -> Self {
        AnyParams::F32(p)
    }
}

impl From<EncoderParams<f64>> for AnyParams {
    fn from(p: EncoderParams<f64>) -> Self {
        AnyParams::F64(p)
    }
}

/// Seeded parameters for `cfg`, at `cfg.precision`, with the expansion
/// levels resolved against `cfg.grid`. Values are drawn in f64 and rounded,
/// so an f32 stack is the rounding of the f64 stack for the same seed.
pub fn init_params(cfg: &RunConfig, mode: InitMode) -> Result<AnyParams> {
    cfg.validate()?;
    let enc = cfg.encoder_config(cfg.grid.dims())?;
    let p = EncoderParams::<f64>::generate(enc, cfg.in_channels, cfg.seed, mode);
    Ok(match cfg.precision {
        Precision::F64 => AnyParams::F64(p),
        Precision::F32 => AnyParams::F32(p.cast()),
    })
}

/// `SEGW` layout, all little-endian:
///
/// ```text
/// magic  "SEGW"
/// u16    version (1)
/// u32    config text length, then that many bytes of UTF-8 config text
/// u32    tensor count
/// per tensor: u32 rows, u32 cols, rows*cols values (f32 or f64 per the
///             config's `precision`)
/// ```
///
/// Tensor order: input projection weight and bias when present, then every
/// layer in stack order, each in `LayerParams::tensors` order. The stored
/// config is `cfg` with the model fields (width, heads, group size, levels,
/// input channels, precision) taken from `params`.
pub fn save_params<W: Write>(out: &mut W, params: &AnyParams, cfg: &RunConfig) -> Result<()> {
    params.check()?;
    let bytes = match params {
        AnyParams::F32(p) => encode(p, cfg),
        AnyParams::F64(p) => encode(p, cfg),
    };
    out.write_all(&bytes)?;
    Ok(())
}

fn encode<T: Real>(p: &EncoderParams<T>, cfg: &RunConfig) -> Vec<u8> {
    let header = RunConfig {
        l_glb: p.cfg.expansion.l_glb(),
        l_lcl: Some(p.cfg.expansion.l_lcl()),
        group_size: p.cfg.attention.group_size(),
        channels: p.channels(),
        heads: p.cfg.attention.heads(),
        in_channels: p.in_channels(),
        precision: T::PRECISION,
        ..cfg.clone()
    }
    .to_text();

    let mut tensors: Vec<((usize, usize), &[T])> = Vec::new();
    if let Some(proj) = &p.input_projection {
        tensors.push((proj.weight.shape(), proj.weight.as_slice()));
        tensors.push(((1, proj.bias.len()), &proj.bias));
    }
    for (_, layer) in p.layers() {
        tensors.extend(layer.tensors().into_iter().map(|(_, s, d)| (s, d)));
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for ((rows, cols), data) in tensors {
        buf.extend_from_slice(&(rows as u32).to_le_bytes());
        buf.extend_from_slice(&(cols as u32).to_le_bytes());
        for &v in data {
            v.write_le(&mut buf);
        }
    }
    buf
}

/// Inverse of [`save_params`]. Returns the stored config and the params;
/// nothing partial is returned on error.
pub fn load_params(bytes: &[u8]) -> Result<(RunConfig, AnyParams)> {
    let mut r = ByteReader::new(bytes, "SEGW");
    r.header(WEIGHTS_MAGIC)?;
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| r.bad("config text is not UTF-8".into()))?;
    let cfg = RunConfig::parse(text)?;
    let params = match cfg.precision {
        Precision::F32 => AnyParams::F32(decode(&mut r, &cfg)?),
        Precision::F64 => AnyParams::F64(decode(&mut r, &cfg)?),
    };
    r.finish()?;
    params.check()?;
    Ok((cfg, params))
}

fn decode<T: Real>(r: &mut ByteReader<'_>, cfg: &RunConfig) -> Result<EncoderParams<T>> {
    let enc = cfg.encoder_config(cfg.grid.dims())?;
    let c = cfg.channels;
    let mut p = EncoderParams::<T>::generate(enc, cfg.in_channels, 0, InitMode::Random);

    let mut shapes: Vec<(usize, usize)> = Vec::new();
    if cfg.in_channels != c {
        shapes.extend([(cfg.in_channels, c), (1, c)]);
    }
    let per_layer = LayerParams::<T>::expected_shapes(c);
    for _ in p.layers() {
        shapes.extend(per_layer.iter().map(|&(_, s)| s));
    }

    let count = r.u32()? as usize;
    if count != shapes.len() {
        return Err(SegtError::shape(format!(
            "weights hold {count} tensors, config implies {}",
            shapes.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (i, &want) in shapes.iter().enumerate() {
        let shape = (r.u32()? as usize, r.u32()? as usize);
        if shape != want {
            return Err(SegtError::shape(format!(
                "tensor {i} is {shape:?}, config implies {want:?}"
            )));
        }
        let raw = r.take(shape.0 * shape.1 * T::BYTES)?;
        tensors.push(raw.chunks_exact(T::BYTES).map(T::read_le).collect::<Vec<T>>());
    }

    let mut it = tensors.into_iter();
    if let Some(proj) = &mut p.input_projection {
        let weight = it.next().expect("counted");
        proj.weight = Matrix::from_vec(cfg.in_channels, c, weight)?;
        proj.bias = it.next().expect("counted");
    }
    for layer in p.layers_mut() {
        for (_, dst) in layer.tensors_mut() {
            dst.copy_from_slice(&it.next().expect("counted"));
        }
    }
    Ok(p)
}
