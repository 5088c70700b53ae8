//! `RRM1` checkpoint files.
//!
//! Layout (little-endian): magic, kind tag (u8), `dim` (u64), the FCRR and/or
//! ConvRR config fields of that kind, the tensor count (u32), then per tensor
//! its name (u32 length + UTF-8), rank (u32), extents (u64 each) and f32 values.

use std::path::Path;

use crate::error::{Error, Result};

use super::{ConvRrConfig, FcrrConfig, ModelConfig, ModelKind, Param, RetrievalModel, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RRM1";

fn kind_tag(kind: ModelKind) -> u8 {
    match kind {
        ModelKind::Fcrr => 0,
        ModelKind::ConvRr => 1,
        ModelKind::Composite => 2,
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Format(format!("extent {v} does not fit in memory")))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn write_fcrr(w: &mut Writer, c: &FcrrConfig) {
    w.u64(c.n_layers);
    w.u64(c.hidden_dim);
    w.f32(c.dropout);
    w.f32(c.scaling_factor);
}

fn read_fcrr(r: &mut Reader<'_>) -> Result<FcrrConfig> {
    Ok(FcrrConfig {
        n_layers: r.u64()?,
        hidden_dim: r.u64()?,
        dropout: r.f32()?,
        scaling_factor: r.f32()?,
    })
}

fn write_convrr(w: &mut Writer, c: &ConvRrConfig) {
    w.u64(c.n_filters);
    w.u64(c.kernel_len);
    w.u64(c.stride);
    w.f32(c.dropout);
    w.f32(c.scaling_factor);
}

fn read_convrr(r: &mut Reader<'_>) -> Result<ConvRrConfig> {
    Ok(ConvRrConfig {
        n_filters: r.u64()?,
        kernel_len: r.u64()?,
        stride: r.u64()?,
        dropout: r.f32()?,
        scaling_factor: r.f32()?,
    })
}

pub(crate) fn to_bytes(model: &RetrievalModel<f32>) -> Vec<u8> {
    let mut w = Writer(CHECKPOINT_MAGIC.to_vec());
    let config = model.config();
    w.u8(kind_tag(config.kind()));
    w.u64(config.dim());
    if let Some(f) = config.fcrr() {
        write_fcrr(&mut w, f);
    }
    if let Some(c) = config.convrr() {
        write_convrr(&mut w, c);
    }
    w.u32(model.names().len() as u32);
    for (name, t) in model.names().iter().zip(model.tensors()) {
        w.u32(name.len() as u32);
        w.0.extend_from_slice(name.as_bytes());
        w.u32(t.shape.len() as u32);
        for &e in &t.shape {
            w.u64(e);
        }
        for &v in &t.values {
            w.f32(v);
        }
    }
    w.0
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<RetrievalModel<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Format("not an RRM1 checkpoint".into()));
    }
    let tag = r.u8()?;
    let dim = r.u64()?;
    let config = match tag {
        0 => ModelConfig::Fcrr {
            dim,
            fcrr: read_fcrr(&mut r)?,
        },
        1 => ModelConfig::ConvRr {
            dim,
            convrr: read_convrr(&mut r)?,
        },
        2 => ModelConfig::Composite {
            dim,
            fcrr: read_fcrr(&mut r)?,
            convrr: read_convrr(&mut r)?,
        },
        other => return Err(Error::Format(format!("unknown model kind tag {other}"))),
    };
    let n = r.u32()? as usize;
    let mut params = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::Format(format!("parameter `{name}` is too large")))?;
        let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Format("overflow".into()))?)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        params.push(Param {
            name,
            tensor: Tensor {
                shape,
                values,
                grad: None,
            },
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    RetrievalModel::from_params(config, params).map_err(|e| match e {
        Error::Argument(m) => Error::Format(format!("invalid stored config: {m}")),
        other => other,
    })
}

pub fn save_checkpoint(model: &RetrievalModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<RetrievalModel<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and insists on its model kind.
pub fn load_checkpoint_as(path: impl AsRef<Path>, kind: ModelKind) -> Result<RetrievalModel<f32>> {
    let model = load_checkpoint(path)?;
    if model.kind() != kind {
        return Err(Error::KindMismatch {
            expected: kind.to_string(),
            found: model.kind().to_string(),
        });
    }
    Ok(model)
}
