//! `GCKP` checkpoint files: model parameters plus optimizer state.
//!
//! Layout (little-endian): magic `GCKP`; version u32 = 1; arch u8; u32
//! channels, height, width, d, num_classes, k; init_seed u64; next_epoch
//! u32; tensor count u32; then per tensor: u16 name length, UTF-8 name,
//! u8 rank, rank × u32 extents, f64 values. Parameters come first in bundle
//! order, followed by their momentum buffers named `velocity.<param>`.

use std::path::Path;

use super::TrainState;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{Arch, ModelBundle, ModelConfig, Parameter};

pub const MAGIC: &[u8; 4] = b"GCKP";
pub const VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "velocity.";

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let cfg = state.model.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(cfg.arch.code());
    let [c, h, w] = cfg.input_shape;
    for v in [c, h, w, cfg.d, cfg.num_classes, cfg.k] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.init_seed.to_le_bytes());
    out.extend_from_slice(&(state.next_epoch as u32).to_le_bytes());
    let params = state.model.params();
    out.extend_from_slice(&((params.len() * 2) as u32).to_le_bytes());
    for p in params {
        put_tensor(&mut out, &p.name, &p.value);
    }
    for (p, v) in params.iter().zip(&state.velocity) {
        let t = Tensor::new(p.value.shape().to_vec(), v.clone()).expect("velocity matches parameter");
        put_tensor(&mut out, &format!("{VELOCITY_PREFIX}{}", p.name), &t);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos.saturating_add(n))
            .ok_or_else(|| Error::Truncated(format!("checkpoint ends at byte {} of a {n}-byte field", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic, expected GCKP".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let arch = Arch::from_code(r.u8()?).ok_or_else(|| Error::Format("unknown architecture code".into()))?;
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        arch,
        input_shape: [dims[0], dims[1], dims[2]],
        d: dims[3],
        num_classes: dims[4],
        k: dims[5],
        init_seed: r.u64()?,
    };
    let next_epoch = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut params = Vec::new();
    let mut velocity = Vec::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if let Some(base) = name.strip_prefix(VELOCITY_PREFIX) {
            let expected = params.get(velocity.len()).map(|p: &Parameter| p.name.as_str());
            if expected != Some(base) {
                return Err(Error::Format(format!("velocity `{name}` out of order")));
            }
            velocity.push(t.into_data());
        } else {
            if !velocity.is_empty() {
                return Err(Error::Format(format!("parameter `{name}` after velocity buffers")));
            }
            params.push(Parameter { name, value: t });
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let model = ModelBundle::from_parameters(config, params)?;
    if velocity.is_empty() {
        velocity = model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
    } else if velocity.len() != model.params().len() {
        return Err(Error::Format("velocity buffers do not cover every parameter".into()));
    }
    Ok(TrainState { model, velocity, next_epoch })
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
