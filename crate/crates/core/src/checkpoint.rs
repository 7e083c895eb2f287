//! Self-describing model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "ORTHCAPS-CKPT-v1\n"
//! u32 len, model config as key=value text
//! u32 n, n × f64 EMA keep probabilities, u64 EMA update count
//! u32 count, then per parameter:
//!     u32 len, name; u32 len, kind tag; u32 rank, rank × u64 dims; f64 payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamKind;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const HEADER: &str = "ORTHCAPS-CKPT-v1\n";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend((v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend(s.as_bytes());
}

pub fn encode<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut out = HEADER.as_bytes().to_vec();
    put_str(&mut out, &model.cfg.to_text());
    put_u32(&mut out, model.ema.keep_prob.len());
    for &p in &model.ema.keep_prob {
        out.extend(p.to_le_bytes());
    }
    out.extend(model.ema.updates.to_le_bytes());
    put_u32(&mut out, model.store.len());
    for (_, p) in model.store.iter() {
        put_str(&mut out, &p.name);
        put_str(&mut out, p.kind.tag());
        put_u32(&mut out, p.value.rank());
        for &d in p.value.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend(v.as_f64().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(Error::Length { expected: self.at.saturating_add(n), actual: self.bytes.len() })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    if !bytes.starts_with(HEADER.as_bytes()) {
        return Err(Error::Format("missing ORTHCAPS-CKPT-v1 header".into()));
    }
    let mut r = Reader { bytes, at: HEADER.len() };
    let cfg = ModelConfig::from_text(&r.string()?)?;
    let mut model = Model::<T>::new(cfg, 0)?;
    let n = r.u32()?;
    if n != model.cfg.n_caps {
        return Err(Error::Format(format!("EMA mask has {n} entries, config has {} capsule types", model.cfg.n_caps)));
    }
    model.ema.keep_prob = (0..n).map(|_| r.f64()).collect::<Result<_>>()?;
    model.ema.updates = r.u64()?;
    let count = r.u32()?;
    if count != model.store.len() {
        return Err(Error::Format(format!("checkpoint holds {count} parameters, model expects {}", model.store.len())));
    }
    for _ in 0..count {
        let name = r.string()?;
        let tag = r.string()?;
        let kind = ParamKind::from_tag(&tag).ok_or_else(|| Error::Format(format!("unknown parameter kind '{tag}'")))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| r.f64().map(T::of)).collect::<Result<Vec<_>>>()?;
        let id = model.store.find(&name).ok_or_else(|| Error::Format(format!("unexpected parameter '{name}'")))?;
        let slot = model.store.get_mut(id);
        if slot.value.shape() != shape.as_slice() || slot.kind != kind {
            return Err(Error::Format(format!(
                "parameter '{name}': stored {kind:?} {shape:?}, model expects {:?} {:?}",
                slot.kind,
                slot.value.shape()
            )));
        }
        slot.value = Tensor::new(&shape, data)?;
    }
    if r.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.at)));
    }
    Ok(model)
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    decode(&fs::read(path)?)
}
