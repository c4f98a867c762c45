//! Binary weights file: the magic `DMEKW1`, then records of
//! `u32 name length, name bytes, u32 rank, u32 extents…, f32 data…`, all
//! little-endian. Parameters come first, then Adam state records named
//! `adam.m:<name>`, `adam.v:<name>` and a one-element `adam.step`.

use std::fs;
use std::path::Path;

use super::tensor::{Real, Tensor};
use super::Weights;
use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"DMEKW1";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit a 32-bit field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: impl Iterator<Item = f32>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len())?;
    for &e in shape {
        put_u32(out, e)?;
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_weights<T: Real>(w: &Weights<T>) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    let f = |t: &Tensor<T>| t.data().iter().map(|v| v.f64() as f32).collect::<Vec<_>>().into_iter();
    for (name, p) in w.names.iter().zip(&w.params) {
        put_record(&mut out, name, p.shape(), f(p))?;
    }
    for (name, m) in w.names.iter().zip(&w.adam_m) {
        put_record(&mut out, &format!("adam.m:{name}"), m.shape(), f(m))?;
    }
    for (name, v) in w.names.iter().zip(&w.adam_v) {
        put_record(&mut out, &format!("adam.v:{name}"), v.shape(), f(v))?;
    }
    put_record(&mut out, "adam.step", &[1], std::iter::once(w.step as f32))?;
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("weights file is truncated".into()));
        }
        self.pos += n;
        Ok(&self.buf[self.pos - n..self.pos])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_weights<T: Real>(bytes: &[u8]) -> Result<Weights<T>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a DMEKW1 weights file".into()));
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Format(format!("record {name} has an implausible shape {shape:?}")))?;
        let data = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| {
                let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
                T::of(v as f64)
            })
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }

    let mut names = Vec::new();
    let mut params = Vec::new();
    let (mut ms, mut vs, mut step) = (Vec::new(), Vec::new(), None);
    for (name, t) in records {
        if let Some(p) = name.strip_prefix("adam.m:") {
            ms.push((p.to_string(), t));
        } else if let Some(p) = name.strip_prefix("adam.v:") {
            vs.push((p.to_string(), t));
        } else if name == "adam.step" {
            step = t.data().first().map(|v| v.f64() as u64);
        } else {
            names.push(name);
            params.push(t);
        }
    }
    let mut w = Weights::from_params(names, params);
    for (state, slot) in [(ms, &mut w.adam_m), (vs, &mut w.adam_v)] {
        if state.is_empty() {
            continue;
        }
        if state.len() != w.names.len() || state.iter().zip(&w.names).any(|((n, _), m)| n != m) {
            return Err(Error::Format("optimizer records do not match the parameters".into()));
        }
        *slot = state.into_iter().map(|(_, t)| t).collect();
    }
    w.step = step.unwrap_or(0);
    Ok(w)
}

pub fn write_weights<T: Real>(path: impl AsRef<Path>, w: &Weights<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(w)?).map_err(|e| Error::io(path, e))
}

pub fn read_weights<T: Real>(path: impl AsRef<Path>) -> Result<Weights<T>> {
    let path = path.as_ref();
    decode_weights(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
