//! Versioned binary container mapping layer index to named tensors.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic   8 bytes  "DSLBICKP"
//! version u32
//! meta    u32 length + UTF-8 bytes (free-form, JSON by convention)
//! count   u32
//! entry*  layer u32, name u16 length + UTF-8, ndim u32, dims u64 * ndim, data f64 * prod(dims)
//! ```
//!
//! Optimizer state uses the slot names `W`, `b`, `Gamma`, `V`, `velocity` and `mask`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DSLBICKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub layer: u32,
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: String,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn get(&self, layer: u32, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.layer == layer && e.name == name).map(|e| &e.tensor)
    }

    pub fn push(&mut self, layer: u32, name: &str, tensor: Tensor) {
        self.entries.push(Entry { layer, name: name.to_string(), tensor });
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta_len =
        u32::try_from(ckpt.meta.len()).map_err(|_| Error::InvalidArgument("checkpoint metadata too long".into()))?;
    out.extend_from_slice(&meta_len.to_le_bytes());
    out.extend_from_slice(ckpt.meta.as_bytes());
    out.extend_from_slice(&(ckpt.entries.len() as u32).to_le_bytes());
    for e in &ckpt.entries {
        let name_len = u16::try_from(e.name.len())
            .map_err(|_| Error::InvalidArgument(format!("slot name `{}` too long", e.name)))?;
        out.extend_from_slice(&e.layer.to_le_bytes());
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.tensor.shape().len() as u32).to_le_bytes());
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format { what: "checkpoint", offset: self.pos, reason: reason.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos))),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        let at = self.pos;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            what: "checkpoint",
            offset: at,
            reason: "string is not UTF-8".into(),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format { what: "checkpoint", offset: 0, reason: "bad magic".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format { what: "checkpoint", offset: 8, reason: format!("unsupported version {version}") });
    }
    let meta_len = r.u32()? as usize;
    let meta = r.string(meta_len)?;
    let count = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let layer = r.u32()?;
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let at = r.pos;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let len =
            shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.fail("tensor size overflows"))?;
        let raw = r.take(len.checked_mul(8).ok_or_else(|| r.fail("tensor size overflows"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Format {
            what: "checkpoint",
            offset: at,
            reason: format!("slot `{name}` of layer {layer}: {e}"),
        })?;
        entries.push(Entry { layer, name, tensor });
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { meta, entries })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn slot_name(slot: usize) -> &'static str {
    if slot == 0 {
        "W"
    } else {
        "b"
    }
}

/// Snapshot of every parameter and optimizer buffer.
pub fn from_state(state: &OptimizerState, meta: String) -> Checkpoint {
    let mut ckpt = Checkpoint { meta, entries: Vec::new() };
    for ps in &state.params {
        let layer = ps.id.layer as u32;
        let prefix = if ps.id.slot == 0 { "" } else { "b." };
        ckpt.push(layer, slot_name(ps.id.slot), state.net.param(ps.id).clone());
        ckpt.push(layer, &format!("{prefix}velocity"), ps.velocity.clone());
        if let Some(c) = &ps.coupled {
            ckpt.push(layer, "Gamma", c.gamma.clone());
            ckpt.push(layer, "V", c.v.clone());
        }
        if let Some(m) = &ps.mask {
            ckpt.push(layer, &format!("{prefix}mask"), m.clone());
        }
    }
    ckpt
}

/// Writes the checkpoint's tensors back into a state built from the same network
/// and split policy. Every slot the state needs must be present with a matching shape.
pub fn restore_into(state: &mut OptimizerState, ckpt: &Checkpoint) -> Result<()> {
    let fetch = |layer: u32, name: &str, like: &Tensor| -> Result<Tensor> {
        let t = ckpt
            .get(layer, name)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks slot `{name}` for layer {layer}")))?;
        t.check_same_shape(like, &format!("checkpoint slot `{name}` of layer {layer}"))?;
        Ok(t.clone())
    };
    for i in 0..state.params.len() {
        let id = state.params[i].id;
        let layer = id.layer as u32;
        let prefix = if id.slot == 0 { "" } else { "b." };
        let w = fetch(layer, slot_name(id.slot), state.net.param(id))?;
        *state.net.param_mut(id) = w;
        let ps = &mut state.params[i];
        ps.velocity = fetch(layer, &format!("{prefix}velocity"), &ps.velocity)?;
        if let Some(c) = ps.coupled.as_mut() {
            c.gamma = fetch(layer, "Gamma", &c.gamma)?;
            c.v = fetch(layer, "V", &c.v)?;
        }
        ps.mask = ckpt.get(layer, &format!("{prefix}mask")).cloned();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint { meta: "{\"epoch\":3}".into(), entries: Vec::new() };
        c.push(0, "W", Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        c.push(2, "Gamma", Tensor::from_vec(vec![0.1, 0.2, 0.3]));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = decode(&encode(&c).unwrap()).unwrap();
        assert_eq!(back.meta, c.meta);
        for (a, b) in c.entries.iter().zip(&back.entries) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
            assert_eq!((a.layer, &a.name, a.tensor.shape()), (b.layer, &b.name, b.tensor.shape()));
        }
    }

    #[test]
    fn corruption_reports_offset() {
        let bytes = encode(&sample()).unwrap();
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("byte offset") && err.contains("truncated"), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).unwrap_err().to_string().contains("bad magic"));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).unwrap_err().to_string().contains("trailing"));
    }
}
