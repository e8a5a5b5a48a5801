//! `UFMCKPT1` binary checkpoints.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"UFMCKPT1";

/// Ordered named tensors: model parameters, then optional optimizer state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f32>)>,
}

fn encode_entry(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    let nb = name.as_bytes();
    let nlen = u16::try_from(nb.len()).map_err(|_| Error::invalid(format!("parameter name too long: {name}")))?;
    let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid("tensor rank exceeds 255"))?;
    out.extend_from_slice(&nlen.to_le_bytes());
    out.extend_from_slice(nb);
    out.push(rank);
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::invalid("tensor extent exceeds u32"))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format("checkpoint truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.entries.push((name.into(), t));
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let count = u32::try_from(self.entries.len()).map_err(|_| Error::invalid("too many entries"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (n, t) in &self.entries {
            encode_entry(&mut out, n, t)?;
        }
        Ok(out)
    }

    /// Serialized bytes of one entry (name, shape and values), for segment comparison.
    pub fn segment(&self, name: &str) -> Option<Vec<u8>> {
        let t = self.get(name)?;
        let mut out = Vec::new();
        encode_entry(&mut out, name, t).ok()?;
        Some(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("bad checkpoint magic"));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::format("parameter name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let n = n.ok_or_else(|| Error::format("tensor size overflows"))?;
            let bytes = r.take(n.checked_mul(4).ok_or_else(|| Error::format("tensor size overflows"))?)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint { entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
