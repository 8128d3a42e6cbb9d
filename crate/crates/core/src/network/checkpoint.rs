//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RAFCN1"
//! u64 config length, config JSON bytes
//! repeated until EOF:
//!   u32 name length, name (UTF-8)
//!   u32 rank, rank × u64 extents
//!   product(extents) × f64
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"RAFCN1";

/// Decoded checkpoint: the raw config JSON and named tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub config_json: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_container<W: Write>(mut out: W, container: &Container) -> Result<()> {
    out.write_all(MAGIC)?;
    let json = container.config_json.as_bytes();
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(json)?;
    for (name, t) in &container.tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            out.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::parse(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_container<R: Read>(mut input: R) -> Result<Container> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::parse(0, "not a RAFCN1 checkpoint"));
    }
    let len = cur.u64("config length")? as usize;
    let at = cur.pos;
    let config_json = String::from_utf8(cur.take(len, "config")?.to_vec())
        .map_err(|_| Error::parse(at, "config is not UTF-8"))?;
    let mut tensors = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32("name length")? as usize;
        let at = cur.pos;
        let name = String::from_utf8(cur.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::parse(at, "tensor name is not UTF-8"))?;
        let rank = cur.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| cur.u64("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = cur.take(count * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(&shape, data)
            .map_err(|e| Error::parse(cur.pos, format!("tensor {name}: {e}")))?;
        tensors.push((name, tensor));
    }
    Ok(Container {
        config_json,
        tensors,
    })
}
