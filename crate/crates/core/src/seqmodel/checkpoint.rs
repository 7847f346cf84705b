//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      8 bytes  "ASELCKPT"
//! version    u32      1
//! blocks     u32      3 (encoder, decoder, head)
//! per block:
//!   tensors  u32
//!   per tensor: rank u32, then rank x u64 extents
//! payload    every tensor's values as f64, block by block, in header order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{ParamSet, Tensor};
use crate::seqmodel::params::ModelParams;

pub const MAGIC: &[u8; 8] = b"ASELCKPT";
pub const VERSION: u32 = 1;

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let blocks = [&params.encoder, &params.decoder, &params.head];
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for block in blocks {
        out.extend_from_slice(&(block.len() as u32).to_le_bytes());
        for t in block.tensors() {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
    }
    for block in blocks {
        for t in block.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n_blocks = cur.u32()?;
    if n_blocks != 3 {
        return Err(Error::Checkpoint(format!("expected 3 blocks, found {n_blocks}")));
    }
    let mut shapes: Vec<Vec<Vec<usize>>> = Vec::new();
    for _ in 0..n_blocks {
        let n = cur.u32()? as usize;
        let mut block = Vec::with_capacity(n);
        for _ in 0..n {
            let rank = cur.u32()? as usize;
            let dims = (0..rank)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            block.push(dims);
        }
        shapes.push(block);
    }
    let mut sets = Vec::with_capacity(3);
    for block in shapes {
        let mut tensors = Vec::with_capacity(block.len());
        for shape in block {
            let n: usize = shape.iter().product();
            let raw = cur.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?);
        }
        sets.push(ParamSet::new(tensors));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    let head = sets.pop().unwrap();
    let decoder = sets.pop().unwrap();
    let encoder = sets.pop().unwrap();
    Ok(ModelParams { encoder, decoder, head })
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
