//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "NR2P"            4 bytes
//! version u32               currently 1
//! count   u32               number of parameters
//! repeated count times, in name order:
//!   name_len u32, name bytes (UTF-8)
//!   dtype    u8             0 = f32, 1 = f64
//!   rank     u32
//!   extents  u32 x rank
//!   data     dtype-sized little-endian scalars, row-major
//! ```

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::params::ParameterStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NR2P";
pub const CHECKPOINT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn encode_checkpoint<T: Scalar>(store: &ParameterStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad("truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Decodes a checkpoint, converting stored scalars to `T` when the stored
/// dtype differs.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ParameterStore<T>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| bad("parameter name is not UTF-8"))?
            .to_string();
        let dtype = DType::from_tag(c.take(1)?[0]).ok_or_else(|| bad("unknown dtype tag"))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n * dtype.size_of())?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|b| T::of(f32::read_le(b) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|b| T::of(f64::read_le(b))).collect(),
        };
        store.insert(&name, Tensor::new(&shape, data)?)?;
    }
    if c.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(store)
}

pub fn write_checkpoint<T: Scalar, W: Write>(store: &ParameterStore<T>, mut w: W) -> Result<()> {
    w.write_all(&encode_checkpoint(store))?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<ParameterStore<T>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode_checkpoint(&buf)
}
