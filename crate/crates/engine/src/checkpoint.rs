//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FGT1"                      magic
//! u32 version                 currently 1
//! u32 len, bytes              metadata (UTF-8, usually JSON)
//! u32 count                   number of tensors
//! count x {
//!   u32 len, bytes            name
//!   u8 dtype                  0 = f32, 1 = f64
//!   u32 rank, rank x u64      shape
//! }
//! raw element buffers in manifest order
//! ```

use std::io::{Read, Write};

use crate::error::{EngineError, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FGT1";
pub const VERSION: u32 = 1;

/// A tensor as stored on disk, before conversion to a concrete element type.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    bytes: Vec<u8>,
}

impl StoredTensor {
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(EngineError::Format(format!(
                "tensor {} stored as {:?}, requested {:?}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        let values = self
            .bytes
            .chunks_exact(self.dtype.size())
            .map(T::read_le)
            .collect();
        Tensor::new(self.shape.clone(), values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| EngineError::Format(format!("{what} too large")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn write_checkpoint<'a, T: Scalar, W: Write>(
    mut w: W,
    metadata: &str,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, metadata.len(), "metadata")?;
    out.extend_from_slice(metadata.as_bytes());
    put_u32(&mut out, tensors.len(), "tensor count")?;
    for (name, t) in &tensors {
        put_u32(&mut out, name.len(), "name")?;
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        put_u32(&mut out, t.shape().len(), "rank")?;
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, t) in &tensors {
        for &v in t.values() {
            v.write_le(&mut out);
        }
    }
    w.write_all(&out)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| EngineError::Format(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let b = self.take(8, what)?;
        usize::try_from(u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .map_err(|_| EngineError::Format(format!("{what} overflows")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| EngineError::Format(format!("{what} is not UTF-8")))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(EngineError::Format(format!(
            "unknown magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            "FGT1"
        )));
    }
    let version = c.u32("version")?;
    if version != VERSION as usize {
        return Err(EngineError::Format(format!("unsupported version {version}")));
    }
    let metadata = c.string("metadata")?;
    let count = c.u32("tensor count")?;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = c.string("tensor name")?;
        let code = c.take(1, "dtype")?[0];
        let dtype = DType::from_code(code)
            .ok_or_else(|| EngineError::Format(format!("unknown dtype code {code} for {name}")))?;
        let rank = c.u32("rank")?;
        let shape = (0..rank).map(|_| c.u64("dimension")).collect::<Result<Vec<_>>>()?;
        manifest.push((name, dtype, shape));
    }
    let mut tensors = Vec::with_capacity(manifest.len());
    for (name, dtype, shape) in manifest {
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| EngineError::Format(format!("tensor {name} too large")))?;
        let bytes = c.take(count, &name)?.to_vec();
        tensors.push(StoredTensor {
            name,
            shape,
            dtype,
            bytes,
        });
    }
    if c.pos != buf.len() {
        return Err(EngineError::Format(format!(
            "{} trailing bytes after tensor data",
            buf.len() - c.pos
        )));
    }
    Ok(Checkpoint { metadata, tensors })
}
