//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "CMTCKPT\0"
//! version    u32
//! meta_len   u64, followed by meta_len bytes of UTF-8 JSON metadata
//! count      u64
//! count × { name_len u32, name bytes, ndim u32, ndim × u64 dims, f64 payload }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{NumericsError, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CMTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named tensors plus a free-form JSON metadata blob.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), NumericsError> {
        let meta = serde_json::to_vec(&self.metadata)
            .map_err(|e| NumericsError::Checkpoint(format!("metadata: {e}")))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, NumericsError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NumericsError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(NumericsError::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = read_u64(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let metadata = serde_json::from_slice(&meta)
            .map_err(|e| NumericsError::Checkpoint(format!("metadata: {e}")))?;
        let count = read_u64(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| NumericsError::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| NumericsError::Checkpoint(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        Ok(Self {
            version,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NumericsError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NumericsError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NumericsError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NumericsError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
