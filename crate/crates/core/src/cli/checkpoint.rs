//! Binary checkpoint: `CHDF` magic, format version, TOML config snapshot,
//! named tensor index, little-endian blobs and a trailing CRC-32.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CHDF" | version u32 | step u64 | config_len u64 | config bytes
//! | count u32 | count x (name_len u32, name, dtype u8, ndim u32,
//!                        dims u64 x ndim, offset u64)
//! | blob_len u64 | blobs | crc32 u32 over everything before it
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{DType, ParamStore, Scalar, Tensor};

use super::config::RunConfig;

pub const MAGIC: &[u8; 4] = b"CHDF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub config: RunConfig,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    pub params: ParamStore<T>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_value<T: Scalar>(out: &mut Vec<u8>, v: T) {
    match T::DTYPE {
        DType::F32 => out.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
        DType::F64 => out.extend_from_slice(&v.f64().to_le_bytes()),
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, self.step);
        let cfg = self.config.to_toml();
        put_u64(&mut out, cfg.len() as u64);
        out.extend_from_slice(cfg.as_bytes());
        put_u32(&mut out, self.params.len() as u32);
        let mut offset = 0u64;
        for (name, t) in self.params.iter() {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE as u8);
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            put_u64(&mut out, offset);
            offset += (t.len() * T::DTYPE.size()) as u64;
        }
        put_u64(&mut out, offset);
        for t in self.params.tensors() {
            for &v in t.data() {
                put_value(&mut out, v);
            }
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    /// Parses and verifies a checkpoint. Tensors stored in another
    /// precision are converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let step = r.u64()?;
        let cfg_len = r.len()?;
        let cfg = std::str::from_utf8(r.take(cfg_len)?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = RunConfig::from_toml(cfg).map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))?;
        let count = r.u32()? as usize;
        let mut index = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype =
                DType::from_tag(r.take(1)?[0]).ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype")))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.len()?);
            }
            let offset = r.len()?;
            index.push((name, dtype, shape, offset));
        }
        let blob_len = r.len()?;
        let blobs = r.take(blob_len)?;
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
        }
        let mut params = ParamStore::new();
        for (name, dtype, shape, offset) in index {
            let n: usize = shape.iter().product();
            let end = n
                .checked_mul(dtype.size())
                .and_then(|b| b.checked_add(offset))
                .filter(|&e| e <= blobs.len())
                .ok_or_else(|| Error::Checkpoint(format!("{name}: data out of bounds")))?;
            let raw = &blobs[offset..end];
            let data: Vec<T> = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
            };
            params
                .insert(name, Tensor::new(&shape, data)?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(Checkpoint { config, step, params })
    }

    /// Writes through a temporary file so a crash never leaves a torn
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows".into()))
    }
}
