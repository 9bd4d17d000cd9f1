//! Versioned binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "LARRCKPT" | version u32 | meta_len u32 | meta utf8 | step u64
//! | n u32 | n x (name_len u32, name) | n x (ndim u32, dims u64*, dtype u8, payload)
//! | crc32 u32 over every preceding byte
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LARRCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

pub fn encode(store: &ParamStore, meta: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&store.step().to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, _) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    for (_, _, t) in store.iter() {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(DTYPE_F64);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| NnError::Checkpoint("invalid utf-8".into()))
    }
}

/// Parses a checkpoint, returning the parameters and the metadata string.
pub fn decode(bytes: &[u8]) -> Result<(ParamStore, String)> {
    if bytes.len() < MAGIC.len() + 4 + 4 {
        return Err(NnError::Checkpoint("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(NnError::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let meta = r.string()?;
    let step = r.u64()?;
    let n = r.u32()? as usize;
    let names = (0..n).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let mut store = ParamStore::new();
    for name in names {
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(NnError::Checkpoint(format!("unsupported dtype {dtype}")));
        }
        let count: usize = shape.iter().product();
        let data = r
            .take(count * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != body.len() {
        return Err(NnError::Checkpoint("trailing bytes".into()));
    }
    store.set_step(step);
    Ok((store, meta))
}

/// Writes via a temporary sibling file and rename so readers never observe a
/// partial checkpoint.
pub fn save(path: &Path, store: &ParamStore, meta: &str) -> Result<()> {
    write_atomic(path, &encode(store, meta))
}

pub fn load(path: &Path) -> Result<(ParamStore, String)> {
    decode(&fs::read(path)?)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
