//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "DITMCKPT"
//! version  u32      1
//! count    u32      number of tensors
//! count x {
//!   name_len u32, name (UTF-8), rank u32, dims u64 x rank,
//!   data     f64 x prod(dims), IEEE-754 little-endian
//! }
//! ```
//!
//! Tensors are written in name order, so equal stores produce byte-identical
//! files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DITMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Parse a checkpoint stream. `origin` only labels errors.
pub fn read_checkpoint<R: Read>(mut r: R, origin: &Path) -> Result<ParamStore> {
    let bad = |detail: String| Error::Format {
        path: origin.to_path_buf(),
        detail,
    };
    let io = |e: std::io::Error| Error::io(origin, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = read_u32(&mut r).map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r).map_err(io)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut r).map_err(io)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8".into()))?;
        let rank = read_u32(&mut r).map_err(io)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(io)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
        store.insert(name, t);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io)? != 0 {
        return Err(bad("trailing bytes after last tensor".into()));
    }
    Ok(store)
}

/// Write via a temporary sibling and rename, so a crash never leaves a
/// truncated checkpoint under `path`.
pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    write_checkpoint(BufWriter::new(file), store).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file), path)
}
