//! Model checkpoints.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "PUNETCK1"
//! meta_len   u32       length of the JSON metadata block
//! meta       bytes     UTF-8 JSON (model family and configuration)
//! count      u32       number of tensor entries
//! entry*     repeated:
//!   name_len   u32
//!   name       UTF-8 bytes
//!   trainable  u8 (0 or 1)
//!   ndim       u32
//!   dims       u32 * ndim
//!   data       f64 little-endian * prod(dims)
//! ```
//!
//! Entries appear in parameter-store order. Buffers (running statistics)
//! are saved alongside weights so a restored model evaluates standalone.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

const MAGIC: &[u8; 8] = b"PUNETCK1";

pub fn save<M: Serialize>(path: &Path, meta: &M, store: &ParamStore) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    let meta_bytes = serde_json::to_vec(meta)
        .map_err(|e| Error::format(path, format!("metadata does not serialize: {e}")))?;
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&meta_bytes).map_err(io_err)?;
    w.write_all(&(store.len() as u32).to_le_bytes()).map_err(io_err)?;
    for entry in store.entries() {
        let name = entry.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name).map_err(io_err)?;
        w.write_all(&[entry.trainable as u8]).map_err(io_err)?;
        let shape = entry.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io_err)?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
        }
        for &v in entry.tensor.values() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

#[derive(Debug)]
pub struct LoadedCheckpoint<M> {
    pub meta: M,
    pub entries: Vec<(String, Tensor, bool)>,
}

pub fn load<M: DeserializeOwned>(path: &Path) -> Result<LoadedCheckpoint<M>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let meta_len = read_u32(&mut r, path)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    read_exact(&mut r, &mut meta_bytes, path)?;
    let meta: M = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::format(path, format!("bad metadata: {e}")))?;
    let count = read_u32(&mut r, path)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, path)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
        let mut flag = [0u8; 1];
        read_exact(&mut r, &mut flag, path)?;
        let trainable = match flag[0] {
            0 => false,
            1 => true,
            other => {
                return Err(Error::format(path, format!("bad trainable flag {other}")));
            }
        };
        let ndim = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        let n = numel(&shape);
        let mut values = vec![0.0; n];
        let mut buf = [0u8; 8];
        for v in values.iter_mut() {
            read_exact(&mut r, &mut buf, path)?;
            *v = f64::from_le_bytes(buf);
        }
        let tensor = Tensor::new(shape, values)
            .map_err(|e| Error::format(path, format!("inconsistent entry for {name}: {e}")))?;
        entries.push((name, tensor, trainable));
    }
    // anything after the last entry means the file was not written by us
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after last entry"));
    }
    Ok(LoadedCheckpoint { meta, entries })
}

/// Restores every checkpoint entry into `store`; the set of names must match
/// exactly.
pub fn restore_into<M>(loaded: &LoadedCheckpoint<M>, store: &mut ParamStore, path: &Path) -> Result<()> {
    if loaded.entries.len() != store.len() {
        return Err(Error::format(
            path,
            format!(
                "checkpoint has {} tensors, model expects {}",
                loaded.entries.len(),
                store.len()
            ),
        ));
    }
    for (name, tensor, _) in &loaded.entries {
        store.restore(name, tensor.clone())?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(path, "truncated checkpoint")
        } else {
            Error::io(path, e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}
