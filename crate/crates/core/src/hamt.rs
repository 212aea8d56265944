//! `HAMT` tensor dump format.
//!
//! Layout (all little-endian): the magic bytes `HAMT`, a `u32` rank, `rank`
//! `u32` dimensions, then the row-major `f32` payload.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HAMT";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    fn word(bytes: &[u8], at: usize) -> std::result::Result<[u8; 4], String> {
        bytes
            .get(at..at + 4)
            .map(|w| [w[0], w[1], w[2], w[3]])
            .ok_or_else(|| format!("truncated at byte {at}"))
    }

    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err("missing HAMT magic".into());
    }
    let rank = u32::from_le_bytes(word(bytes, 4)?) as usize;
    if rank == 0 {
        return Err("rank must be positive".into());
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(u32::from_le_bytes(word(bytes, 8 + 4 * i)?) as usize);
    }
    let start = 8 + 4 * rank;
    let count: usize = shape.iter().product();
    let expected = start + 4 * count;
    if bytes.len() != expected {
        return Err(format!(
            "expected {expected} bytes for shape {shape:?}, found {}",
            bytes.len()
        ));
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|w| f32::from_le_bytes([w[0], w[1], w[2], w[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|detail| Error::Format {
        path: path.to_path_buf(),
        detail,
    })
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode(t))
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = temp_sibling(path);
    let result = fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        })
        .and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}
