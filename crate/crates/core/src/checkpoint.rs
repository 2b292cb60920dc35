//! Versioned binary checkpoint format for the denoiser.
//!
//! Layout: magic `MDCK`, u32 format version, u32 arch-JSON length, arch
//! JSON, u32 block count, then per-parameter blocks sorted by name:
//! `[u32 name len][name][u32 ndims][u32 dims...][f32 LE data]`.
//! Round-trip save/load is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::denoiser::{Arch, Denoiser};
use crate::error::{Error, Result};
use crate::io::{atomic_write, sha256_hex};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MDCK";
const VERSION: u32 = 1;

pub fn checkpoint_bytes(model: &Denoiser) -> Result<Vec<u8>> {
    let arch_json = serde_json::to_vec(model.arch())?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(arch_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch_json);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    // BTreeMap iteration is name-sorted, which fixes the byte layout.
    for (name, tensor) in model.params() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.off + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at {what}")));
        }
        let slice = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Denoiser> {
    let mut r = Reader { bytes, off: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let arch_len = r.u32("arch length")? as usize;
    let arch: Arch = serde_json::from_slice(r.take(arch_len, "arch json")?)?;
    let block_count = r.u32("block count")? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..block_count {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
        let ndims = r.u32("ndims")? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(r.u32("dim")? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * 4, "param data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if params.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter block {name}")));
        }
    }
    if r.off != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last block",
            bytes.len() - r.off
        )));
    }
    // from_params re-validates names and shapes against the arch.
    Denoiser::from_params(arch, params)
}

/// Saves atomically; returns the content hash for the run manifest.
pub fn save_checkpoint(model: &Denoiser, path: &Path) -> Result<String> {
    let bytes = checkpoint_bytes(model)?;
    atomic_write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<Denoiser> {
    parse_checkpoint(&fs::read(path)?)
}

/// Load plus content-hash verification; detects any byte-level tampering.
pub fn load_checkpoint_verified(path: &Path, expected_hash: &str) -> Result<Denoiser> {
    let bytes = fs::read(path)?;
    let actual = sha256_hex(&bytes);
    if actual != expected_hash {
        return Err(Error::Checkpoint(format!(
            "hash mismatch for {}: manifest {expected_hash}, file {actual}",
            path.display()
        )));
    }
    parse_checkpoint(&bytes)
}
