//! File persistence primitives: atomic writes, content hashing, the flat
//! binary sample-block format, and loss-trace CSVs.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes via a temporary file in the same directory plus rename, so
/// readers never observe a partially written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256_hex(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Sample block: `[u32 count][u32 dim]` then `count * dim` little-endian
/// 32-bit floats, row major.
pub fn sample_block_bytes(samples: &[Tensor]) -> Result<Vec<u8>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("sample block needs at least one sample".into()));
    }
    let dim = samples[0].len();
    let mut out = Vec::with_capacity(8 + samples.len() * dim * 4);
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for s in samples {
        if s.len() != dim || s.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                expected: vec![dim],
                got: s.shape().to_vec(),
            });
        }
        for v in s.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn parse_sample_block(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let header = |what: &str| Error::Checkpoint(format!("sample block truncated at {what}"));
    if bytes.len() < 8 {
        return Err(header("header"));
    }
    let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + count * dim * 4;
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "sample block length {} does not match header ({count} x {dim})",
            bytes.len()
        )));
    }
    let mut samples = Vec::with_capacity(count);
    let mut off = 8;
    for _ in 0..count {
        let mut data = Vec::with_capacity(dim);
        for _ in 0..dim {
            data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
            off += 4;
        }
        samples.push(Tensor::from_vec(data));
    }
    Ok(samples)
}

pub fn write_sample_block(path: &Path, samples: &[Tensor]) -> Result<String> {
    let bytes = sample_block_bytes(samples)?;
    atomic_write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_sample_block(path: &Path) -> Result<Vec<Tensor>> {
    parse_sample_block(&fs::read(path)?)
}

/// Loss trace as `iteration,loss` CSV, 1-based iterations.
pub fn loss_trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("iteration,loss\n");
    for (i, loss) in trace.iter().enumerate() {
        out.push_str(&format!("{},{loss}\n", i + 1));
    }
    out
}
