use std::path::Path;

use super::dataset::{ChemDataset, NormMeta, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CNNE_MAGIC: &[u8; 4] = b"CNNE";
pub const CNNE_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

/// Serialize a dataset to CNNE1 bytes.
pub fn encode_dataset(ds: &ChemDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let meta = serde_json::to_vec(&ds.meta)?;
    let (n, n_env, n_in, n_out, t) = (ds.len(), ds.n_env(), ds.n_in(), ds.n_out(), ds.n_steps());
    let row = n_env + n_in + t * n_out;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 + meta.len() + 4 * n * row);
    out.extend_from_slice(CNNE_MAGIC);
    for v in [CNNE_VERSION, n as u32, n_env as u32, n_in as u32, n_out as u32, t as u32, ds.meta.split as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for i in 0..n {
        let env = &ds.env.data()[i * n_env..(i + 1) * n_env];
        let x0 = &ds.x0.data()[i * n_in..(i + 1) * n_in];
        let traj = &ds.traj.data()[i * t * n_out..(i + 1) * t * n_out];
        for &v in env.iter().chain(x0).chain(traj) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn u32_at(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| {
            format_err(
                bytes.len(),
                format!("file ends after {} bytes, expected at least {}", bytes.len(), offset + 4),
            )
        })
}

/// Parse CNNE1 bytes.
pub fn decode_dataset(bytes: &[u8]) -> Result<ChemDataset> {
    if bytes.len() < 4 || &bytes[..4] != CNNE_MAGIC {
        return Err(format_err(0, "bad magic, expected \"CNNE\""));
    }
    let version = u32_at(bytes, 4)?;
    if version != CNNE_VERSION {
        return Err(format_err(4, format!("unsupported version {version}, expected {CNNE_VERSION}")));
    }
    let dims: Vec<usize> = (0..5)
        .map(|k| u32_at(bytes, 8 + 4 * k).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let (n, n_env, n_in, n_out, t) = (dims[0], dims[1], dims[2], dims[3], dims[4]);
    let flags = u32_at(bytes, 28)?;
    let split = Split::from_bits(flags & 3).ok_or_else(|| format_err(28, format!("invalid split tag in flags {flags:#x}")))?;
    let meta_len = u32_at(bytes, HEADER_LEN)? as usize;
    let payload_start = HEADER_LEN + 4 + meta_len;
    let row = n_env + n_in + t * n_out;
    let expected = payload_start as u64 + 4 * n as u64 * row as u64;
    if bytes.len() as u64 != expected {
        return Err(format_err(
            bytes.len().min(expected as usize),
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let meta: NormMeta = serde_json::from_slice(&bytes[HEADER_LEN + 4..payload_start])
        .map_err(|e| format_err(HEADER_LEN + 4, format!("invalid metadata: {e}")))?;
    if meta.split != split {
        return Err(format_err(28, "split tag disagrees with metadata"));
    }
    let mut env = Vec::with_capacity(n * n_env);
    let mut x0 = Vec::with_capacity(n * n_in);
    let mut traj = Vec::with_capacity(n * t * n_out);
    let values = bytes[payload_start..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")) as f64);
    for (k, v) in values.enumerate() {
        match k % row {
            c if c < n_env => env.push(v),
            c if c < n_env + n_in => x0.push(v),
            _ => traj.push(v),
        }
    }
    let ds = ChemDataset {
        env: Tensor::new(&[n, n_env], env)?,
        x0: Tensor::new(&[n, n_in], x0)?,
        traj: Tensor::new(&[n, t, n_out], traj)?,
        meta,
    };
    ds.validate()
        .map_err(|e| format_err(HEADER_LEN + 4, format!("metadata disagrees with header: {e}")))?;
    Ok(ds)
}

pub fn write_dataset(ds: &ChemDataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    std::fs::write(path, bytes).map_err(Error::io(path))
}

pub fn read_dataset(path: &Path) -> Result<ChemDataset> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode_dataset(&bytes)
}
