//! Tensor files, PGM export and the dataset manifest.
//!
//! Tensor file layout: magic `TNSR1`, little-endian `u32` rank, `rank`
//! little-endian `u32` dimensions, then the row-major payload as
//! little-endian `f64`.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::data::Dataset;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 5] = b"TNSR1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic")]
    BadMagic,
    #[error("file truncated")]
    Truncated,
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("bad shape {0:?}")]
    BadShape(Vec<u64>),
    #[error("expected a single-channel image, got shape {0:?}")]
    NotGray(Vec<usize>),
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * t.shape().len() + 8 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, IoError> {
    if bytes.len() < TENSOR_MAGIC.len() {
        return Err(IoError::Truncated);
    }
    if &bytes[..5] != TENSOR_MAGIC {
        return Err(IoError::BadMagic);
    }
    let u32_at = |pos: usize| -> Result<u32, IoError> {
        let b = bytes.get(pos..pos + 4).ok_or(IoError::Truncated)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    };
    let rank = u32_at(5)? as usize;
    if rank == 0 {
        return Err(IoError::BadShape(Vec::new()));
    }
    let dims_end = 9usize.checked_add(rank.checked_mul(4).ok_or(IoError::Truncated)?).ok_or(IoError::Truncated)?;
    if bytes.len() < dims_end {
        return Err(IoError::Truncated);
    }
    let dims: Vec<u64> = (0..rank).map(|k| u32_at(9 + 4 * k).map(u64::from)).collect::<Result<_, _>>()?;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| if d == 0 { None } else { acc.checked_mul(d as usize) })
        .ok_or_else(|| IoError::BadShape(dims.clone()))?;
    let payload_len = count.checked_mul(8).ok_or_else(|| IoError::BadShape(dims.clone()))?;
    let end = dims_end.checked_add(payload_len).ok_or_else(|| IoError::BadShape(dims.clone()))?;
    let payload = bytes.get(dims_end..end).ok_or(IoError::Truncated)?;
    if end != bytes.len() {
        return Err(IoError::Trailing(bytes.len() - end));
    }
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(dims.iter().map(|&d| d as usize).collect(), data).map_err(|_| IoError::BadShape(dims))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<(), IoError> {
    std::fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor, IoError> {
    decode_tensor(&std::fs::read(path)?)
}

/// Binary P5 PGM bytes of a `1×H×W` (or `H×W`) image in [0,1]. Values are
/// clamped and quantized with floor(v·255 + 0.5).
pub fn encode_pgm(t: &Tensor) -> Result<Vec<u8>, IoError> {
    let (h, w) = match t.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        other => return Err(IoError::NotGray(other.to_vec())),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8));
    Ok(out)
}

pub fn export_pgm(path: &Path, t: &Tensor) -> Result<(), IoError> {
    std::fs::write(path, encode_pgm(t)?)?;
    Ok(())
}

/// Writes `x_XXXX.tnsr` / `y_XXXX.tnsr` for every sample under `dir` and
/// returns the manifest CSV text (index,split,family,path_x,path_y). Paths
/// in the manifest are relative to `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<String, IoError> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("index,split,family,path_x,path_y\n");
    for s in &data.samples {
        let px = format!("x_{:05}.tnsr", s.index);
        let py = format!("y_{:05}.tnsr", s.index);
        save_tensor(&dir.join(&px), &s.x)?;
        save_tensor(&dir.join(&py), &s.y)?;
        let _ = writeln!(manifest, "{},{},{},{},{}", s.index, s.split, data.spec.family, px, py);
    }
    std::fs::write(dir.join("manifest.csv"), &manifest)?;
    Ok(manifest)
}
