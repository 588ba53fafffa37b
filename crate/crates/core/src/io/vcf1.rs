//! The "VCF1" feature file format: magic `VCF1`, u32 LE row count N, u32 LE
//! column count D, then N*D little-endian f32 values, row-major, one row
//! per frame. Carries PPG matrices (D = ppg dimension) and f0/vuv arrays
//! (D = 1).

use crate::compute::Tensor;
use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"VCF1";

/// Read a feature matrix as a frame-major `[N x D]` tensor.
pub fn read_vcf1(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |detail: &str| Error::MalformedFile {
        format: "VCF1",
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(malformed("missing VCF1 magic"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if rows == 0 || cols == 0 {
        return Err(malformed("zero rows or columns"));
    }
    let expected = 12 + rows * cols * 4;
    if bytes.len() != expected {
        return Err(malformed(&format!(
            "expected {expected} bytes for {rows}x{cols} floats, file has {}",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let t = Tensor {
        shape: vec![rows, cols],
        data,
    };
    t.check_finite("VCF1 contents")?;
    Ok(t)
}

/// Write a frame-major `[N x D]` matrix. Values are stored at f32
/// precision per the format.
pub fn write_vcf1(path: &Path, frames: &Tensor) -> Result<()> {
    if frames.shape.len() != 2 || frames.shape[0] == 0 || frames.shape[1] == 0 {
        return Err(Error::ShapeMismatch {
            context: "write_vcf1",
            expected: "non-empty [N x D] matrix".into(),
            got: format!("{:?}", frames.shape),
        });
    }
    let mut buf = Vec::with_capacity(12 + frames.numel() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(frames.shape[0] as u32).to_le_bytes());
    buf.extend_from_slice(&(frames.shape[1] as u32).to_le_bytes());
    for &v in &frames.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Write a length-N column (f0 contours, vuv flags) as an `[N x 1]` file.
pub fn write_vcf1_column(path: &Path, values: &[f64]) -> Result<()> {
    let t = Tensor {
        shape: vec![values.len(), 1],
        data: values.to_vec(),
    };
    write_vcf1(path, &t)
}
