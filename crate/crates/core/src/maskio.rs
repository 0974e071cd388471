//! Mask set files: plain CSV, a compact binary container and a JSON sidecar
//! with generation metadata.
//!
//! Binary layout: `b"SPCM"`, `u32` m, `u32` N, then `m·N` row-major `f64`,
//! all little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::masks::{MaskFamily, MaskSet};
use crate::scalar::Scalar;

pub const MASK_MAGIC: &[u8; 4] = b"SPCM";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskMetadata {
    pub family: MaskFamily,
    pub num_masks: usize,
    pub num_pixels: usize,
    pub seed: Option<u64>,
    pub row_max: Vec<f64>,
    pub exposure_scale: f64,
}

impl MaskMetadata {
    pub fn of<T: Scalar>(masks: &MaskSet<T>) -> Self {
        Self {
            family: masks.family(),
            num_masks: masks.num_masks(),
            num_pixels: masks.num_pixels(),
            seed: masks.seed(),
            row_max: masks.row_max().iter().map(|v| v.to_f64_lossy()).collect(),
            exposure_scale: masks.exposure_scale().to_f64_lossy(),
        }
    }

    /// Attaches this metadata to a matrix read from a mask file.
    pub fn apply<T: Scalar>(&self, matrix: Matrix<T>) -> Result<MaskSet<T>> {
        if (matrix.rows(), matrix.cols()) != (self.num_masks, self.num_pixels) {
            return Err(Error::InvalidDimension(format!(
                "metadata describes {}x{} masks, file holds {}x{}",
                self.num_masks,
                self.num_pixels,
                matrix.rows(),
                matrix.cols()
            )));
        }
        let mut set = MaskSet::from_matrix(matrix, self.family)?
            .with_exposure_scale(T::lit(self.exposure_scale))?;
        if self.row_max.len() == self.num_masks {
            set = set.with_row_max(self.row_max.iter().map(|&v| T::lit(v)).collect());
        }
        if let Some(seed) = self.seed {
            set = set.with_seed(seed);
        }
        Ok(set)
    }
}

pub fn write_masks_csv<T: Scalar, W: Write>(matrix: &Matrix<T>, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for row in matrix.row_iter() {
        w.write_record(row.iter().map(|v| v.to_f64_lossy().to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<mask csv>", e))?;
    Ok(())
}

pub fn read_masks_csv<T: Scalar, R: Read>(input: R, source_name: &str) -> Result<Matrix<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut rows: Vec<Vec<T>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let err = |message: String| Error::ParseLine {
            source_name: source_name.to_string(),
            line,
            message,
        };
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if let Some(first) = rows.first() {
            if rec.len() != first.len() {
                return Err(err(format!("expected {} values, got {}", first.len(), rec.len())));
            }
        }
        let row = rec
            .iter()
            .map(|cell| {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .map(T::lit)
                    .ok_or_else(|| err(format!("`{cell}` is not a finite number")))
            })
            .collect::<Result<Vec<T>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidDimension(format!("{source_name}: no masks")));
    }
    Matrix::from_rows(&rows)
}

pub fn encode_masks_binary<T: Scalar>(matrix: &Matrix<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * matrix.as_slice().len());
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&(matrix.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(matrix.cols() as u32).to_le_bytes());
    for v in matrix.as_slice() {
        out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
    out
}

pub fn decode_masks_binary<T: Scalar>(bytes: &[u8], source_name: &str) -> Result<Matrix<T>> {
    let err = |offset: usize, message: String| Error::Parse {
        source_name: source_name.to_string(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < 12 {
        return Err(err(bytes.len(), "truncated header".into()));
    }
    if &bytes[..4] != MASK_MAGIC {
        return Err(err(0, "unexpected magic, expected SPCM".into()));
    }
    let m = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let want = m
        .checked_mul(n)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| err(4, "dimensions overflow".into()))?;
    let body = &bytes[12..];
    if body.len() != want {
        return Err(err(
            12 + body.len().min(want),
            format!("payload holds {} bytes, {m}x{n} masks need {want}", body.len()),
        ));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Matrix::new(m, n, data)
}

/// Path of the JSON sidecar next to a mask file.
pub fn metadata_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the masks (binary for `.bin`/`.spcm`, CSV otherwise) plus a JSON
/// sidecar.
pub fn save_mask_set<T: Scalar>(masks: &MaskSet<T>, path: &Path) -> Result<()> {
    let bytes = if is_binary_path(path) {
        encode_masks_binary(masks.matrix())
    } else {
        let mut buf = Vec::new();
        write_masks_csv(masks.matrix(), &mut buf)?;
        buf
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta = metadata_path(path);
    let json = serde_json::to_vec_pretty(&MaskMetadata::of(masks))?;
    fs::write(&meta, json).map_err(|e| Error::io(&meta, e))
}

fn is_binary_path(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("bin" | "spcm")
    )
}

/// Reads a mask matrix, detecting the binary container by its magic.
pub fn load_mask_matrix<T: Scalar>(path: &Path) -> Result<Matrix<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    if bytes.starts_with(MASK_MAGIC) {
        decode_masks_binary(&bytes, &name)
    } else {
        read_masks_csv(bytes.as_slice(), &name)
    }
}

/// Reads a mask file and its sidecar when present; without one the set is
/// tagged as learned.
pub fn load_mask_set<T: Scalar>(path: &Path) -> Result<MaskSet<T>> {
    let matrix = load_mask_matrix(path)?;
    let meta = metadata_path(path);
    if meta != path && meta.exists() {
        let text = fs::read(&meta).map_err(|e| Error::io(&meta, e))?;
        let md: MaskMetadata = serde_json::from_slice(&text)?;
        md.apply(matrix)
    } else {
        MaskSet::from_matrix(matrix, MaskFamily::Learned)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{binary_random, hadamard, impulse};

    #[test]
    fn binary_roundtrip_is_exact() {
        let h = hadamard::<f64>(8).unwrap();
        let m = Matrix::from_fn(3, 5, |i, j| (i as f64 + 1.0) / (j as f64 + 3.0));
        for mat in [h.matrix().clone(), m] {
            let bytes = encode_masks_binary(&mat);
            assert_eq!(&bytes[..4], b"SPCM");
            assert_eq!(decode_masks_binary::<f64>(&bytes, "t").unwrap(), mat);
        }
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let m = Matrix::from_fn(3, 4, |i, j| ((i * 7 + j) as f64).sin());
        let mut buf = Vec::new();
        write_masks_csv(&m, &mut buf).unwrap();
        assert_eq!(read_masks_csv::<f64, _>(buf.as_slice(), "t").unwrap(), m);
    }

    #[test]
    fn binary_errors() {
        let bytes = encode_masks_binary(&Matrix::<f64>::identity(2));
        assert!(decode_masks_binary::<f64>(&bytes[..20], "t").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let e = decode_masks_binary::<f64>(&bad, "t").unwrap_err();
        assert!(e.to_string().contains("unexpected magic"));
    }

    #[test]
    fn csv_errors_name_line() {
        let e = read_masks_csv::<f64, _>("1,0\n0\n".as_bytes(), "t").unwrap_err();
        assert!(matches!(e, Error::ParseLine { line: 2, .. }), "{e}");
    }

    #[test]
    fn sidecar_restores_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let br = binary_random::<f64>(8, 4, 42, 0.5).unwrap();
        let ii = impulse::<f64>(4).unwrap();
        for (set, name) in [(br, "br.bin"), (ii, "ii.csv")] {
            let path = dir.path().join(name);
            save_mask_set(&set, &path).unwrap();
            let back = load_mask_set::<f64>(&path).unwrap();
            assert_eq!(back, set);
        }
    }
}
