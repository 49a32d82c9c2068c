//! Matrix, vector and image files.
//!
//! Binary layout: `b"MPCS"`, `u32` rows, `u32` cols, 4 zero bytes, then
//! `rows * cols` little-endian `f64` values in row-major order. Vectors are
//! stored as `n x 1` matrices.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{MpemError, Result};

const MAGIC: &[u8; 4] = b"MPCS";
const HEADER_LEN: usize = 16;

pub fn encode_matrix(m: &DMatrix<f64>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    buf.extend_from_slice(&[0u8; 4]);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            buf.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    buf
}

pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<DMatrix<f64>> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(MpemError::format(path, "missing MPCS header"));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().unwrap()) as usize;
    let (rows, cols) = (word(4), word(8));
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN));
    if expected != Some(bytes.len()) {
        return Err(MpemError::format(
            path,
            format!(
                "header declares {rows}x{cols} but file holds {} payload bytes",
                bytes.len() - HEADER_LEN
            ),
        ));
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn write_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_matrix(m)).map_err(|e| MpemError::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| MpemError::io(path, e))?;
    decode_matrix(&bytes, path)
}

pub fn write_vector(path: impl AsRef<Path>, v: &[f64]) -> Result<()> {
    write_matrix(path, &DMatrix::from_column_slice(v.len(), 1, v))
}

/// Reads an `n x 1` or `1 x n` file as a vector.
pub fn read_vector(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let m = read_matrix(path)?;
    if m.ncols() != 1 && m.nrows() != 1 {
        return Err(MpemError::format(
            path,
            format!("expected a vector, found {}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(m.as_slice().to_vec())
}

pub fn write_matrix_csv(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| MpemError::io(path, e))
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| MpemError::io(path, e))?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match cols {
            None => cols = Some(fields.len()),
            Some(c) if c != fields.len() => {
                return Err(MpemError::format(
                    path,
                    format!("line {} has {} fields, expected {c}", lineno + 1, fields.len()),
                ))
            }
            _ => {}
        }
        for f in fields {
            let v = f.trim().parse::<f64>().map_err(|_| {
                MpemError::format(path, format!("line {}: bad number {f:?}", lineno + 1))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols.unwrap_or(0), &data))
}

/// 8-bit grayscale image; `pixels[(row, col)]`.
pub fn write_pgm(path: impl AsRef<Path>, pixels: &DMatrix<u8>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(pixels.len() + 32);
    write!(buf, "P5\n{} {}\n255\n", pixels.ncols(), pixels.nrows()).unwrap();
    for r in 0..pixels.nrows() {
        for c in 0..pixels.ncols() {
            buf.push(pixels[(r, c)]);
        }
    }
    fs::write(path, buf).map_err(|e| MpemError::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<DMatrix<u8>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| MpemError::io(path, e))?;
    decode_pgm(&bytes, path)
}

fn decode_pgm(bytes: &[u8], path: &Path) -> Result<DMatrix<u8>> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(MpemError::format(path, "truncated PGM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if tokens[0] != "P5" {
        return Err(MpemError::format(path, "not a binary PGM (P5)"));
    }
    let num = |k: usize| {
        tokens[k]
            .parse::<usize>()
            .map_err(|_| MpemError::format(path, format!("bad PGM header field {:?}", tokens[k])))
    };
    let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval == 0 || maxval > 255 {
        return Err(MpemError::format(path, "only 8-bit PGM is supported"));
    }
    if bytes.len() < pos + width * height {
        return Err(MpemError::format(path, "truncated PGM raster"));
    }
    let raster = &bytes[pos..pos + width * height];
    Ok(DMatrix::from_row_slice(height, width, raster))
}

/// Round and clamp to `0..=255`.
pub fn to_gray(img: &DMatrix<f64>) -> DMatrix<u8> {
    img.map(|v| v.round().clamp(0.0, 255.0) as u8)
}
