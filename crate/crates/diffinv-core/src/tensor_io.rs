//! Minimal reader/writer for 2-D `f64` tensors in the standard `.npy`
//! container (version 1.0, little-endian, C order). Artifact files keep
//! their own extensions; the payload is interchange-friendly.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Serialize a matrix into `.npy` bytes.
pub fn matrix_to_bytes(m: &Array2<f64>) -> Vec<u8> {
    let header_body = format!(
        "{{'descr': '<f8', 'fortran_order': False, 'shape': ({}, {}), }}",
        m.nrows(),
        m.ncols()
    );
    // Total header (magic + version + length field + dict + padding + '\n')
    // must be a multiple of 64.
    let prefix_len = MAGIC.len() + 2 + 2;
    let unpadded = prefix_len + header_body.len() + 1;
    let padding = (64 - unpadded % 64) % 64;
    let header_len = (header_body.len() + padding + 1) as u16;

    let mut out = Vec::with_capacity(prefix_len + header_len as usize + m.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(header_body.as_bytes());
    out.extend(std::iter::repeat_n(b' ', padding));
    out.push(b'\n');
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parse `.npy` bytes produced by [`matrix_to_bytes`] (or any compatible
/// writer of little-endian C-order f64 matrices).
pub fn matrix_from_bytes(bytes: &[u8], origin: &Path) -> Result<Array2<f64>> {
    let fail = |reason: &str| Error::TensorFormat {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(fail("missing magic"));
    }
    if bytes[6] != 1 {
        return Err(fail("unsupported format version"));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = 10 + header_len;
    if bytes.len() < data_start {
        return Err(fail("truncated header"));
    }
    let header = std::str::from_utf8(&bytes[10..data_start])
        .map_err(|_| fail("header is not utf-8"))?;
    if !header.contains("'<f8'") {
        return Err(fail("expected little-endian f64 payload"));
    }
    if !header.contains("'fortran_order': False") {
        return Err(fail("expected C-order payload"));
    }
    let shape_part = header
        .split("'shape':")
        .nth(1)
        .and_then(|s| s.split('(').nth(1))
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| fail("missing shape"))?;
    let dims: Vec<usize> = shape_part
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| fail("unparsable shape")))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(fail("expected a 2-d tensor"));
    }
    let (rows, cols) = (dims[0], dims[1]);
    let expected = rows * cols * 8;
    let data = &bytes[data_start..];
    if data.len() != expected {
        return Err(fail(&format!("payload is {} bytes, expected {expected}", data.len())));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|_| fail("shape/payload mismatch"))
}

pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&matrix_to_bytes(m)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    matrix_from_bytes(&bytes, path)
}
