//! Binary tensor files.
//!
//! Layout: `b"MASQ"`, version (u16 LE), dtype code (u8, 0 = f64), ndim
//! (u8), one u64 LE per dimension, then the row-major little-endian payload.

use std::fs;
use std::path::Path;

use crate::error::{MasqError, Result};
use crate::numerics::Matrix;

pub const MAGIC: [u8; 4] = *b"MASQ";
pub const VERSION: u16 = 1;
pub const DTYPE_F64: u8 = 0;

const PREFIX_LEN: usize = 4 + 2 + 1 + 1;

/// Serializes a matrix as a 2-D tensor file.
pub fn encode_tensor(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(PREFIX_LEN + 16 + 8 * m.data().len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F64);
    out.push(2);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses tensor bytes. `path` is only used in error messages.
///
/// One-dimensional tensors load as a single row.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let malformed = |detail: String| MasqError::MalformedHeader {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < PREFIX_LEN {
        return Err(malformed(format!("{} bytes is shorter than the fixed header", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(malformed(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(malformed(format!("unsupported version {version}")));
    }
    if bytes[6] != DTYPE_F64 {
        return Err(malformed(format!("unsupported dtype code {}", bytes[6])));
    }
    let ndim = bytes[7] as usize;
    if !(1..=2).contains(&ndim) {
        return Err(malformed(format!("{ndim} dimensions; only 1 and 2 are supported")));
    }
    let header_len = PREFIX_LEN + 8 * ndim;
    if bytes.len() < header_len {
        return Err(malformed("truncated dimension list".to_string()));
    }
    let dims: Vec<u64> = bytes[PREFIX_LEN..header_len]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let (rows, cols) = match dims[..] {
        [n] => (1, n),
        [r, c] => (r, c),
        _ => unreachable!("ndim checked above"),
    };
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| malformed(format!("dimensions {dims:?} overflow")))?;
    let found = (bytes.len() - header_len) as u64;
    if found != expected {
        return Err(MasqError::LengthMismatch {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    let data: Vec<f64> = bytes[header_len..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Matrix::new(rows as usize, cols as usize, data)
}

pub fn write_tensor(path: &Path, m: &Matrix) -> Result<()> {
    fs::write(path, encode_tensor(m)).map_err(|source| MasqError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_tensor(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|source| MasqError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_tensor(&bytes, path)
}
