//! Little-endian binary tensors: `rows: u64`, `cols: u64`, then
//! `rows × cols` `f64` values in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub fn encode(m: &Matrix, out: &mut Vec<u8>) {
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    encode_raw(m, out);
}

/// Values only, no header.
pub fn encode_raw(m: &Matrix, out: &mut Vec<u8>) {
    out.reserve(m.len() * 8);
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn decode_raw(bytes: &[u8], rows: usize, cols: usize) -> Result<Matrix> {
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Truncated {
            expected: (rows * cols * 8) as u64,
            found: bytes.len() as u64,
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn decode(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            expected: 16,
            found: bytes.len() as u64,
        });
    }
    let rows = u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    decode_raw(&bytes[16..], rows, cols)
}

pub fn write_file(path: &Path, m: &Matrix) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + m.len() * 8);
    encode(m, &mut buf);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Matrix> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf).map_err(|e| match e {
        Error::Truncated { .. } => Error::format(path, e.to_string()),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let m = Matrix::from_rows(&[vec![1.0, -0.5]]).unwrap();
        let mut buf = Vec::new();
        encode(&m, &mut buf);
        assert_eq!(&buf[0..8], &1u64.to_le_bytes());
        assert_eq!(&buf[8..16], &2u64.to_le_bytes());
        assert_eq!(&buf[16..24], &1.0f64.to_le_bytes());
        assert_eq!(decode(&buf).unwrap(), m);
        assert!(matches!(decode(&buf[..20]), Err(Error::Truncated { .. })));
    }
}
