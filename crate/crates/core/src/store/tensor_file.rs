//! `.tvpx` tensor container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "TVPX"
//! version u32      1
//! dtype   u8       1 = f64
//! ndims   u32
//! dims    ndims × u64
//! payload product(dims) × f64, row-major
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

pub const MAGIC: [u8; 4] = *b"TVPX";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

const FIXED_HEADER: usize = 4 + 4 + 1 + 4;

/// Dense f64 tensor of arbitrary rank.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::EmptyInput("tensor with no dimensions"));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} need {numel} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn into_matrix(self) -> Result<Matrix> {
        match self.dims.as_slice() {
            [r, c] => Matrix::new(*r, *c, self.data),
            other => Err(Error::ShapeMismatch(format!(
                "expected a rank-2 tensor, got dims {other:?}"
            ))),
        }
    }

    /// Splits a rank-3 tensor `[n, rows, cols]` into `n` matrices.
    pub fn into_matrices(self) -> Result<Vec<Matrix>> {
        match self.dims.as_slice() {
            &[n, r, c] => {
                let mut out = Vec::with_capacity(n);
                for chunk in self.data.chunks_exact((r * c).max(1)).take(n) {
                    out.push(Matrix::new(r, c, chunk.to_vec())?);
                }
                Ok(out)
            }
            other => Err(Error::ShapeMismatch(format!(
                "expected a rank-3 tensor, got dims {other:?}"
            ))),
        }
    }
}

impl From<&Matrix> for Tensor {
    fn from(m: &Matrix) -> Self {
        Tensor {
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }
}

/// Stacks equally shaped matrices into a rank-3 tensor.
pub fn stack_matrices(ms: &[Matrix]) -> Result<Tensor> {
    let (r, c) = ms
        .first()
        .map(Matrix::shape)
        .ok_or(Error::EmptyInput("stack_matrices"))?;
    let mut data = Vec::with_capacity(ms.len() * r * c);
    for (i, m) in ms.iter().enumerate() {
        if m.shape() != (r, c) {
            return Err(Error::ShapeMismatch(format!(
                "matrix {i} is {:?}, expected {:?}",
                m.shape(),
                (r, c)
            )));
        }
        data.extend_from_slice(m.data());
    }
    Tensor::new(vec![ms.len(), r, c], data)
}

/// Parsed header of a tensor file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorHeader {
    pub version: u32,
    pub dtype: u8,
    pub dims: Vec<usize>,
}

impl TensorHeader {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn header_len(&self) -> usize {
        FIXED_HEADER + 8 * self.dims.len()
    }
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if let Some(pos) = t.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteData(format!("tensor element {pos}")));
    }
    let mut buf = Vec::with_capacity(FIXED_HEADER + 8 * t.dims.len() + 8 * t.data.len());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(DTYPE_F64);
    buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for d in &t.dims {
        buf.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

fn truncated(expected: usize, found: usize) -> Error {
    Error::TruncatedPayload {
        expected: expected as u64,
        found: found as u64,
    }
}

pub fn decode_header(path: &Path, bytes: &[u8]) -> Result<TensorHeader> {
    if bytes.len() < 4 {
        return Err(truncated(FIXED_HEADER, bytes.len()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    if bytes.len() < FIXED_HEADER {
        return Err(truncated(FIXED_HEADER, bytes.len()));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = bytes[8];
    if dtype != DTYPE_F64 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let ndims = read_u32(bytes, 9) as usize;
    let header_len = FIXED_HEADER + 8 * ndims;
    if bytes.len() < header_len {
        return Err(truncated(header_len, bytes.len()));
    }
    let dims = (0..ndims)
        .map(|i| read_u64(bytes, FIXED_HEADER + 8 * i) as usize)
        .collect();
    Ok(TensorHeader {
        version,
        dtype,
        dims,
    })
}

pub fn decode_tensor(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let header = decode_header(path, bytes)?;
    let start = header.header_len();
    let expected = header
        .dims
        .iter()
        .try_fold(8usize, |acc, d| acc.checked_mul(*d))
        .ok_or_else(|| Error::ShapeMismatch(format!("dims {:?} overflow", header.dims)))?;
    let payload = &bytes[start..];
    if payload.len() < expected {
        return Err(truncated(expected, payload.len()));
    }
    if payload.len() > expected {
        return Err(Error::ShapeMismatch(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(header.dims, data)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(path, &bytes)
}

/// Header and total file size; the payload is validated but not returned.
pub fn read_header(path: impl AsRef<Path>) -> Result<(TensorHeader, u64)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = decode_header(path, &bytes)?;
    decode_tensor(path, &bytes)?;
    Ok((header, bytes.len() as u64))
}
