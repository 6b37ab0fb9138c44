//! `.phmt` tensor files.
//!
//! Layout: magic `PHMT`, `u32` version, `u8` dtype (0 = f32, 1 = f64),
//! `u8` rank, `rank × u64` dims, then the row-major payload. All integers
//! and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{PhmError, Result};
use crate::linalg::Matrix;

const MAGIC: &[u8; 4] = b"PHMT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            _ => Err(PhmError::Format(format!("unknown dtype code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(PhmError::Dimension(format!(
                "tensor dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self { dims: vec![m.rows(), m.cols()], data: m.data().to_vec() }
    }

    pub fn from_vector(v: &[f64]) -> Self {
        Self { dims: vec![v.len()], data: v.to_vec() }
    }

    /// Rank-1 tensors become a single row.
    pub fn into_matrix(self) -> Result<Matrix> {
        match self.dims.as_slice() {
            [r, c] => Matrix::from_vec(*r, *c, self.data),
            [n] => Matrix::from_vec(1, *n, self.data),
            d => Err(PhmError::Format(format!("expected a rank-1 or rank-2 tensor, got dims {d:?}"))),
        }
    }
}

pub fn encode(t: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    if t.dims.len() > u8::MAX as usize {
        return Err(PhmError::Format("tensor rank exceeds 255".into()));
    }
    let width = if dtype == DType::F32 { 4 } else { 8 };
    let mut out = Vec::with_capacity(10 + 8 * t.dims.len() + width * t.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(t.dims.len() as u8);
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in &t.data {
        match dtype {
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    rest: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.rest.len() < n {
            return Err(PhmError::Format("truncated tensor file".into()));
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Ok(head)
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Tensor, DType)> {
    let mut cur = Cursor { rest: bytes };
    if cur.take(4)? != MAGIC {
        return Err(PhmError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(PhmError::Format(format!("unsupported tensor file version {version}")));
    }
    let dtype = DType::from_code(cur.take(1)?[0])?;
    let rank = cur.take(1)?[0] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        dims.push(usize::try_from(d).map_err(|_| PhmError::Format("dimension overflows usize".into()))?);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| PhmError::Format("element count overflows".into()))?;
    let width = if dtype == DType::F32 { 4 } else { 8 };
    let payload = cur.take(n.checked_mul(width).ok_or_else(|| PhmError::Format("payload overflows".into()))?)?;
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    if !cur.rest.is_empty() {
        return Err(PhmError::Format("trailing bytes after tensor payload".into()));
    }
    Ok((Tensor { dims, data }, dtype))
}

pub fn write(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    let bytes = encode(t, dtype)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read(path: &Path) -> Result<(Tensor, DType)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
