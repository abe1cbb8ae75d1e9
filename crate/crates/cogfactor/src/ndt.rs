//! The NDT binary tensor container.
//!
//! Layout, all little endian:
//!
//! ```text
//! bytes 0..4   magic "NDT1"
//! byte  4      dtype code: 1 = f64, 2 = f32, 3 = i64
//! byte  5      ndim
//! then         ndim × u64 dimensions
//! then         row-major payload
//! ```
//!
//! A 2x3 f64 tensor is therefore exactly 4 + 1 + 1 + 2*8 + 6*8 = 70
//! bytes. Reads and writes round-trip bit-exactly.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, FormatError, Result};

const MAGIC: &[u8; 4] = b"NDT1";

#[derive(Debug, Clone, PartialEq)]
pub enum NdtData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I64(Vec<i64>),
}

impl NdtData {
    pub fn len(&self) -> usize {
        match self {
            NdtData::F64(v) => v.len(),
            NdtData::F32(v) => v.len(),
            NdtData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_code(&self) -> u8 {
        match self {
            NdtData::F64(_) => 1,
            NdtData::F32(_) => 2,
            NdtData::I64(_) => 3,
        }
    }

    fn elem_size(&self) -> usize {
        match self {
            NdtData::F64(_) => 8,
            NdtData::F32(_) => 4,
            NdtData::I64(_) => 8,
        }
    }
}

/// An n-dimensional tensor with explicit shape and typed payload.
#[derive(Debug, Clone, PartialEq)]
pub struct NdtTensor {
    pub shape: Vec<usize>,
    pub data: NdtData,
}

impl NdtTensor {
    pub fn new(shape: Vec<usize>, data: NdtData) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Invalid(format!(
                "shape {shape:?} implies {expected} elements, payload has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_array2(a: &Array2<f64>) -> Self {
        Self {
            shape: vec![a.nrows(), a.ncols()],
            data: NdtData::F64(a.iter().copied().collect()),
        }
    }

    pub fn from_array1(a: &Array1<f64>) -> Self {
        Self { shape: vec![a.len()], data: NdtData::F64(a.to_vec()) }
    }

    pub fn from_i64(values: Vec<i64>) -> Self {
        Self { shape: vec![values.len()], data: NdtData::I64(values) }
    }

    pub fn to_array2(&self) -> Result<Array2<f64>> {
        let (rows, cols) = match self.shape[..] {
            [r, c] => (r, c),
            _ => {
                return Err(Error::Invalid(format!(
                    "expected a 2-d f64 tensor, got shape {:?}",
                    self.shape
                )))
            }
        };
        match &self.data {
            NdtData::F64(values) => Array2::from_shape_vec((rows, cols), values.clone())
                .map_err(|e| Error::Invalid(e.to_string())),
            other => Err(Error::Invalid(format!(
                "expected f64 payload, got dtype code {}",
                other.dtype_code()
            ))),
        }
    }

    pub fn to_array1(&self) -> Result<Array1<f64>> {
        match (&self.shape[..], &self.data) {
            ([_], NdtData::F64(values)) => Ok(Array1::from_vec(values.clone())),
            _ => Err(Error::Invalid(format!(
                "expected a 1-d f64 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn to_i64(&self) -> Result<Vec<i64>> {
        match (&self.shape[..], &self.data) {
            ([_], NdtData::I64(values)) => Ok(values.clone()),
            _ => Err(Error::Invalid(format!(
                "expected a 1-d i64 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }
}

/// Serializes a tensor to its on-disk byte representation.
pub fn tensor_to_bytes(tensor: &NdtTensor) -> Vec<u8> {
    let payload = tensor.data.len() * tensor.data.elem_size();
    let mut bytes = Vec::with_capacity(6 + tensor.shape.len() * 8 + payload);
    bytes.extend_from_slice(MAGIC);
    bytes.push(tensor.data.dtype_code());
    bytes.push(tensor.shape.len() as u8);
    for &dim in &tensor.shape {
        bytes.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    match &tensor.data {
        NdtData::F64(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
        NdtData::F32(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
        NdtData::I64(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
    }
    bytes
}

/// Parses a tensor from bytes, rejecting malformed containers.
pub fn tensor_from_bytes(bytes: &[u8]) -> std::result::Result<NdtTensor, FormatError> {
    let found = bytes.len() as u64;
    if bytes.len() < 6 {
        return Err(FormatError::TruncatedFile { needed: 6, found });
    }
    if &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let dtype = bytes[4];
    let elem_size: u64 = match dtype {
        1 | 3 => 8,
        2 => 4,
        other => return Err(FormatError::UnsupportedDtype(other)),
    };
    let ndim = bytes[5] as usize;
    let header = 6 + 8 * ndim as u64;
    if found < header {
        return Err(FormatError::TruncatedFile { needed: header, found });
    }
    let mut shape_u64 = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let start = 6 + 8 * i;
        let dim = u64::from_le_bytes(bytes[start..start + 8].try_into().unwrap());
        shape_u64.push(dim);
    }
    let n_elements = shape_u64
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= usize::MAX as u64 / 8)
        .ok_or_else(|| FormatError::Oversized { shape: shape_u64.clone() })?;
    let needed = header + n_elements * elem_size;
    if found < needed {
        return Err(FormatError::TruncatedFile { needed, found });
    }
    if found > needed {
        return Err(FormatError::TrailingData);
    }
    let payload = &bytes[header as usize..];
    let data = match dtype {
        1 => NdtData::F64(
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
        2 => NdtData::F32(
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
        3 => NdtData::I64(
            payload.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
        _ => unreachable!(),
    };
    Ok(NdtTensor { shape: shape_u64.into_iter().map(|d| d as usize).collect(), data })
}

/// Writes a tensor to disk atomically (temp file then rename).
pub fn write_tensor(path: impl AsRef<Path>, tensor: &NdtTensor) -> Result<()> {
    crate::io::atomic_write(path.as_ref(), &tensor_to_bytes(tensor))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<NdtTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    tensor_from_bytes(&bytes).map_err(|e| Error::format(path, e))
}
