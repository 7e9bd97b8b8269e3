//! The `MDT1` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MDT1" | dtype: u8 | ndim: u8 | dims: ndim x u32 | payload (row-major)
//! ```
//!
//! dtype codes: 0 = u8, 1 = i64, 2 = f32, 3 = f64. `ndim` is 1..=4 and the
//! payload length must be exactly `product(dims) * dtype_size`.

use alloc::vec::Vec;

pub const MAGIC: &[u8; 4] = b"MDT1";
pub const MAX_NDIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    U8,
    I64,
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::U8 => 0,
            DType::I64 => 1,
            DType::F32 => 2,
            DType::F64 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<DType, TensorError> {
        Ok(match code {
            0 => DType::U8,
            1 => DType::I64,
            2 => DType::F32,
            3 => DType::F64,
            other => return Err(TensorError::UnsupportedDtype(other)),
        })
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::I64 | DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    U8(Vec<u8>),
    I64(Vec<i64>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::U8(_) => DType::U8,
            TensorData::I64(_) => DType::I64,
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::U8(v) => v.len(),
            TensorData::I64(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("ndim {0} outside 1..=4")]
    NdimOutOfRange(usize),
    #[error("shape holds {expected} elements but data has {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("dimension {0} does not fit in u32")]
    DimTooLarge(usize),
    #[error("missing MDT1 magic")]
    BadMagic,
    #[error("header declares {expected} payload bytes but {actual} are present")]
    HeaderInvalid { expected: usize, actual: usize },
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Tensor, TensorError> {
        if shape.is_empty() || shape.len() > MAX_NDIM {
            return Err(TensorError::NdimOutOfRange(shape.len()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I64(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

/// Serializes a tensor into `MDT1` bytes.
pub fn encode(t: &Tensor) -> Result<Vec<u8>, TensorError> {
    let ndim = t.shape.len();
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(TensorError::NdimOutOfRange(ndim));
    }
    let expected: usize = t.shape.iter().product();
    if expected != t.data.len() {
        return Err(TensorError::ShapeMismatch {
            expected,
            actual: t.data.len(),
        });
    }
    let mut out = Vec::with_capacity(6 + 4 * ndim + expected * t.dtype().size());
    out.extend_from_slice(MAGIC);
    out.push(t.dtype().code());
    out.push(ndim as u8);
    for &d in &t.shape {
        let d32 = u32::try_from(d).map_err(|_| TensorError::DimTooLarge(d))?;
        out.extend_from_slice(&d32.to_le_bytes());
    }
    match &t.data {
        TensorData::U8(v) => out.extend_from_slice(v),
        TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

/// Parsed `MDT1` header: dtype, dims and the offset of the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub payload_offset: usize,
}

/// Parses the header and checks it against the payload length.
pub fn read_header(bytes: &[u8]) -> Result<Header, TensorError> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(TensorError::BadMagic);
    }
    let dtype = DType::from_code(bytes[4])?;
    let ndim = bytes[5] as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(TensorError::NdimOutOfRange(ndim));
    }
    let payload_offset = 6 + 4 * ndim;
    if bytes.len() < payload_offset {
        return Err(TensorError::HeaderInvalid {
            expected: payload_offset,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[6..payload_offset]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected = dims
        .iter()
        .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
        .unwrap_or(usize::MAX);
    let actual = bytes.len() - payload_offset;
    if expected != actual {
        return Err(TensorError::HeaderInvalid { expected, actual });
    }
    Ok(Header {
        dtype,
        dims,
        payload_offset,
    })
}

/// Deserializes `MDT1` bytes.
pub fn decode(bytes: &[u8]) -> Result<Tensor, TensorError> {
    let header = read_header(bytes)?;
    let payload = &bytes[header.payload_offset..];
    let data = match header.dtype {
        DType::U8 => TensorData::U8(payload.to_vec()),
        DType::I64 => TensorData::I64(
            payload
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(Tensor {
        shape: header.dims,
        data,
    })
}
