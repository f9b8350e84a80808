//! `RSFT` tensor files.
//!
//! ```text
//! offset  size       field
//! 0       4          magic "RSFT"
//! 4       1          version = 1
//! 5       1          dtype (1 = binary32, 2 = binary64)
//! 6       1          ndim
//! 7       1          reserved = 0
//! 8       8 * ndim   dims, u64 little-endian
//! ...     prod(dims) * size   payload, row-major little-endian
//! ```

use std::path::Path;

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor4};

pub const TENSOR_MAGIC: &[u8; 4] = b"RSFT";
pub const TENSOR_VERSION: u8 = 1;
/// Largest accepted rank.
pub const MAX_NDIM: usize = 8;
const HEADER_LEN: usize = 8;

/// Decoded payload in its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values converted to `T` (exact when widening).
    pub fn to_vec<T: Scalar>(&self) -> Vec<T> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| T::of(f64::from(x))).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
        }
    }
}

/// A tensor of any rank as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl RawTensor {
    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    /// Rank 4 as is; rank 2 `h x w` becomes `1 x 1 x h x w`.
    pub fn into_tensor4<T: Scalar>(self) -> Result<Tensor4<T>> {
        let shape = match self.dims[..] {
            [n, c, h, w] => [n, c, h, w],
            [h, w] => [1, 1, h, w],
            _ => {
                return Err(Error::Shape(format!(
                    "expected a rank-4 or rank-2 tensor, got dims {:?}",
                    self.dims
                )))
            }
        };
        Tensor4::from_vec(shape, self.data.to_vec())
    }

    pub fn into_density(self) -> Result<DensityMap> {
        DensityMap::from_tensor(&self.into_tensor4::<f64>()?)
    }
}

/// Encodes `data` with the given dims.
pub fn encode_raw<T: Scalar>(dims: &[usize], data: &[T]) -> Result<Vec<u8>> {
    if dims.is_empty() || dims.len() > MAX_NDIM {
        return Err(Error::Shape(format!("rank {} outside 1..={MAX_NDIM}", dims.len())));
    }
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    if count != Some(data.len()) || dims.contains(&0) {
        return Err(Error::Shape(format!(
            "dims {dims:?} do not describe {} values",
            data.len()
        )));
    }
    if let Some(k) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("element {k} is not finite")));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * dims.len() + data.len() * T::DTYPE.size());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&[TENSOR_VERSION, T::DTYPE.code(), dims.len() as u8, 0]);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Non-finite values are rejected, since they cannot be read back.
pub fn encode_tensor<T: Scalar>(t: &Tensor4<T>) -> Result<Vec<u8>> {
    encode_raw(&t.shape(), t.data())
}

/// Decodes one tensor starting at `bytes[0]`, returning it and the number
/// of bytes consumed. Error offsets are reported relative to `base`.
pub(crate) fn decode_prefix(bytes: &[u8], base: usize) -> Result<(RawTensor, usize)> {
    let fail = |at: usize, msg: String| Error::format(base + at, msg);
    if bytes.len() < HEADER_LEN {
        return Err(fail(bytes.len(), format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len())));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(fail(0, "bad magic, expected \"RSFT\"".into()));
    }
    if bytes[4] != TENSOR_VERSION {
        return Err(fail(4, format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5]).ok_or_else(|| fail(5, format!("unknown dtype code {}", bytes[5])))?;
    let ndim = bytes[6] as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(fail(6, format!("rank {ndim} outside 1..={MAX_NDIM}")));
    }
    if bytes[7] != 0 {
        return Err(fail(7, "reserved byte must be zero".into()));
    }
    let dims_end = HEADER_LEN + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(fail(bytes.len(), "truncated dims".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut count = 1usize;
    for k in 0..ndim {
        let at = HEADER_LEN + 8 * k;
        let d = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        let d = usize::try_from(d).ok().filter(|&d| d > 0).ok_or_else(|| fail(at, format!("invalid dim {d}")))?;
        count = count
            .checked_mul(d)
            .filter(|c| c.checked_mul(dtype.size()).is_some())
            .ok_or_else(|| fail(at, "element count overflows".into()))?;
        dims.push(d);
    }
    let size = dtype.size();
    let payload_len = count * size;
    let available = bytes.len() - dims_end;
    if available < payload_len {
        return Err(fail(
            bytes.len(),
            format!("truncated payload: {available} of {payload_len} bytes"),
        ));
    }
    let payload = &bytes[dims_end..dims_end + payload_len];
    let data = match dtype {
        DType::F32 => TensorData::F32(read_values(payload, dims_end + base)?),
        DType::F64 => TensorData::F64(read_values(payload, dims_end + base)?),
    };
    Ok((RawTensor { dims, data }, dims_end + payload_len))
}

fn read_values<T: Scalar>(payload: &[u8], offset: usize) -> Result<Vec<T>> {
    let size = T::DTYPE.size();
    payload
        .chunks_exact(size)
        .enumerate()
        .map(|(k, chunk)| {
            let v = T::read_le(chunk);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::format(offset + k * size, format!("non-finite value at element {k}")))
            }
        })
        .collect()
}

/// Decodes a complete file; trailing bytes are an error.
pub fn decode_tensor(bytes: &[u8]) -> Result<RawTensor> {
    let (t, used) = decode_prefix(bytes, 0)?;
    if used != bytes.len() {
        return Err(Error::format(used, format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}

pub fn save_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor4<T>) -> Result<()> {
    std::fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<RawTensor> {
    decode_tensor(&std::fs::read(path)?)
}

/// Density maps are stored as binary64 `1 x 1 x h x w` tensors.
pub fn save_density(path: impl AsRef<Path>, dm: &DensityMap) -> Result<()> {
    save_tensor(path, &dm.to_tensor::<f64>())
}

pub fn load_density(path: impl AsRef<Path>) -> Result<DensityMap> {
    load_tensor(path)?.into_density()
}
