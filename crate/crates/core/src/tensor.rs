//! Dense row-major tensors over `f32`/`f64` and their flat binary encoding.

use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SQTN";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u32 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Checkpoint(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Element type of a [`Tensor`]. Implemented for `f32` (training) and `f64` (verification).
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: DType;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn put_le(self, out: &mut Vec<u8>);

    fn get_le(bytes: &[u8]) -> Self;

    /// Bit pattern widened to `u64`, for bitwise comparisons.
    fn bits(self) -> u64;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn of(v: f64) -> Self {
        v as f32
    }

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }

    fn bits(self) -> u64 {
        u64::from(self.to_bits())
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn of(v: f64) -> Self {
        v
    }

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }

    fn bits(self) -> u64 {
        self.to_bits()
    }
}

/// Initialisation scheme for [`Tensor::create`].
#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[low, high)` from a ChaCha8 stream seeded with `seed`.
    Uniform { low: f64, high: f64, seed: u64 },
    FromValues(Vec<f64>),
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor from signed dimensions; any negative dimension is a shape error.
    pub fn create(dims: &[i64], init: Init) -> Result<Self> {
        let mut shape = Vec::with_capacity(dims.len());
        for &d in dims {
            if d < 0 {
                return Err(Error::shape(format!("negative dimension {d} in {dims:?}")));
            }
            shape.push(d as usize);
        }
        let n = numel(&shape);
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Uniform { low, high, seed } => {
                if !(low < high) {
                    return Err(Error::invalid(format!("empty uniform range [{low}, {high})")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| T::of(rng.gen_range(low..high))).collect()
            }
            Init::FromValues(values) => {
                if values.len() != n {
                    return Err(Error::shape(format!(
                        "{} values for shape {shape:?} ({n} elements)",
                        values.len()
                    )));
                }
                values.into_iter().map(T::of).collect()
            }
        };
        Ok(Tensor { shape, data })
    }

    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel(shape)],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::one(); numel(shape)],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn uniform(shape: &[usize], low: f64, high: f64, rng: &mut impl Rng) -> Self {
        let data = (0..numel(shape))
            .map(|_| T::of(rng.gen_range(low..high)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element at a multi-index (row-major).
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range for axis {i} of size {dim}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Bitwise equality of shape and every element.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Flat little-endian encoding: magic, version, dtype, rank, dims, then elements.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.shape.len() + self.data.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&T::DTYPE.code().to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            v.put_le(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = read_header(bytes)?;
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor dtype {:?} does not match requested {:?}",
                header.dtype,
                T::DTYPE
            )));
        }
        let width = header.dtype.size_of();
        let n = numel(&header.shape);
        let body = &bytes[header.body_offset..];
        if body.len() != n * width {
            return Err(Error::Checkpoint(format!(
                "tensor body has {} bytes, expected {} for shape {:?}",
                body.len(),
                n * width,
                header.shape
            )));
        }
        let data = body.chunks_exact(width).map(T::get_le).collect();
        Ok(Tensor {
            shape: header.shape,
            data,
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

struct Header {
    dtype: DType,
    shape: Vec<usize>,
    body_offset: usize,
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Checkpoint("truncated tensor header".into()))
}

fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a tensor blob (bad magic)".into()));
    }
    let version = read_u32(bytes, 4)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "tensor format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let dtype = DType::from_code(read_u32(bytes, 8)?)?;
    let rank = read_u32(bytes, 12)? as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut at = 16;
    for _ in 0..rank {
        let raw = bytes
            .get(at..at + 8)
            .ok_or_else(|| Error::Checkpoint("truncated tensor shape".into()))?;
        shape.push(u64::from_le_bytes(raw.try_into().expect("8 bytes")) as usize);
        at += 8;
    }
    Ok(Header {
        dtype,
        shape,
        body_offset: at,
    })
}

/// Reads only the dtype from an encoded tensor.
pub fn peek_dtype(bytes: &[u8]) -> Result<DType> {
    Ok(read_header(bytes)?.dtype)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_ones() {
        let z = Tensor::<f64>::create(&[2, 2], Init::Zeros).unwrap();
        assert_eq!(z.shape(), &[2, 2]);
        assert_eq!(z.data(), &[0.0; 4]);
        let o = Tensor::<f64>::create(&[3], Init::Ones).unwrap();
        assert_eq!(o.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn uniform_is_deterministic_per_seed() {
        let init = Init::Uniform {
            low: -1.0,
            high: 1.0,
            seed: 7,
        };
        let a = Tensor::<f64>::create(&[2], init.clone()).unwrap();
        let b = Tensor::<f64>::create(&[2], init).unwrap();
        assert!(a.bitwise_eq(&b));
        let c = Tensor::<f64>::create(
            &[2],
            Init::Uniform {
                low: -1.0,
                high: 1.0,
                seed: 8,
            },
        )
        .unwrap();
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn negative_dimension_is_shape_error() {
        let err = Tensor::<f32>::create(&[2, -1], Init::Zeros).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn from_values_checks_count() {
        assert!(Tensor::<f32>::create(&[2, 2], Init::FromValues(vec![1.0; 3])).is_err());
    }

    #[test]
    fn binary_round_trip_is_bitwise() {
        let t = Tensor::<f32>::create(
            &[3, 2],
            Init::Uniform {
                low: -3.0,
                high: 3.0,
                seed: 1,
            },
        )
        .unwrap();
        let back = Tensor::<f32>::from_bytes(&t.to_bytes()).unwrap();
        assert!(t.bitwise_eq(&back));
    }

    #[test]
    fn truncated_or_mistyped_blob_is_rejected() {
        let t = Tensor::<f64>::ones(&[4]);
        let bytes = t.to_bytes();
        assert!(Tensor::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Tensor::<f32>::from_bytes(&bytes).is_err());
        assert!(Tensor::<f64>::from_bytes(b"nope").is_err());
    }
}
