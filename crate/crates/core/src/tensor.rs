//! Dense row-major tensors and the HLXT binary format.
//!
//! Training and inference run on `Tensor<f32>`. The `Scalar` trait lets the
//! same kernels run in 64-bit for gradient checking.

use std::fmt::Debug;
use std::io::{Read, Write};
use std::path::Path;

use num_traits::Float;

use crate::error::{HalluxError, Result};

pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Checked constructor: the payload must match the shape and be finite.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(HalluxError::InvalidTensor(format!(
                "shape {shape:?} has a zero dimension"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(HalluxError::InvalidTensor(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(HalluxError::InvalidTensor(format!(
                "non-finite value at flat index {i}"
            )));
        }
        Ok(Self { shape, data })
    }

    /// Unchecked constructor for kernel outputs whose length is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(HalluxError::InvalidTensor(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Rows of the leading axis as a new tensor (a batch slice).
    pub fn row(&self, i: usize) -> Tensor<T> {
        let stride: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        Tensor {
            shape,
            data: self.data[i * stride..(i + 1) * stride].to_vec(),
        }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| {
            HalluxError::InvalidTensor("cannot stack an empty list".into())
        })?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(HalluxError::InvalidTensor(format!(
                    "stack shape mismatch {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl Tensor<f32> {
    /// Little-endian bytes of the payload, used for hashing and persistence.
    pub fn payload_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn bit_eq(&self, other: &Tensor<f32>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

const HLXT_MAGIC: &[u8; 4] = b"HLXT";
const HLXT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// Serialize into HLXT: magic, version u16, dtype u8, ndim u8, shape as u64,
/// then the little-endian payload. All integers little-endian.
pub fn write_hlxt<W: Write>(tensor: &Tensor<f32>, mut w: W) -> Result<()> {
    let ndim = u8::try_from(tensor.ndim())
        .map_err(|_| HalluxError::Format("tensor has more than 255 dims".into()))?;
    w.write_all(HLXT_MAGIC)?;
    w.write_all(&HLXT_VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F32, ndim])?;
    for &d in tensor.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&tensor.payload_bytes())?;
    Ok(())
}

pub fn to_hlxt_bytes(tensor: &Tensor<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + tensor.ndim() * 8 + tensor.len() * 4);
    write_hlxt(tensor, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

pub fn read_hlxt<R: Read>(mut r: R) -> Result<Tensor<f32>> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head)?;
    if &head[..4] != HLXT_MAGIC {
        return Err(HalluxError::Format("bad HLXT magic".into()));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != HLXT_VERSION {
        return Err(HalluxError::Format(format!(
            "unsupported HLXT version {version}"
        )));
    }
    if head[6] != DTYPE_F32 {
        return Err(HalluxError::Format(format!(
            "unsupported HLXT dtype code {}",
            head[6]
        )));
    }
    let ndim = head[7] as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut word = [0u8; 8];
    for _ in 0..ndim {
        r.read_exact(&mut word)?;
        shape.push(u64::from_le_bytes(word) as usize);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn save_hlxt(tensor: &Tensor<f32>, path: &Path) -> Result<()> {
    crate::io_util::write_atomic(path, &to_hlxt_bytes(tensor))
}

pub fn load_hlxt(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path)?;
    read_hlxt(bytes.as_slice())
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn hlxt_round_trip_is_bit_exact(
            shape in proptest::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let mut x = seed;
            let data: Vec<f32> = (0..n).map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((x >> 40) as f32 / (1u64 << 24) as f32) * 200.0 - 100.0
            }).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = read_hlxt(to_hlxt_bytes(&t).as_slice()).unwrap();
            prop_assert!(back.bit_eq(&t));
        }
    }
}
