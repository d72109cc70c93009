//! Dense row-major tensors and the numeric kernels built on them.
//!
//! [`Tensor<T>`] is the typed array every kernel works on. [`AnyTensor`] erases
//! the element type so checkpoints and files can carry mixed dtypes.

pub(crate) mod io;
pub mod ops;

pub use io::{decode_tensor, encode_tensor, load_tensor, save_tensor, TENSOR_MAGIC, TENSOR_VERSION};

use std::fmt::Debug;
use std::iter::Sum;

use num_like::NumOps;

use crate::error::{Error, Result};

/// Element type tag; the discriminant is the on-disk dtype code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
    I32 = 3,
    I64 = 4,
}

impl DType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => DType::F32,
            1 => DType::F64,
            2 => DType::U8,
            3 => DType::I32,
            4 => DType::I64,
            _ => return None,
        })
    }

    /// Width of one element in bytes.
    pub fn width(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 | DType::I32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F32 | DType::F64)
    }
}

/// A scalar that can live in a [`Tensor`] and be serialized little-endian.
pub trait Element: Copy + Default + PartialEq + Debug + Send + Sync + 'static {
    const DTYPE: DType;
    fn write_le(self, out: &mut Vec<u8>);
    /// `bytes` has exactly `DTYPE.width()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_element {
    ($t:ty, $dt:expr) => {
        impl Element for $t {
            const DTYPE: DType = $dt;
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

impl_element!(f32, DType::F32);
impl_element!(f64, DType::F64);
impl_element!(u8, DType::U8);
impl_element!(i32, DType::I32);
impl_element!(i64, DType::I64);

mod num_like {
    use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

    pub trait NumOps:
        Add<Output = Self>
        + Sub<Output = Self>
        + Mul<Output = Self>
        + Div<Output = Self>
        + Neg<Output = Self>
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + PartialOrd
        + Sized
    {
    }

    impl NumOps for f32 {}
    impl NumOps for f64 {}
}

/// Floating-point element used by the kernels, losses and the model.
///
/// Training runs in `f32`; gradient checks run the same generic code in `f64`.
pub trait Real: Element + NumOps + Sum {
    fn of(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn powf(self, e: Self) -> Self;
    fn is_finite(self) -> bool;

    fn zero() -> Self {
        Self::of(0.0)
    }
    fn one() -> Self {
        Self::of(1.0)
    }
    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            fn of(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn powf(self, e: Self) -> Self {
                <$t>::powf(self, e)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// Dense row-major N-dimensional array.
///
/// A 0-d tensor (empty shape) holds exactly one scalar. Every extent is at
/// least 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if let Some(pos) = shape.iter().position(|&e| e == 0) {
            return Err(Error::shape(format!("extent {pos} of {shape:?} is zero")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::default())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
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

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Copies sample `index` out of the leading (batch) axis.
    pub fn select_first(&self, index: usize) -> Result<Self> {
        let (&n, rest) = self
            .shape
            .split_first()
            .ok_or_else(|| Error::shape("select_first on a 0-d tensor"))?;
        if index >= n {
            return Err(Error::shape(format!("index {index} out of {n}")));
        }
        let stride: usize = rest.iter().product();
        Ok(Self {
            shape: rest.to_vec(),
            data: self.data[index * stride..(index + 1) * stride].to_vec(),
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(format!(
                    "stack: {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }
}

impl<T: Real> Tensor<T> {
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        self.map(|v| U::of(v.to_f64()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A tensor of any supported dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8(Tensor<u8>),
    I32(Tensor<i32>),
    I64(Tensor<i64>),
}

macro_rules! dispatch {
    ($self:expr, $t:ident => $body:expr) => {
        match $self {
            AnyTensor::F32($t) => $body,
            AnyTensor::F64($t) => $body,
            AnyTensor::U8($t) => $body,
            AnyTensor::I32($t) => $body,
            AnyTensor::I64($t) => $body,
        }
    };
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        dispatch!(self, t => t.dtype())
    }

    pub fn shape(&self) -> &[usize] {
        dispatch!(self, t => t.shape())
    }

    pub fn len(&self) -> usize {
        dispatch!(self, t => t.len())
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Payload size in bytes (element count times dtype width).
    pub fn payload_bytes(&self) -> usize {
        self.len() * self.dtype().width()
    }

    pub fn as_f32(&self) -> Option<&Tensor<f32>> {
        match self {
            AnyTensor::F32(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_u8(&self) -> Option<&Tensor<u8>> {
        match self {
            AnyTensor::U8(t) => Some(t),
            _ => None,
        }
    }

    pub(crate) fn write_payload(&self, out: &mut Vec<u8>) {
        dispatch!(self, t => t.data().iter().for_each(|v| v.write_le(out)))
    }
}

macro_rules! impl_from {
    ($t:ty, $variant:ident) => {
        impl From<Tensor<$t>> for AnyTensor {
            fn from(t: Tensor<$t>) -> Self {
                AnyTensor::$variant(t)
            }
        }
    };
}

impl_from!(f32, F32);
impl_from!(f64, F64);
impl_from!(u8, U8);
impl_from!(i32, I32);
impl_from!(i64, I64);
