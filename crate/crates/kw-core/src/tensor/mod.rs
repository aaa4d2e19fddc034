//! Dense `f64` tensors and the operations the KernelWarehouse layer needs.
//!
//! Layout is row-major throughout. Activations are indexed
//! `(batch, channel, height, width)`, kernels `(filters, channels, kh, kw)`.
//! Tensors are immutable once produced by an operation; every operation is a
//! pure function of its inputs with a fixed summation order, so repeated runs
//! are bit-identical.

pub mod gradcheck;
pub mod ops;
pub mod tape;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Errors from tensor operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorError {
    /// Operand shapes do not line up for the named operation.
    ShapeMismatch { op: &'static str, detail: String },
    /// A scalar argument (stride, epsilon, ...) is out of range.
    InvalidArgument { op: &'static str, detail: String },
    /// An evaluation produced a non-finite value.
    NonFinite { op: &'static str, detail: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, detail } => {
                write!(f, "{op}: shape mismatch: {detail}")
            }
            TensorError::InvalidArgument { op, detail } => {
                write!(f, "{op}: invalid argument: {detail}")
            }
            TensorError::NonFinite { op, detail } => {
                write!(f, "{op}: non-finite value: {detail}")
            }
        }
    }
}

impl core::error::Error for TensorError {}

pub type Result<T> = core::result::Result<T, TensorError>;

/// Dense N-dimensional array of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Constant-filled tensor.
    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Wrap existing data; the element count must match the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                detail: alloc::format!(
                    "shape {:?} needs {} elements, got {}",
                    shape,
                    expect,
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Build elementwise from the flat index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    /// Scalar (rank-0-as-[1]) tensor.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same data viewed under a different shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Tensor::from_vec(shape, self.data.clone())
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "item",
                detail: alloc::format!("expected a scalar, shape is {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match exactly.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "max_abs_diff",
                detail: alloc::format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}
