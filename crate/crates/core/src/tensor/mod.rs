//! Dense row-major tensors and a reverse-mode tape.
//!
//! [`Tensor`] is a plain value: a shape plus finite elements. Differentiation
//! happens on a [`Tape`], which records every primitive applied to its
//! [`Var`] handles and replays them backwards in [`Tape::backward`].

mod element;
pub mod gradcheck;
pub mod io;
pub(crate) mod kernels;
mod tape;

pub use element::{DType, Element};
pub use tape::{AttrValue, Attrs, Gradients, Tape, Var};

use std::fmt;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: invalid attribute: {msg}")]
    Attr { op: &'static str, msg: String },
    #[error("unknown primitive `{0}`")]
    UnknownOp(String),
    #[error("backward: {0}")]
    Backward(String),
    #[error("finite-difference check: {0}")]
    GradCheck(String),
}

pub fn shape_err(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Shape { op, msg: msg.into() }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    /// Builds a tensor, rejecting zero extents, length mismatches and
    /// non-finite elements.
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(shape_err("tensor", format!("zero extent in {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("dims {dims:?} imply {n} elements, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor" });
        }
        Ok(Tensor { dims, data })
    }

    /// Caller guarantees the invariants (used by kernels whose output is
    /// checked separately).
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], v: T) -> Self {
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { dims: vec![1], data: vec![v] }
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self, TensorError> {
        Self::new(dims, data.iter().map(|&v| T::c(v)).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of dims {:?}", self.dims);
        self.data[0]
    }

    pub fn reshape(&self, dims: Vec<usize>) -> Result<Self, TensorError> {
        if dims.iter().product::<usize>() != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {dims:?}", self.dims),
            ));
        }
        Ok(Tensor { dims, data: self.data.clone() })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::c(v.to_f64_lossy())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.dims)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}
