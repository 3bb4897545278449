//! Rank-3 time-series tensors and a small reverse-mode autodiff tape.
//!
//! Activations are laid out `(t, s, f)`: time outermost, filters innermost.
//! Convolution kernels are rank-4 with layout `(k_t, k_s, f_in, f_out)`, so
//! the output-filter axis is contiguous.

mod graph;
pub mod kernels;
mod optim;
mod params;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use graph::{Graph, Grads, NodeId};
pub use optim::{Adam, Optimizer, Sgd};
pub use params::{Param, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("{op}: invalid argument: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub t: usize,
    pub s: usize,
    pub f: usize,
}

impl Shape3 {
    pub const fn new(t: usize, s: usize, f: usize) -> Self {
        Self { t, s, f }
    }

    pub const fn len(&self) -> usize {
        self.t * self.s * self.f
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, t: usize, s: usize, f: usize) -> usize {
        (t * self.s + s) * self.f + f
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.t, self.s, self.f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelShape {
    pub kt: usize,
    pub ks: usize,
    pub f_in: usize,
    pub f_out: usize,
}

impl KernelShape {
    pub const fn new(kt: usize, ks: usize, f_in: usize, f_out: usize) -> Self {
        Self { kt, ks, f_in, f_out }
    }

    pub const fn len(&self) -> usize {
        self.kt * self.ks * self.f_in * self.f_out
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, kt: usize, ks: usize, fi: usize, fo: usize) -> usize {
        ((kt * self.ks + ks) * self.f_in + fi) * self.f_out + fo
    }
}

impl fmt::Display for KernelShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.kt, self.ks, self.f_in, self.f_out)
    }
}

/// Shape of any value living on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rank", rename_all = "snake_case")]
pub enum Dims {
    Tensor(Shape3),
    Kernel(KernelShape),
}

impl Dims {
    pub const fn vector(n: usize) -> Self {
        Dims::Tensor(Shape3::new(1, 1, n))
    }

    pub const fn scalar() -> Self {
        Dims::Tensor(Shape3::new(1, 1, 1))
    }

    pub const fn len(&self) -> usize {
        match self {
            Dims::Tensor(s) => s.len(),
            Dims::Kernel(k) => k.len(),
        }
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dims::Tensor(s) => s.fmt(f),
            Dims::Kernel(k) => k.fmt(f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output length `ceil(in / stride)`; zero padding split evenly with
    /// the odd element on the trailing side.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Stride {
    pub t: usize,
    pub s: usize,
}

impl Stride {
    pub const fn new(t: usize, s: usize) -> Self {
        Self { t, s }
    }

    pub const fn unit() -> Self {
        Self { t: 1, s: 1 }
    }
}

/// Dense `(t, s, f)` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    shape: Shape3,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor3 {
    pub fn new(shape: Shape3, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() || shape.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                left: shape.to_string(),
                right: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
            requires_grad: false,
        }
    }

    pub fn filled(shape: Shape3, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn get(&self, t: usize, s: usize, f: usize) -> f64 {
        self.data[self.shape.index(t, s, f)]
    }
}

pub(crate) fn mismatch(op: &'static str, left: impl fmt::Display, right: impl fmt::Display) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_string(),
        right: right.to_string(),
    }
}
