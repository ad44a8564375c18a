//! Dense double-precision tensors and a tape-based reverse-mode autodiff
//! engine covering the operations the 3D residual network and its losses
//! need.

mod grad_check;
pub(crate) mod kernels;
mod optim;
mod tape;

pub use grad_check::{numeric_gradient, relative_error};
pub use kernels::{BatchStats, ConvGeom};
pub use optim::Sgd;
pub use tape::{Gradients, NormMode, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension error: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("contract violated: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension {
        op,
        detail: detail.into(),
    })
}

/// Row-major N-dimensional array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return dim_err("tensor", format!("zero-sized axis in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return dim_err(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", self.shape),
            );
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sample `i` of a batched tensor, keeping a leading axis of 1.
    pub fn sample(&self, i: usize) -> Tensor {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[i * per..(i + 1) * per].to_vec(),
        }
    }

    /// Concatenate tensors along axis 0; trailing axes must agree.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = match parts.first() {
            Some(t) => t,
            None => return dim_err("stack", "no tensors"),
        };
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return dim_err("stack", format!("trailing shape {:?} vs {:?}", &p.shape[1..], tail));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Tensor { shape, data })
    }

    pub(crate) fn dims5(&self, op: &'static str) -> Result<[usize; 5]> {
        match self.shape.as_slice() {
            &[a, b, c, d, e] => Ok([a, b, c, d, e]),
            s => dim_err(op, format!("expected 5-d tensor, got shape {s:?}")),
        }
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape.as_slice() {
            &[a, b] => Ok([a, b]),
            s => dim_err(op, format!("expected 2-d tensor, got shape {s:?}")),
        }
    }
}
