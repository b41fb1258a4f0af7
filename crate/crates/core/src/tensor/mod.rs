//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records primitive applications in append order; each node
//! keeps its forward value and whatever the vector-Jacobian rule needs.
//! [`Graph::backward`] walks the nodes once in reverse and returns the
//! gradient of a scalar loss with respect to every parameter leaf.
//!
//! ```
//! use micfer::tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.param(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
//! let loss = g.squared_norm(w).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(w).data(), &[2.0, 4.0]);
//! ```

mod adam;
mod gradcheck;
mod graph;
pub mod init;
mod kernels;

pub use adam::{adam_update, Adam, AdamConfig, AdamState};
pub use gradcheck::finite_diff_check;
pub use graph::{logsumexp_row as logsumexp, Binding, CustomOp, Gradients, Graph, ParamId, ParamStore, Primitive, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{primitive}: shape mismatch: {detail}")]
    ShapeMismatch { primitive: String, detail: String },
    #[error("{primitive}: domain error: {detail}")]
    Domain { primitive: String, detail: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("function is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub(crate) fn shape_err(primitive: &str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        primitive: primitive.to_string(),
        detail: detail.into(),
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major `f64` array.
///
/// A zero-rank shape (`[]`) holds exactly one value and is how scalars
/// (losses) are represented.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
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

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Order-sensitive FNV-1a hash over the bit patterns; used to assert
    /// that frozen parameters are untouched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for &d in &self.shape {
            eat(d as u64);
        }
        for v in &self.data {
            eat(v.to_bits());
        }
        h
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.data.len() / self.shape.first().copied().unwrap_or(1);
        &self.data[i * w..(i + 1) * w]
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(shape_err(
                    "stack",
                    format!("{:?} vs {:?}", first.shape, t.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::from_vec(shape, data)
    }
}
