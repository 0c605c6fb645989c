//! Dense `f64` tensors and a define-by-run reverse-mode autodiff graph.
//!
//! [`Tensor`] is a plain row-major value. [`Graph`] records every primitive
//! applied to [`Var`] handles and replays the record backwards in
//! [`Graph::backward`]. A graph is rebuilt for every batch and never shared
//! between threads.
//!
//! # Shape rules
//!
//! | primitive | rule |
//! |-----------|------|
//! | `add`, `sub`, `mul`, `div` | NumPy broadcasting: shapes are right-aligned, each dimension pair must be equal or contain a 1 |
//! | `matmul` | `[m×k]·[k×n] → [m×n]`; a rank-1 left operand `[k]` is a row (`→ [n]`), a rank-1 right operand `[k]` is a column (`→ [m]`); two rank-1 operands give their dot product `[]` |
//! | `concat` | all inputs share rank and every dimension except `axis` |
//! | `slice` | `start ≤ end ≤ shape[axis]` |
//! | `reshape` | element count preserved |
//! | `transpose` | rank 2 only |
//! | `sum`, `mean` | over every element (→ `[]`) or over one axis, which is removed |
//! | `softmax`, `log_softmax`, `l2_normalize` | along the last axis, rank ≥ 1 |
//! | `cosine` | pairwise over the last axis: `a[.., D]`, `b[.., D]` → `a.shape[..-1] ++ b.shape[..-1]` |
//! | `conv1d` | `x[L×c]` with kernel `[w×c×f]`, `w` odd, zero same-padding → `[L×f]` |
//! | `gather` | flat indices into any tensor → `[n]` |
//! | elementwise unary ops | any shape |

mod backward;
mod gradcheck;
mod graph;

pub use backward::Gradients;
pub use gradcheck::finite_diff_check;
pub use graph::{Attrs, Graph, Var};

use thiserror::Error;

/// Denominator guard for norms in `l2_normalize` and `cosine`.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("unknown primitive `{0}`")]
    UnknownOp(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{len} values do not fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
}

impl TensorError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Invalid {
            op,
            msg: msg.into(),
        }
    }
}

/// Row-major dense array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::invalid("from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
