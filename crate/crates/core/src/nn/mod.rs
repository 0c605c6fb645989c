//! Trainable layers on top of [`crate::tensor`].
//!
//! Initialisation: weights are Glorot-uniform in `±sqrt(6 / (fan_in + fan_out))`,
//! biases start at zero except the LSTM forget gate, which starts at 1.

mod conv;
mod dense;
mod lstm;
mod params;

pub use conv::{ConvBranch, Conv1DBank};
pub use dense::DenseLayer;
pub use lstm::{LstmDirection, LSTMStack};
pub use params::{param_finite_diff_check, Mode, ParamGrads, ParamId, ParamStore, Session};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
    /// Tanh approximation of GeLU.
    Gelu,
    /// `x·tanh(ln(1 + eˣ))`.
    Mish,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Gelu => g.gelu(x),
            Activation::Mish => g.mish(x),
        }
    }
}

pub fn glorot_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// Inverted dropout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSpec {
    rate: f64,
}

impl DropoutSpec {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout rate", format!("{rate} is outside [0, 1)")));
        }
        Ok(DropoutSpec { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Train mode zeroes each element with probability `rate` and scales the
    /// survivors by `1/(1-rate)`; eval mode is the identity.
    pub fn apply(&self, s: &mut Session<'_>, x: Var) -> Var {
        if !s.is_train() || self.rate == 0.0 {
            return x;
        }
        let shape = s.graph.shape(x).to_vec();
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let n: usize = shape.iter().product();
        let rng = s.rng();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let mask = s.input(Tensor::new(shape, mask).expect("shape product"));
        s.graph.mul(x, mask).expect("same shape")
    }
}

/// Mean over the batch of `-log softmax(logits)[label]`, via log-sum-exp.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
    let shape = g.shape(logits).to_vec();
    let (batch, classes) = match shape.as_slice() {
        [c] => (1, *c),
        [b, c] => (*b, *c),
        _ => return Err(TensorError::invalid("cross_entropy", format!("logits must be [batch × C], got {shape:?}"))),
    };
    if labels.len() != batch {
        return Err(TensorError::invalid(
            "cross_entropy",
            format!("{} labels for a batch of {batch}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(TensorError::invalid("cross_entropy", format!("label {bad} out of range for {classes} classes")));
    }
    let logp = g.log_softmax(logits)?;
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * classes + l).collect();
    let picked = g.gather(logp, &idx)?;
    let m = g.mean(picked);
    Ok(g.neg(m))
}
