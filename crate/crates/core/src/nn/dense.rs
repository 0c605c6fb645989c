use rand_chacha::ChaCha8Rng;

use super::{glorot_uniform, Activation, ParamId, ParamStore, Session};
use crate::tensor::{Tensor, TensorError, Var};

/// `activation(x·W + b)` with `W: [in × out]`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    in_dim: usize,
    out_dim: usize,
}

impl DenseLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            glorot_uniform(rng, &[in_dim, out_dim], in_dim, out_dim),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        DenseLayer {
            weight,
            bias,
            activation,
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `x` is `[in]` or `[batch × in]`.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var, TensorError> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let h = s.graph.matmul(x, w)?;
        let h = s.graph.add(h, b)?;
        Ok(self.activation.apply(&mut s.graph, h))
    }
}
