use rand_chacha::ChaCha8Rng;

use super::{glorot_uniform, ParamId, ParamStore, Session};
use crate::tensor::{Tensor, TensorError, Var};

/// One kernel width of a [`Conv1DBank`].
#[derive(Debug, Clone)]
pub struct ConvBranch {
    pub width: usize,
    pub filters: usize,
    /// `[width × in_dim × filters]`
    pub kernel: ParamId,
    pub bias: ParamId,
}

/// Parallel same-padded time convolutions whose outputs are concatenated on
/// the channel axis, so the output width is the sum of the filter counts.
#[derive(Debug, Clone)]
pub struct Conv1DBank {
    pub branches: Vec<ConvBranch>,
    in_dim: usize,
}

impl Conv1DBank {
    /// `spec` lists `(width, filters)` per branch; widths must be odd.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        spec: &[(usize, usize)],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TensorError> {
        let mut branches = Vec::with_capacity(spec.len());
        for (i, &(width, filters)) in spec.iter().enumerate() {
            if width % 2 == 0 {
                return Err(TensorError::invalid("conv1d", format!("kernel width {width} must be odd")));
            }
            let kernel = store.add(
                format!("{name}.b{i}.kernel"),
                glorot_uniform(rng, &[width, in_dim, filters], width * in_dim, width * filters),
            );
            let bias = store.add(format!("{name}.b{i}.bias"), Tensor::zeros(&[filters]));
            branches.push(ConvBranch {
                width,
                filters,
                kernel,
                bias,
            });
        }
        Ok(Conv1DBank { branches, in_dim })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.branches.iter().map(|b| b.filters).sum()
    }

    /// `z: [L × in_dim] → [L × out_dim]`.
    pub fn forward(&self, s: &mut Session<'_>, z: Var) -> Result<Var, TensorError> {
        let shape = s.graph.shape(z).to_vec();
        if shape.first() == Some(&0) {
            return Err(TensorError::invalid("conv1d", "empty sequence"));
        }
        let mut outs = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let k = s.param(b.kernel);
            let bias = s.param(b.bias);
            let y = s.graph.conv1d(z, k)?;
            outs.push(s.graph.add(y, bias)?);
        }
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        s.graph.concat(&outs, 1)
    }
}
