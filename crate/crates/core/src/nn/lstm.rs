use rand_chacha::ChaCha8Rng;

use super::{glorot_uniform, ParamId, ParamStore, Session};
use crate::tensor::{Tensor, TensorError, Var};

/// Weights of one direction of one layer. Gate columns are ordered
/// input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmDirection {
    /// `[in × 4h]`
    pub w_ih: ParamId,
    /// `[h × 4h]`
    pub w_hh: ParamId,
    /// `[4h]`
    pub bias: ParamId,
}

/// Stacked (optionally bidirectional) LSTM.
#[derive(Debug, Clone)]
pub struct LSTMStack {
    /// `layers[l][d]`, `d = 0` forward, `d = 1` backward.
    pub layers: Vec<Vec<LstmDirection>>,
    hidden: usize,
    bidirectional: bool,
    in_dim: usize,
}

impl LSTMStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        num_layers: usize,
        bidirectional: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let dirs = if bidirectional { 2 } else { 1 };
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let layer_in = if l == 0 { in_dim } else { dirs * hidden };
            let mut ds = Vec::with_capacity(dirs);
            for d in 0..dirs {
                let p = format!("{name}.l{l}.d{d}");
                let w_ih = store.add(
                    format!("{p}.w_ih"),
                    glorot_uniform(rng, &[layer_in, 4 * hidden], layer_in, 4 * hidden),
                );
                let w_hh = store.add(
                    format!("{p}.w_hh"),
                    glorot_uniform(rng, &[hidden, 4 * hidden], hidden, 4 * hidden),
                );
                let mut b = Tensor::zeros(&[4 * hidden]);
                b.data_mut()[hidden..2 * hidden].fill(1.0);
                let bias = store.add(format!("{p}.bias"), b);
                ds.push(LstmDirection { w_ih, w_hh, bias });
            }
            layers.push(ds);
        }
        LSTMStack {
            layers,
            hidden,
            bidirectional,
            in_dim,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn bidirectional(&self) -> bool {
        self.bidirectional
    }

    /// Width of each output row: `2k` when bidirectional, else `k`.
    pub fn out_dim(&self) -> usize {
        if self.bidirectional {
            2 * self.hidden
        } else {
            self.hidden
        }
    }

    /// `z: [L × in] → (H: [L × out_dim], ẑ: [out_dim])`. `ẑ` joins the final
    /// state of each direction of the top layer: the forward state after the
    /// last step and the backward state after the first.
    pub fn forward(&self, s: &mut Session<'_>, z: Var) -> Result<(Var, Var), TensorError> {
        let len = s.graph.shape(z)[0];
        if len == 0 {
            return Err(TensorError::invalid("lstm", "empty sequence"));
        }
        let mut input = z;
        let mut finals = Vec::new();
        for layer in &self.layers {
            let mut outs = Vec::with_capacity(layer.len());
            finals.clear();
            for (d, dir) in layer.iter().enumerate() {
                let (h_seq, last) = self.run_direction(s, dir, input, len, d == 1)?;
                outs.push(h_seq);
                finals.push(last);
            }
            input = if outs.len() == 1 { outs[0] } else { s.graph.concat(&outs, 1)? };
        }
        let zhat = if finals.len() == 1 { finals[0] } else { s.graph.concat(&finals, 1)? };
        let zhat = s.graph.reshape(zhat, &[self.out_dim()])?;
        Ok((input, zhat))
    }

    fn run_direction(
        &self,
        s: &mut Session<'_>,
        dir: &LstmDirection,
        x: Var,
        len: usize,
        reverse: bool,
    ) -> Result<(Var, Var), TensorError> {
        let h = self.hidden;
        let w_ih = s.param(dir.w_ih);
        let w_hh = s.param(dir.w_hh);
        let bias = s.param(dir.bias);
        let pre = s.graph.matmul(x, w_ih)?;
        let pre = s.graph.add(pre, bias)?;

        let mut state: Option<(Var, Var)> = None;
        let mut rows: Vec<Option<Var>> = vec![None; len];
        let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
        for t in order {
            let xt = s.graph.slice(pre, 0, t, t + 1)?;
            let gates = match state {
                Some((h_prev, _)) => {
                    let rec = s.graph.matmul(h_prev, w_hh)?;
                    s.graph.add(xt, rec)?
                }
                None => xt,
            };
            let i = s.graph.slice(gates, 1, 0, h)?;
            let i = s.graph.sigmoid(i);
            let f = s.graph.slice(gates, 1, h, 2 * h)?;
            let f = s.graph.sigmoid(f);
            let g = s.graph.slice(gates, 1, 2 * h, 3 * h)?;
            let g = s.graph.tanh(g);
            let o = s.graph.slice(gates, 1, 3 * h, 4 * h)?;
            let o = s.graph.sigmoid(o);
            let ig = s.graph.mul(i, g)?;
            let c = match state {
                Some((_, c_prev)) => {
                    let fc = s.graph.mul(f, c_prev)?;
                    s.graph.add(fc, ig)?
                }
                None => ig,
            };
            let tc = s.graph.tanh(c);
            let h_t = s.graph.mul(o, tc)?;
            rows[t] = Some(h_t);
            state = Some((h_t, c));
        }
        let rows: Vec<Var> = rows.into_iter().map(|r| r.expect("every step visited")).collect();
        let h_seq = if rows.len() == 1 { rows[0] } else { s.graph.concat(&rows, 0)? };
        let last = state.expect("len >= 1").0;
        Ok((h_seq, last))
    }
}
