//! Sequence encoder: same-padded time convolutions, a stacked Bi-LSTM and a
//! single attention read-out that queries the LSTM outputs with the LSTM's own
//! summary state.
//!
//! ```text
//! z [L×d] ─conv─▶ z′ [L×d′] ─BiLSTM─▶ H [L×2k], ẑ [2k]
//!                                    q = ẑ·W_Q, K = H·W_K, V = H·W_V
//!                                    s = softmax(K·q / √a)·V   ∈ ℝ^a
//! ```
//!
//! The attention logits are scaled by `√a`, the width of the projected
//! query and keys. Vector features skip the encoder and enter the
//! representation unchanged.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{glorot_uniform, Conv1DBank, LSTMStack, ParamId, ParamStore, Session};
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Layer sizes of one [`EncoderStack`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Odd kernel widths along time, one conv branch each.
    pub conv_widths: Vec<usize>,
    /// Filters per branch.
    pub conv_filters: usize,
    pub lstm_layers: usize,
    /// Hidden size per direction.
    pub lstm_hidden: usize,
    pub attention_dim: usize,
}

impl EncoderConfig {
    /// Encoder for phone- or wav2vec-style features: widths 3 and 5 with 64
    /// filters each, one Bi-LSTM layer of 128, attention width 256.
    pub fn standard() -> Self {
        EncoderConfig {
            conv_widths: vec![3, 5],
            conv_filters: 64,
            lstm_layers: 1,
            lstm_hidden: 128,
            attention_dim: 256,
        }
    }

    /// Encoder for MFCC-style features: 32 filters per branch (widths 3 and 5
    /// are assumed; only the filter count is fixed upstream), two Bi-LSTM
    /// layers of 64, attention width 256.
    pub fn mfcc() -> Self {
        EncoderConfig {
            conv_widths: vec![3, 5],
            conv_filters: 32,
            lstm_layers: 2,
            lstm_hidden: 64,
            attention_dim: 256,
        }
    }

    /// Default for a feature by name: anything containing "mfcc" gets
    /// [`EncoderConfig::mfcc`], everything else [`EncoderConfig::standard`].
    pub fn for_feature(name: &str) -> Self {
        if name.to_ascii_lowercase().contains("mfcc") {
            Self::mfcc()
        } else {
            Self::standard()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_widths.is_empty() || self.conv_widths.iter().any(|w| w % 2 == 0) {
            return Err(Error::invalid("encoder", format!("conv widths {:?} must be non-empty and odd", self.conv_widths)));
        }
        if self.conv_filters == 0 || self.lstm_layers == 0 || self.lstm_hidden == 0 || self.attention_dim == 0 {
            return Err(Error::invalid("encoder", "all layer sizes must be positive"));
        }
        Ok(())
    }
}

/// Attention with a single query: `softmax(K·q / √a)·V`.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var, TensorError> {
    let a = g.shape(q)[0];
    let (kl, ka) = (g.shape(k)[0], g.shape(k)[1]);
    if ka != a || g.shape(v)[0] != kl || kl == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: g.shape(q).to_vec(),
            rhs: g.shape(k).to_vec(),
        });
    }
    let w = attention_weights(g, q, k)?;
    g.matmul(w, v)
}

/// The softmax weights of [`scaled_dot_attention`], `[L]`.
pub fn attention_weights(g: &mut Graph, q: Var, k: Var) -> Result<Var, TensorError> {
    let a = g.shape(q)[0];
    let scores = g.matmul(k, q)?;
    let scores = g.scale(scores, 1.0 / (a as f64).sqrt());
    g.softmax(scores)
}

#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub conv: Conv1DBank,
    pub lstm: LSTMStack,
    /// `[2k × a]` each.
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    attention_dim: usize,
}

impl EncoderStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        cfg: &EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let spec: Vec<(usize, usize)> = cfg.conv_widths.iter().map(|&w| (w, cfg.conv_filters)).collect();
        let conv = Conv1DBank::new(store, &format!("{name}.conv"), in_dim, &spec, rng)?;
        let lstm = LSTMStack::new(
            store,
            &format!("{name}.lstm"),
            conv.out_dim(),
            cfg.lstm_hidden,
            cfg.lstm_layers,
            true,
            rng,
        );
        let (h, a) = (lstm.out_dim(), cfg.attention_dim);
        let mut proj = |tag: &str| store.add(format!("{name}.attn.{tag}"), glorot_uniform(rng, &[h, a], h, a));
        let w_q = proj("w_q");
        let w_k = proj("w_k");
        let w_v = proj("w_v");
        Ok(EncoderStack {
            conv,
            lstm,
            w_q,
            w_k,
            w_v,
            attention_dim: a,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.attention_dim
    }

    /// `z: [L × d] → [a]`.
    pub fn encode(&self, s: &mut Session<'_>, z: Var) -> Result<Var, TensorError> {
        let zc = self.conv.forward(s, z)?;
        let (h, zhat) = self.lstm.forward(s, zc)?;
        let (wq, wk, wv) = (s.param(self.w_q), s.param(self.w_k), s.param(self.w_v));
        let q = s.graph.matmul(zhat, wq)?;
        let k = s.graph.matmul(h, wk)?;
        let v = s.graph.matmul(h, wv)?;
        scaled_dot_attention(&mut s.graph, q, k, v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// A `[L × d]` frame sequence.
    Sequence,
    /// A fixed `[d]` utterance embedding.
    Vector,
}

/// One declared feature and, for sequences, its encoder.
#[derive(Debug, Clone)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    pub raw_dim: usize,
    pub encoder: Option<EncoderStack>,
}

impl FeatureSpec {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: FeatureKind,
        raw_dim: usize,
        cfg: &EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let encoder = match kind {
            FeatureKind::Sequence => Some(EncoderStack::new(store, &format!("enc.{name}"), raw_dim, cfg, rng)?),
            FeatureKind::Vector => None,
        };
        Ok(FeatureSpec {
            name: name.to_string(),
            kind,
            raw_dim,
            encoder,
        })
    }

    /// Width of this feature's embedding.
    pub fn out_dim(&self) -> usize {
        self.encoder.as_ref().map_or(self.raw_dim, EncoderStack::out_dim)
    }

    /// Embeds a raw feature value.
    pub fn encode(&self, s: &mut Session<'_>, value: &Tensor) -> Result<Var, TensorError> {
        let x = s.input(value.clone());
        match &self.encoder {
            Some(enc) => enc.encode(s, x),
            None => Ok(x),
        }
    }
}

/// Concatenates per-feature embeddings in the given order.
pub fn assemble_representation(g: &mut Graph, encoded: &[Var]) -> Result<Var, TensorError> {
    match encoded {
        [] => Err(TensorError::invalid("assemble", "no features")),
        [one] => Ok(*one),
        many => g.concat(many, 0),
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::nn::{param_finite_diff_check, Mode};

    fn random(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small() -> EncoderConfig {
        EncoderConfig {
            conv_widths: vec![3, 5],
            conv_filters: 3,
            lstm_layers: 1,
            lstm_hidden: 4,
            attention_dim: 5,
        }
    }

    #[test]
    fn singleton_attention_returns_the_value() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let q = g.constant(random(&mut r, &[4]));
        let k = g.constant(random(&mut r, &[1, 4]));
        let v = g.constant(random(&mut r, &[1, 4]));
        let out = scaled_dot_attention(&mut g, q, k, v).unwrap();
        assert_eq!(g.value(out).data(), g.value(v).data());
    }

    #[test]
    fn zero_query_averages_values() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[3]));
        let k = g.constant(random(&mut r, &[5, 3]));
        let vt = random(&mut r, &[5, 3]);
        let v = g.constant(vt.clone());
        let out = scaled_dot_attention(&mut g, q, k, v).unwrap();
        for c in 0..3 {
            let mean = (0..5).map(|t| vt.at2(t, c)).sum::<f64>() / 5.0;
            assert!((g.value(out).data()[c] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_matches_two_loop_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (l, a) = (r.random_range(1..9), r.random_range(1..7));
            let (qt, kt, vt) = (random(&mut r, &[a]), random(&mut r, &[l, a]), random(&mut r, &[l, a]));
            let mut g = Graph::new();
            let (q, k, v) = (g.constant(qt.clone()), g.constant(kt.clone()), g.constant(vt.clone()));
            let w = attention_weights(&mut g, q, k).unwrap();
            let ws: f64 = g.value(w).data().iter().sum();
            assert!((ws - 1.0).abs() <= 1e-12 && g.value(w).data().iter().all(|&p| p >= 0.0));
            let out = scaled_dot_attention(&mut g, q, k, v).unwrap();

            let mut scores = vec![0.0; l];
            for (t, sc) in scores.iter_mut().enumerate() {
                for i in 0..a {
                    *sc += qt.data()[i] * kt.at2(t, i);
                }
                *sc /= (a as f64).sqrt();
            }
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for c in 0..a {
                let mut acc = 0.0;
                for t in 0..l {
                    acc += (scores[t] - m).exp() / z * vt.at2(t, c);
                }
                assert!((g.value(out).data()[c] - acc).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_frame_encoding_is_value_projection_of_lstm_row() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = EncoderStack::new(&mut store, "e", 4, &small(), &mut r).unwrap();
        let z = random(&mut r, &[1, 4]);
        let mut s = Session::eval(&store);
        let zv = s.input(z.clone());
        let out = enc.encode(&mut s, zv).unwrap();

        let mut s2 = Session::eval(&store);
        let zv = s2.input(z);
        let zc = enc.conv.forward(&mut s2, zv).unwrap();
        let (h, _) = enc.lstm.forward(&mut s2, zc).unwrap();
        let wv = s2.param(enc.w_v);
        let expect = s2.graph.matmul(h, wv).unwrap();
        assert_eq!(s.value(out).data(), s2.value(expect).data());
    }

    #[test]
    fn zero_projections_give_zero_embedding() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = EncoderStack::new(&mut store, "e", 4, &small(), &mut r).unwrap();
        for id in [enc.w_q, enc.w_k, enc.w_v] {
            *store.get_mut(id) = Tensor::zeros(&[8, 5]);
        }
        let mut s = Session::eval(&store);
        let z = s.input(random(&mut r, &[6, 4]));
        let out = enc.encode(&mut s, z).unwrap();
        assert!(s.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoding_is_bitwise_deterministic_and_rejects_empty() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = EncoderStack::new(&mut store, "e", 4, &small(), &mut r).unwrap();
        let z = random(&mut r, &[7, 4]);
        let run = || {
            let mut s = Session::eval(&store);
            let zv = s.input(z.clone());
            let out = enc.encode(&mut s, zv).unwrap();
            s.value(out).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
        let mut s = Session::eval(&store);
        let e = s.input(Tensor::zeros(&[0, 4]));
        assert!(enc.encode(&mut s, e).is_err());
    }

    /// Frozen output of a seed-42 encoder on a seed-43 `[10 × 8]` input.
    #[test]
    fn golden_encoding() {
        let mut r = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        let enc = EncoderStack::new(&mut store, "e", 8, &small(), &mut r).unwrap();
        let z = random(&mut ChaCha8Rng::seed_from_u64(43), &[10, 8]);
        let mut s = Session::eval(&store);
        let zv = s.input(z);
        let out = enc.encode(&mut s, zv).unwrap();
        let got = s.value(out).data().to_vec();
        let golden = GOLDEN;
        assert_eq!(got.len(), golden.len());
        for (a, b) in got.iter().zip(golden) {
            assert!((a - b).abs() < 1e-12, "{got:?}");
        }
    }

    const GOLDEN: [f64; 5] = [
        0.024069122654374563,
        0.05927545253656321,
        0.09398503300947468,
        -0.028233511706734132,
        -0.094932552827665,
    ];

    #[test]
    fn encoder_passes_gradcheck() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let enc = EncoderStack::new(&mut store, "e", 3, &small(), &mut r).unwrap();
        let z = random(&mut r, &[6, 3]);
        let probe = random(&mut r, &[5]);
        let err = param_finite_diff_check(
            &store,
            |s| {
                let zv = s.input(z.clone());
                let out = enc.encode(s, zv)?;
                let p = s.input(probe.clone());
                let y = s.graph.mul(out, p)?;
                Ok::<_, TensorError>(s.graph.sum(y))
            },
            Mode::Eval,
            0,
            None,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn assemble_preserves_order() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0; 4]));
        let b = g.constant(Tensor::vector(vec![2.0; 6]));
        let one = assemble_representation(&mut g, &[a]).unwrap();
        assert_eq!(one, a);
        let ab = assemble_representation(&mut g, &[a, b]).unwrap();
        let ba = assemble_representation(&mut g, &[b, a]).unwrap();
        assert_eq!(g.value(ab).shape(), &[10]);
        assert_eq!(&g.value(ab).data()[..4], &[1.0; 4]);
        assert_eq!(&g.value(ba).data()[..6], &[2.0; 6]);
        assert!(assemble_representation(&mut g, &[]).is_err());
    }

    #[test]
    fn feature_defaults_by_name() {
        assert_eq!(EncoderConfig::for_feature("MFCC").lstm_layers, 2);
        assert_eq!(EncoderConfig::for_feature("wav2vec").conv_filters, 64);
        let mut store = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let f = FeatureSpec::new(&mut store, "wav2vec", FeatureKind::Sequence, 230, &EncoderConfig::standard(), &mut r)
            .unwrap();
        assert_eq!(f.encoder.as_ref().unwrap().conv.out_dim(), 128);
        assert_eq!(f.out_dim(), 256);
        let v = FeatureSpec::new(&mut store, "ge2e", FeatureKind::Vector, 256, &EncoderConfig::standard(), &mut r)
            .unwrap();
        assert!(v.encoder.is_none());
        assert_eq!(v.out_dim(), 256);
    }
}
