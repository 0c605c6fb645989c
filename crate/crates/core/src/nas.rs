//! Learned routing between low-level and high-level feature embeddings.
//!
//! High-level embedding `u_i = Σ_j ξ_ij · (v_j·W_ij)`, where every `W_ij` is
//! a `[D × D]` transition shared by all domains and `ξ_ij ∈ [0, 1]` is a
//! hard-concrete gate with a per-domain location `log κ_ij`:
//!
//! ```text
//! s = sigmoid((ln u − ln(1 − u) + log κ) / β),   u ~ Uniform(0, 1)
//! ξ = clamp(s·δ + (1 − s)·γ, 0, 1)
//! ```
//!
//! Training draws fresh `u` per forward pass; evaluation uses the noise-free
//! point `s = sigmoid(log κ)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore, Session};
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Initial `log κ`; the deterministic gate starts saturated at 1.
pub const INIT_LOG_KAPPA: f64 = 2.0;

/// Temperature and stretch interval of the hard-concrete gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardConcrete {
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for HardConcrete {
    fn default() -> Self {
        HardConcrete {
            beta: 0.9,
            gamma: -0.1,
            delta: 2.0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl HardConcrete {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::invalid("nas.beta", format!("{} is outside (0, 1]", self.beta)));
        }
        if !(self.gamma < 0.0 && self.delta > 1.0) {
            return Err(Error::invalid(
                "nas.gamma/delta",
                format!("need gamma < 0 < 1 < delta, got {} and {}", self.gamma, self.delta),
            ));
        }
        Ok(())
    }

    fn stretch(&self, s: f64) -> f64 {
        (s * self.delta + (1.0 - s) * self.gamma).clamp(0.0, 1.0)
    }

    /// One gate value for noise `u ∈ (0, 1)`.
    pub fn sample(&self, log_kappa: f64, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::invalid("hard-concrete noise", format!("{u} is outside (0, 1)")));
        }
        let s = sigmoid((u.ln() - (1.0 - u).ln() + log_kappa) / self.beta);
        Ok(self.stretch(s))
    }

    /// The noise-free gate `clamp(sigmoid(log κ)·δ + (1 − sigmoid(log κ))·γ, 0, 1)`.
    pub fn deterministic(&self, log_kappa: f64) -> f64 {
        self.stretch(sigmoid(log_kappa))
    }

    /// `P(ξ = 0)`.
    pub fn prob_zero(&self, log_kappa: f64) -> f64 {
        sigmoid(self.beta * (-self.gamma / self.delta).ln() - log_kappa)
    }

    /// `P(ξ = 1)`.
    pub fn prob_one(&self, log_kappa: f64) -> f64 {
        1.0 - sigmoid(self.beta * ((1.0 - self.gamma) / (self.delta - 1.0)).ln() - log_kappa)
    }

    /// Maps sigmoid outputs onto gates inside the graph.
    fn stretch_var(&self, g: &mut Graph, s: Var) -> Result<Var, TensorError> {
        let hi = g.scale(s, self.delta);
        let ns = g.neg(s);
        let rest = g.shift(ns, 1.0);
        let lo = g.scale(rest, self.gamma);
        let sbar = g.add(hi, lo)?;
        g.clamp(sbar, 0.0, 1.0)
    }

    /// Stochastic gates for a `log κ` tensor and equally shaped noise.
    pub fn sample_var(&self, g: &mut Graph, log_kappa: Var, noise: &Tensor) -> Result<Var, TensorError> {
        if noise.data().iter().any(|&u| !(u > 0.0 && u < 1.0)) {
            return Err(TensorError::invalid("hard_concrete", "noise must lie strictly inside (0, 1)"));
        }
        let logit = g.constant(noise.map(|u| u.ln() - (1.0 - u).ln()));
        let z = g.add(logit, log_kappa)?;
        let z = g.scale(z, 1.0 / self.beta);
        let s = g.sigmoid(z);
        self.stretch_var(g, s)
    }

    pub fn deterministic_var(&self, g: &mut Graph, log_kappa: Var) -> Result<Var, TensorError> {
        let s = g.sigmoid(log_kappa);
        self.stretch_var(g, s)
    }
}

/// Draws noise strictly inside `(0, 1)`.
pub fn open_unit_noise<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                break u;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

#[derive(Debug, Clone)]
pub struct NasLayer {
    /// `W_ij` at index `i·M + j`, each `[D × D]`.
    pub transitions: Vec<ParamId>,
    /// One `[M × M]` matrix per domain.
    pub log_kappa: Vec<ParamId>,
    pub hyper: HardConcrete,
    pub num_features: usize,
    pub dim: usize,
    /// Weight of the expected-open-gates penalty; 0 disables it.
    pub l0_lambda: f64,
}

impl NasLayer {
    /// Diagonal transitions start as the identity and off-diagonal ones at
    /// zero, so the untrained layer passes each embedding straight through
    /// to its own slot.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        num_domains: usize,
        num_features: usize,
        dim: usize,
        hyper: HardConcrete,
        l0_lambda: f64,
    ) -> Result<Self> {
        hyper.validate()?;
        let m = num_features;
        let mut transitions = Vec::with_capacity(m * m);
        for i in 0..m {
            for j in 0..m {
                let init = if i == j { Tensor::identity(dim) } else { Tensor::zeros(&[dim, dim]) };
                transitions.push(store.add(format!("{name}.w{i}_{j}"), init));
            }
        }
        let log_kappa = (0..num_domains)
            .map(|k| store.add(format!("{name}.log_kappa{k}"), Tensor::full(&[m, m], INIT_LOG_KAPPA)))
            .collect();
        Ok(NasLayer {
            transitions,
            log_kappa,
            hyper,
            num_features,
            dim,
            l0_lambda,
        })
    }

    fn kappa_for(&self, domain: usize) -> Result<ParamId> {
        self.log_kappa
            .get(domain)
            .copied()
            .ok_or_else(|| Error::UnknownDomain(format!("domain index {domain}")))
    }

    /// `[M × M]` gates: sampled in train mode, deterministic in eval mode.
    pub fn gates(&self, s: &mut Session<'_>, domain: usize) -> Result<Var> {
        let id = self.kappa_for(domain)?;
        let lk = s.param(id);
        let xi = if s.is_train() {
            let noise = open_unit_noise(s.rng(), &[self.num_features, self.num_features]);
            self.hyper.sample_var(&mut s.graph, lk, &noise)?
        } else {
            self.hyper.deterministic_var(&mut s.graph, lk)?
        };
        Ok(xi)
    }

    /// Routes `v` (M embeddings of width D) through the domain's gates.
    pub fn transform(&self, s: &mut Session<'_>, domain: usize, v: &[Var]) -> Result<Vec<Var>> {
        let xi = self.gates(s, domain)?;
        self.transform_with(s, xi, v)
    }

    /// As [`NasLayer::transform`] with caller-supplied gates `[M × M]`.
    pub fn transform_with(&self, s: &mut Session<'_>, xi: Var, v: &[Var]) -> Result<Vec<Var>> {
        let m = self.num_features;
        if v.len() != m || v.iter().any(|&x| s.graph.shape(x) != [self.dim]) {
            return Err(Error::invalid(
                "nas",
                format!("expected {m} embeddings of width {}", self.dim),
            ));
        }
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let mut acc: Option<Var> = None;
            for (j, &vj) in v.iter().enumerate() {
                let w = s.param(self.transitions[i * m + j]);
                let moved = s.graph.matmul(vj, w)?;
                let gate = s.graph.gather(xi, &[i * m + j])?;
                let term = s.graph.mul(moved, gate)?;
                acc = Some(match acc {
                    Some(a) => s.graph.add(a, term)?,
                    None => term,
                });
            }
            out.push(acc.expect("at least one feature"));
        }
        Ok(out)
    }

    /// `λ·Σ P(ξ_ij > 0)` for one domain, or `None` when `λ = 0`.
    pub fn l0_penalty(&self, s: &mut Session<'_>, domain: usize) -> Result<Option<Var>> {
        if self.l0_lambda == 0.0 {
            return Ok(None);
        }
        let lk = s.param(self.kappa_for(domain)?);
        let shift = -self.hyper.beta * (-self.hyper.gamma / self.hyper.delta).ln();
        let z = s.graph.shift(lk, shift);
        let p = s.graph.sigmoid(z);
        let total = s.graph.sum(p);
        Ok(Some(s.graph.scale(total, self.l0_lambda)))
    }

    /// The evaluation-mode gate matrix of a domain.
    pub fn deterministic_matrix(&self, store: &ParamStore, domain: usize) -> Result<Tensor> {
        let lk = store.get(self.kappa_for(domain)?);
        Ok(lk.map(|v| self.hyper.deterministic(v)))
    }
}
