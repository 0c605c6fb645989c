//! Softmax gates over feature embeddings, one gate matrix per domain or a
//! single matrix shared by all domains.
//!
//! A gate maps the selector vector `x` to `softmax(W_k·x)`, one weight per
//! feature, and the combined representation is the weighted sum of the
//! (equal-width) feature embeddings.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore, Session};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone)]
pub struct GateBank {
    /// One `[M × d_sel]` matrix per domain, or exactly one when shared.
    pub gates: Vec<ParamId>,
    pub num_features: usize,
    pub selector_dim: usize,
    /// Name of the feature whose raw vector drives the gates.
    pub selector_feature: String,
}

impl GateBank {
    /// Zero-initialised gates, so every domain starts from uniform weights.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        num_domains: usize,
        shared: bool,
        num_features: usize,
        selector_dim: usize,
        selector_feature: &str,
    ) -> Self {
        let count = if shared { 1 } else { num_domains };
        let gates = (0..count)
            .map(|k| store.add(format!("{name}.gate{k}"), Tensor::zeros(&[num_features, selector_dim])))
            .collect();
        GateBank {
            gates,
            num_features,
            selector_dim,
            selector_feature: selector_feature.to_string(),
        }
    }

    pub fn is_shared(&self) -> bool {
        self.gates.len() == 1
    }

    /// The gate matrix that serves `domain`.
    pub fn gate_for(&self, domain: usize) -> Result<ParamId> {
        if self.is_shared() {
            return Ok(self.gates[0]);
        }
        self.gates
            .get(domain)
            .copied()
            .ok_or_else(|| Error::UnknownDomain(format!("domain index {domain}")))
    }

    /// `softmax(W_k·selector)`, `[M]`.
    pub fn gate_weights(&self, s: &mut Session<'_>, domain: usize, selector: Var) -> Result<Var> {
        let id = self.gate_for(domain)?;
        let got = s.graph.shape(selector).to_vec();
        if got != [self.selector_dim] {
            return Err(Error::invalid(
                "selector",
                format!("expected a [{}] vector, got {got:?}", self.selector_dim),
            ));
        }
        let w = s.param(id);
        let logits = s.graph.matmul(w, selector)?;
        Ok(s.graph.softmax(logits)?)
    }
}

/// `Σ_i weights[i]·features[i]`.
pub fn gated_combine(g: &mut Graph, weights: Var, features: &[Var]) -> Result<Var, TensorError> {
    let m = g.shape(weights).to_vec();
    if m != [features.len()] || features.is_empty() {
        return Err(TensorError::invalid(
            "gated_combine",
            format!("{m:?} weights for {} features", features.len()),
        ));
    }
    let d = g.shape(features[0]).to_vec();
    let mut rows = Vec::with_capacity(features.len());
    for &f in features {
        if g.shape(f) != d.as_slice() || d.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "gated_combine",
                lhs: d,
                rhs: g.shape(f).to_vec(),
            });
        }
        rows.push(g.reshape(f, &[1, d[0]])?);
    }
    let stack = g.concat(&rows, 0)?;
    g.matmul(weights, stack)
}

/// Mean gate weight per (domain, feature) and, for routed models, the
/// deterministic connection strengths per (domain, from, to).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GateReport {
    pub weights: Vec<GateRow>,
    pub connectivity: Vec<ConnectionRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateRow {
    pub domain: String,
    pub feature: String,
    pub mean_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionRow {
    pub domain: String,
    /// Receiving (high-level) feature.
    pub to: String,
    /// Source (low-level) feature.
    pub from: String,
    pub xi: f64,
}

impl GateReport {
    /// Mean weights of one domain, in feature order.
    pub fn domain_weights(&self, domain: &str) -> Vec<(&str, f64)> {
        self.weights
            .iter()
            .filter(|r| r.domain == domain)
            .map(|r| (r.feature.as_str(), r.mean_weight))
            .collect()
    }

    /// Feature with the largest mean weight for `domain`, lowest index on ties.
    pub fn top_feature(&self, domain: &str) -> Option<&str> {
        let ws = self.domain_weights(domain);
        let mut best: Option<(&str, f64)> = None;
        for (f, w) in ws {
            if best.is_none_or(|(_, b)| w > b) {
                best = Some((f, w));
            }
        }
        best.map(|(f, _)| f)
    }

    /// Tab-separated text: a `domain feature mean_weight` table, then, if
    /// present, a blank line and a `domain to from xi` table.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("domain\tfeature\tmean_weight\n");
        for r in &self.weights {
            let _ = writeln!(out, "{}\t{}\t{:.9}", r.domain, r.feature, r.mean_weight);
        }
        if !self.connectivity.is_empty() {
            out.push_str("\ndomain\tto\tfrom\txi\n");
            for r in &self.connectivity {
                let _ = writeln!(out, "{}\t{}\t{}\t{:.9}", r.domain, r.to, r.from, r.xi);
            }
        }
        out
    }
}
