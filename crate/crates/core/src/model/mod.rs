//! Complete models: the single-domain classifier and the multi-domain
//! variants.
//!
//! | variant        | combination of feature embeddings        | towers            |
//! |----------------|------------------------------------------|-------------------|
//! | `single`       | concatenation                            | one per domain    |
//! | `base`         | concatenation                            | one, union labels |
//! | `sb`           | project to `common_dim`, sum             | one per domain    |
//! | `omoe`         | project, weight by one shared gate       | one per domain    |
//! | `mmoe`         | project, weight by the domain's gate     | one per domain    |
//! | `ours`         | project, route, weight by domain's gate  | one per domain    |
//!
//! The vector entering the tower is also the representation used by the
//! contrastive loss and by embedding dumps.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};

use crate::contrastive::SimilarityParams;
use crate::data::{label_union, union_index, DomainDecl, FeatureDecl};
use crate::encoder::{assemble_representation, EncoderConfig, FeatureKind, FeatureSpec};
use crate::error::{Error, Result};
use crate::gating::{gated_combine, GateBank};
use crate::nas::{HardConcrete, NasLayer};
use crate::nn::{Activation, DenseLayer, DropoutSpec, ParamId, ParamStore, Session};
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[serde(alias = "singledomain", alias = "single_domain")]
    Single,
    Base,
    Sb,
    Omoe,
    Mmoe,
    Ours,
}

impl Variant {
    pub const LADDER: [Variant; 5] = [Variant::Base, Variant::Sb, Variant::Omoe, Variant::Mmoe, Variant::Ours];

    pub fn parse(tag: &str) -> Result<Self> {
        match tag.to_ascii_lowercase().as_str() {
            "single" | "singledomain" | "single_domain" => Ok(Variant::Single),
            "base" => Ok(Variant::Base),
            "sb" => Ok(Variant::Sb),
            "omoe" => Ok(Variant::Omoe),
            "mmoe" => Ok(Variant::Mmoe),
            "ours" => Ok(Variant::Ours),
            _ => Err(Error::invalid(
                "variant",
                format!("`{tag}` is not one of single, base, sb, omoe, mmoe, ours"),
            )),
        }
    }

    /// Whether feature embeddings are projected to a common width.
    pub fn projects(self) -> bool {
        !matches!(self, Variant::Single | Variant::Base)
    }

    pub fn has_gates(self) -> bool {
        matches!(self, Variant::Omoe | Variant::Mmoe | Variant::Ours)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Single => "Single",
            Variant::Base => "Base",
            Variant::Sb => "SB",
            Variant::Omoe => "OMoE",
            Variant::Mmoe => "MMoE",
            Variant::Ours => "Ours",
        })
    }
}

/// Hidden layers of a classification tower.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TowerSpec {
    pub hidden: Vec<usize>,
    /// One per hidden layer.
    pub activations: Vec<Activation>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_dropout() -> f64 {
    0.1
}

impl TowerSpec {
    /// English-like domains: 256 units with Mish then GeLU; German and
    /// French: 512 units with Tanh then ReLU.
    pub fn for_domain(name: &str) -> Self {
        match name.to_ascii_lowercase().as_str() {
            "german" | "de" | "emodb" | "french" | "fr" | "cafe" => TowerSpec {
                hidden: vec![512, 512],
                activations: vec![Activation::Tanh, Activation::Relu],
                dropout: 0.1,
            },
            _ => TowerSpec {
                hidden: vec![256, 256],
                activations: vec![Activation::Mish, Activation::Gelu],
                dropout: 0.1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.len() != self.activations.len() {
            return Err(Error::invalid(
                "tower",
                format!("{} hidden layers but {} activations", self.hidden.len(), self.activations.len()),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("tower", "hidden widths must be positive"));
        }
        DropoutSpec::new(self.dropout)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub domains: Vec<DomainDecl>,
    pub features: Vec<FeatureDecl>,
    /// Encoder sizes per sequence feature.
    pub encoders: BTreeMap<String, EncoderConfig>,
    /// Tower per domain name; `base` uses the first domain's entry.
    pub towers: BTreeMap<String, TowerSpec>,
    pub common_dim: usize,
    /// Vector feature whose raw value drives the gates.
    pub selector: String,
    /// Drive the gates with the selector's projected embedding instead, so
    /// gradients reach the selector path.
    pub selector_grad: bool,
    pub nas: HardConcrete,
    pub l0_lambda: f64,
}

impl ModelConfig {
    /// Defaults for every size: standard or MFCC encoders by feature name,
    /// towers by domain name, `common_dim` 256, selector `ge2e`.
    pub fn new(variant: Variant, domains: Vec<DomainDecl>, features: Vec<FeatureDecl>) -> Self {
        let encoders = features
            .iter()
            .filter(|f| f.kind == FeatureKind::Sequence)
            .map(|f| (f.name.clone(), EncoderConfig::for_feature(&f.name)))
            .collect();
        let towers = domains.iter().map(|d| (d.name.clone(), TowerSpec::for_domain(&d.name))).collect();
        ModelConfig {
            variant,
            domains,
            features,
            encoders,
            towers,
            common_dim: 256,
            selector: "ge2e".into(),
            selector_grad: false,
            nas: HardConcrete::default(),
            l0_lambda: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() || self.features.is_empty() {
            return Err(Error::invalid("model", "needs at least one domain and one feature"));
        }
        for f in &self.features {
            if f.kind == FeatureKind::Sequence {
                self.encoders
                    .get(&f.name)
                    .ok_or_else(|| Error::invalid("model", format!("no encoder sizes for sequence feature `{}`", f.name)))?
                    .validate()?;
            }
        }
        for name in self.encoders.keys() {
            if !self.features.iter().any(|f| f.name == *name && f.kind == FeatureKind::Sequence) {
                return Err(Error::invalid("model", format!("encoder for unknown sequence feature `{name}`")));
            }
        }
        for d in &self.domains {
            self.towers
                .get(&d.name)
                .ok_or_else(|| Error::invalid("model", format!("no tower for domain `{}`", d.name)))?
                .validate()?;
        }
        for name in self.towers.keys() {
            if !self.domains.iter().any(|d| d.name == *name) {
                return Err(Error::UnknownDomain(name.clone()));
            }
        }
        if self.variant.projects() && self.common_dim == 0 {
            return Err(Error::invalid("model", "common_dim must be positive"));
        }
        if self.variant.has_gates() {
            let sel = self
                .features
                .iter()
                .find(|f| f.name == self.selector)
                .ok_or_else(|| Error::invalid("selector", format!("`{}` is not a declared feature", self.selector)))?;
            if sel.kind != FeatureKind::Vector && !self.selector_grad {
                return Err(Error::invalid(
                    "selector",
                    format!("`{}` is a sequence; a raw selector must be a vector feature", self.selector),
                ));
            }
        }
        if self.variant == Variant::Ours {
            self.nas.validate()?;
        }
        if !(self.l0_lambda >= 0.0) {
            return Err(Error::invalid("l0_lambda", "must be non-negative"));
        }
        Ok(())
    }
}

/// Hidden layers with dropout, then a linear output layer.
#[derive(Debug, Clone)]
pub struct Tower {
    pub layers: Vec<DenseLayer>,
    pub dropout: DropoutSpec,
    pub classes: usize,
}

impl Tower {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        spec: &TowerSpec,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.hidden.len() + 1);
        let mut width = in_dim;
        for (l, (&h, &act)) in spec.hidden.iter().zip(&spec.activations).enumerate() {
            layers.push(DenseLayer::new(store, &format!("{name}.h{l}"), width, h, act, rng));
            width = h;
        }
        layers.push(DenseLayer::new(store, &format!("{name}.out"), width, classes, Activation::Identity, rng));
        Ok(Tower {
            layers,
            dropout: DropoutSpec::new(spec.dropout)?,
            classes,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(s, h)?;
            if i < last {
                h = self.dropout.apply(s, h);
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Tower logits: the union label space for `base`, else the domain's.
    pub logits: Var,
    /// The tower input.
    pub rep: Var,
    /// Gate weights over features, for gated variants.
    pub gate: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub features: Vec<FeatureSpec>,
    /// Per-feature projections to `common_dim`, empty when not projecting.
    pub projections: Vec<DenseLayer>,
    pub nas: Option<NasLayer>,
    pub gates: Option<GateBank>,
    pub towers: Vec<Tower>,
    pub similarity: SimilarityParams,
    selector_index: Option<usize>,
    union_labels: Vec<String>,
    union_of: Vec<Vec<usize>>,
}

impl Model {
    /// Builds and initialises a model; `seed` fixes the initial weights.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut features = Vec::with_capacity(config.features.len());
        for f in &config.features {
            let enc = config.encoders.get(&f.name).cloned().unwrap_or_else(|| EncoderConfig::for_feature(&f.name));
            features.push(FeatureSpec::new(&mut store, &f.name, f.kind, f.dim, &enc, &mut rng)?);
        }
        let variant = config.variant;
        let projections: Vec<DenseLayer> = if variant.projects() {
            features
                .iter()
                .map(|f| {
                    DenseLayer::new(
                        &mut store,
                        &format!("proj.{}", f.name),
                        f.out_dim(),
                        config.common_dim,
                        Activation::Identity,
                        &mut rng,
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let k = config.domains.len();
        let m = features.len();
        let nas = if variant == Variant::Ours {
            Some(NasLayer::new(&mut store, "nas", k, m, config.common_dim, config.nas, config.l0_lambda)?)
        } else {
            None
        };
        let selector_index = config.features.iter().position(|f| f.name == config.selector);
        let gates = if variant.has_gates() {
            let sel = selector_index.expect("validated");
            let sel_dim = if config.selector_grad { config.common_dim } else { config.features[sel].dim };
            Some(GateBank::new(&mut store, "gates", k, variant == Variant::Omoe, m, sel_dim, &config.selector))
        } else {
            None
        };
        let rep_dim = if variant.projects() {
            config.common_dim
        } else {
            features.iter().map(FeatureSpec::out_dim).sum()
        };
        let union_labels = label_union(&config.domains);
        let union_of = union_index(&config.domains);
        let towers = if variant == Variant::Base {
            let spec = &config.towers[&config.domains[0].name];
            vec![Tower::new(&mut store, "tower.base", rep_dim, spec, union_labels.len(), &mut rng)?]
        } else {
            config
                .domains
                .iter()
                .map(|d| Tower::new(&mut store, &format!("tower.{}", d.name), rep_dim, &config.towers[&d.name], d.labels.len(), &mut rng))
                .collect::<Result<_>>()?
        };
        let similarity = SimilarityParams::new(&mut store, "similarity");
        Ok(Model {
            config,
            store,
            features,
            projections,
            nas,
            gates,
            towers,
            similarity,
            selector_index,
            union_labels,
            union_of,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn num_domains(&self) -> usize {
        self.config.domains.len()
    }

    pub fn rep_dim(&self) -> usize {
        self.towers[0].layers[0].in_dim()
    }

    pub fn union_labels(&self) -> &[String] {
        &self.union_labels
    }

    pub fn tower_for(&self, domain: usize) -> Result<&Tower> {
        if domain >= self.num_domains() {
            return Err(Error::UnknownDomain(format!("domain index {domain}")));
        }
        Ok(if self.variant() == Variant::Base { &self.towers[0] } else { &self.towers[domain] })
    }

    /// Class index used as the training target: the union index for `base`.
    pub fn target(&self, domain: usize, label: usize) -> usize {
        if self.variant() == Variant::Base {
            self.union_of[domain][label]
        } else {
            label
        }
    }

    /// Runs one utterance; `features` are in declared order.
    pub fn forward(&self, s: &mut Session<'_>, domain: usize, features: &[Tensor]) -> Result<Forward> {
        let tower = self.tower_for(domain)?;
        if features.len() != self.features.len() {
            return Err(Error::invalid(
                "forward",
                format!("{} feature values for {} declared features", features.len(), self.features.len()),
            ));
        }
        let mut encoded = Vec::with_capacity(features.len());
        for (spec, value) in self.features.iter().zip(features) {
            encoded.push(spec.encode(s, value)?);
        }
        let (rep, gate) = if self.variant().projects() {
            let mut projected = Vec::with_capacity(encoded.len());
            for (p, &e) in self.projections.iter().zip(&encoded) {
                projected.push(p.forward(s, e)?);
            }
            self.combine(s, domain, features, &projected)?
        } else {
            (assemble_representation(&mut s.graph, &encoded)?, None)
        };
        let logits = tower.forward(s, rep)?;
        Ok(Forward { logits, rep, gate })
    }

    fn combine(&self, s: &mut Session<'_>, domain: usize, raw: &[Tensor], projected: &[Var]) -> Result<(Var, Option<Var>)> {
        let Some(gates) = &self.gates else {
            let mut acc = projected[0];
            for &p in &projected[1..] {
                acc = s.graph.add(acc, p)?;
            }
            return Ok((acc, None));
        };
        let sel = self.selector_index.expect("gated models have a selector");
        let selector = if self.config.selector_grad { projected[sel] } else { s.input(raw[sel].clone()) };
        let routed = match &self.nas {
            Some(nas) => nas.transform(s, domain, projected)?,
            None => projected.to_vec(),
        };
        let w = gates.gate_weights(s, domain, selector)?;
        Ok((gated_combine(&mut s.graph, w, &routed)?, Some(w)))
    }

    /// Logits restricted to the domain's own labels, in its label order.
    pub fn domain_logits(&self, s: &mut Session<'_>, fwd: &Forward, domain: usize) -> Result<Var> {
        if self.variant() == Variant::Base {
            Ok(s.graph.gather(fwd.logits, &self.union_of[domain])?)
        } else {
            Ok(fwd.logits)
        }
    }

    /// Eval-mode prediction in the domain's label space, plus the
    /// representation and gate weights.
    pub fn infer(&self, domain: usize, features: &[Tensor]) -> Result<Inference> {
        let mut s = Session::eval(&self.store);
        let fwd = self.forward(&mut s, domain, features)?;
        let logits = self.domain_logits(&mut s, &fwd, domain)?;
        Ok(Inference {
            prediction: predict(s.value(logits).data()),
            logits: s.value(logits).data().to_vec(),
            rep: s.value(fwd.rep).data().to_vec(),
            gate: fwd.gate.map(|g| s.value(g).data().to_vec()),
        })
    }

    /// Parameters that only `domain`'s batches should move: its tower and,
    /// for per-domain gates, its gate matrix and routing locations.
    pub fn domain_params(&self, domain: usize) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if self.variant() != Variant::Base {
            ids.extend(self.towers[domain].params());
        }
        if let Some(g) = &self.gates {
            if !g.is_shared() {
                ids.push(g.gates[domain]);
            }
        }
        if let Some(n) = &self.nas {
            ids.push(n.log_kappa[domain]);
        }
        ids
    }

    /// Scalar parameter counts by component.
    pub fn param_counts(&self) -> Vec<(&'static str, usize)> {
        let count = |pred: &dyn Fn(&str) -> bool| -> usize {
            self.store.iter().filter(|(_, n, _)| pred(n)).map(|(_, _, t)| t.numel()).sum()
        };
        vec![
            ("encoders", count(&|n| n.starts_with("enc."))),
            ("projections", count(&|n| n.starts_with("proj."))),
            ("routing", count(&|n| n.starts_with("nas."))),
            ("gates", count(&|n| n.starts_with("gates."))),
            ("towers", count(&|n| n.starts_with("tower."))),
            ("similarity", count(&|n| n.starts_with("similarity."))),
            ("total", self.store.num_scalars()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub prediction: usize,
    pub logits: Vec<f64>,
    pub rep: Vec<f64>,
    pub gate: Option<Vec<f64>>,
}

/// Index of the largest logit; the lowest index wins ties.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
pub(crate) mod tests;
