//! Experiment configuration files.
//!
//! A config is one TOML document. Every section is optional; omitted values
//! take the defaults below (AdamW lr 0.001, 20 epochs, dropout 0.1, hard
//! concrete β = 0.9, γ = −0.1, δ = 2, α by domain name, seeds 1 to 5).
//! Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use emogate::contrastive::default_alpha;
use emogate::data::{Corpus, DomainDecl, FeatureDecl, SyntheticSpec};
use emogate::encoder::{EncoderConfig, FeatureKind};
use emogate::model::{ModelConfig, TowerSpec, Variant};
use emogate::nas::HardConcrete;
use emogate::train::{AdamWConfig, TrainSchedule};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub nas: HardConcrete,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub schedule: TrainSchedule,
    /// Auxiliary loss weight by domain name; missing domains use the
    /// default for their name.
    #[serde(default)]
    pub alpha: BTreeMap<String, f64>,
    /// Leave each sample out of its own centroid.
    #[serde(default)]
    pub exclude_self_centroid: bool,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

/// Where samples come from: a corpus directory on disk, or a synthetic
/// spec. With neither, the default synthetic corpus is used.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

/// Default layer sizes: `full` uses the reference widths (64 conv filters,
/// 128 LSTM units, 256 attention and common width, 256/512 tower units);
/// `desk` shrinks everything so a 20-epoch run takes seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Full,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub scale: Scale,
    /// Overrides the scale's common width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub common_dim: Option<usize>,
    pub selector: String,
    pub selector_grad: bool,
    pub l0_lambda: f64,
    /// Encoder sizes by sequence feature name.
    pub encoders: BTreeMap<String, EncoderConfig>,
    /// Tower by domain name.
    pub towers: BTreeMap<String, TowerSpec>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            scale: Scale::Full,
            common_dim: None,
            selector: "ge2e".into(),
            selector_grad: false,
            l0_lambda: 0.0,
            encoders: BTreeMap::new(),
            towers: BTreeMap::new(),
        }
    }
}

pub const DESK_COMMON_DIM: usize = 64;

pub fn desk_encoder() -> EncoderConfig {
    EncoderConfig {
        conv_widths: vec![3, 5],
        conv_filters: 8,
        lstm_layers: 1,
        lstm_hidden: 8,
        attention_dim: 16,
    }
}

/// One hidden layer of 32 units with the domain's first reference activation.
pub fn desk_tower(domain: &str) -> TowerSpec {
    let reference = TowerSpec::for_domain(domain);
    TowerSpec {
        hidden: vec![32],
        activations: vec![reference.activations[0]],
        dropout: reference.dropout,
    }
}

impl ExperimentConfig {
    /// A config with every default and the given variant.
    pub fn new(variant: Variant) -> Self {
        ExperimentConfig {
            variant,
            seeds: default_seeds(),
            out_dir: None,
            data: DataSource::default(),
            model: ModelSection::default(),
            nas: HardConcrete::default(),
            optimizer: AdamWConfig::default(),
            schedule: TrainSchedule::default(),
            alpha: BTreeMap::new(),
            exclude_self_centroid: false,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Checks everything that does not need the corpus.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Validation(format!("config field `{field}`: {msg}")));
        if self.seeds.is_empty() {
            return bad("seeds", "needs at least one seed".into());
        }
        if self.data.corpus.is_some() && self.data.synthetic.is_some() {
            return bad("data", "give either `corpus` or `synthetic`, not both".into());
        }
        if let Some(spec) = &self.data.synthetic {
            if let Err(e) = spec.validate() {
                return bad("data.synthetic", e.to_string());
            }
        }
        if let Err(e) = self.nas.validate() {
            return bad("nas", e.to_string());
        }
        if let Err(e) = self.optimizer.validate() {
            return bad("optimizer", e.to_string());
        }
        if let Err(e) = self.schedule.validate() {
            return bad("schedule", e.to_string());
        }
        for (domain, &a) in &self.alpha {
            if !(a >= 0.0 && a.is_finite()) {
                return bad(&format!("alpha.{domain}"), format!("{a} must be a finite non-negative number"));
            }
        }
        if self.model.common_dim == Some(0) {
            return bad("model.common_dim", "must be positive".into());
        }
        if !(self.model.l0_lambda >= 0.0) {
            return bad("model.l0_lambda", "must be non-negative".into());
        }
        for (name, enc) in &self.model.encoders {
            if let Err(e) = enc.validate() {
                return bad(&format!("model.encoders.{name}"), e.to_string());
            }
        }
        for (name, t) in &self.model.towers {
            if let Err(e) = t.validate() {
                return bad(&format!("model.towers.{name}"), e.to_string());
            }
        }
        Ok(())
    }

    /// Checks the names that refer into the corpus.
    pub fn validate_against(&self, domains: &[DomainDecl], features: &[FeatureDecl]) -> Result<(), CliError> {
        let bad = |field: String, msg: String| Err(CliError::Validation(format!("config field `{field}`: {msg}")));
        let domain_names: Vec<&str> = domains.iter().map(|d| d.name.as_str()).collect();
        for name in self.alpha.keys() {
            if !domain_names.contains(&name.as_str()) {
                return bad(format!("alpha.{name}"), format!("no domain `{name}` in the corpus"));
            }
        }
        for name in self.model.towers.keys() {
            if !domain_names.contains(&name.as_str()) {
                return bad(format!("model.towers.{name}"), format!("no domain `{name}` in the corpus"));
            }
        }
        for name in self.model.encoders.keys() {
            if !features.iter().any(|f| f.name == *name && f.kind == FeatureKind::Sequence) {
                return bad(format!("model.encoders.{name}"), format!("no sequence feature `{name}` in the corpus"));
            }
        }
        if self.variant.has_gates() && !features.iter().any(|f| f.name == self.model.selector) {
            return bad("model.selector".into(), format!("no feature `{}` in the corpus", self.model.selector));
        }
        Ok(())
    }

    pub fn alpha_for(&self, domain: &str) -> f64 {
        self.alpha.get(domain).copied().unwrap_or_else(|| default_alpha(domain))
    }

    pub fn alphas(&self, domains: &[DomainDecl]) -> Vec<f64> {
        domains.iter().map(|d| self.alpha_for(&d.name)).collect()
    }

    /// The model configuration for a corpus with these declarations.
    pub fn model_config(&self, domains: &[DomainDecl], features: &[FeatureDecl]) -> Result<ModelConfig, CliError> {
        self.validate_against(domains, features)?;
        let mut cfg = ModelConfig::new(self.variant, domains.to_vec(), features.to_vec());
        if self.model.scale == Scale::Desk {
            for e in cfg.encoders.values_mut() {
                *e = desk_encoder();
            }
            for (name, t) in cfg.towers.iter_mut() {
                *t = desk_tower(name);
            }
            cfg.common_dim = DESK_COMMON_DIM;
        }
        if let Some(d) = self.model.common_dim {
            cfg.common_dim = d;
        }
        for (name, enc) in &self.model.encoders {
            cfg.encoders.insert(name.clone(), enc.clone());
        }
        for (name, t) in &self.model.towers {
            cfg.towers.insert(name.clone(), t.clone());
        }
        cfg.selector = self.model.selector.clone();
        cfg.selector_grad = self.model.selector_grad;
        cfg.l0_lambda = self.model.l0_lambda;
        cfg.nas = self.nas;
        cfg.validate().map_err(|e| CliError::Validation(format!("model: {e}")))?;
        Ok(cfg)
    }

    /// Loads or generates the corpus. Relative corpus paths are taken
    /// relative to `base`, normally the config file's directory.
    pub fn load_corpus(&self, base: &Path) -> Result<Corpus, CliError> {
        let corpus = match (&self.data.corpus, &self.data.synthetic) {
            (Some(path), _) => Corpus::load(&base.join(path))?,
            (None, Some(spec)) => emogate::data::generate_synthetic(spec)?,
            (None, None) => emogate::data::generate_synthetic(&SyntheticSpec::default())?,
        };
        self.validate_against(&corpus.domains, &corpus.features)?;
        Ok(corpus)
    }
}

/// Reads and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_toml(&text).map_err(|e| match e {
        CliError::Validation(msg) => CliError::Validation(format!("{}: {msg}", path.display())),
        e => e,
    })
}
