//! Corpora of precomputed features: the on-disk layout, validation on load,
//! and a synthetic generator.
//!
//! A corpus directory holds `manifest.toml` and one bundle file per
//! utterance (see [`bundle`] for the byte layout):
//!
//! ```toml
//! version = 1
//!
//! [[domains]]
//! name = "german"
//! labels = ["Neutral", "Happy", "Anger", "Sad", "Fear", "Bored", "Disgusted"]
//!
//! [[features]]
//! name = "wav2vec"
//! kind = "sequence"   # or "vector"
//! dim = 32
//!
//! [[utterances]]
//! id = "german-0000"
//! file = "bundles/german-0000.bin"
//! ```

pub mod bundle;
pub mod synthetic;

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bundle::FeatureBundle;
pub use synthetic::{generate_synthetic, SyntheticDomain, SyntheticSpec};

use crate::encoder::FeatureKind;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainDecl {
    pub name: String,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDecl {
    pub name: String,
    pub kind: FeatureKind,
    /// Per-frame width for sequences, length for vectors.
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub version: u32,
    pub domains: Vec<DomainDecl>,
    pub features: Vec<FeatureDecl>,
    #[serde(default)]
    pub utterances: Vec<UtteranceEntry>,
}

/// A validated utterance with labels and features resolved to indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub domain: usize,
    /// Index into the domain's label list.
    pub label: usize,
    /// In manifest feature order.
    pub features: Vec<Tensor>,
}

/// A fully validated in-memory corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub domains: Vec<DomainDecl>,
    pub features: Vec<FeatureDecl>,
    pub samples: Vec<Sample>,
}

impl Corpus {
    /// Validates bundles against the declarations. Fails on the first bad
    /// bundle, naming the utterance.
    pub fn from_bundles(domains: Vec<DomainDecl>, features: Vec<FeatureDecl>, bundles: Vec<FeatureBundle>) -> Result<Self> {
        validate_decls(&domains, &features)?;
        let mut seen = HashSet::new();
        let mut samples = Vec::with_capacity(bundles.len());
        for b in bundles {
            let fail = |msg: String| Error::Bundle {
                utterance: b.utterance_id.clone(),
                msg,
            };
            if !seen.insert(b.utterance_id.clone()) {
                return Err(fail("duplicate utterance id".into()));
            }
            let domain = domains
                .iter()
                .position(|d| d.name == b.domain)
                .ok_or_else(|| fail(format!("unknown domain `{}`", b.domain)))?;
            let label = domains[domain].labels.iter().position(|l| *l == b.label).ok_or_else(|| {
                fail(format!(
                    "label `{}` is not one of domain `{}`'s labels {:?}",
                    b.label, b.domain, domains[domain].labels
                ))
            })?;
            for (name, _) in &b.features {
                if !features.iter().any(|f| f.name == *name) {
                    return Err(fail(format!("undeclared feature `{name}`")));
                }
            }
            let mut values = Vec::with_capacity(features.len());
            for decl in &features {
                let t = b
                    .feature(&decl.name)
                    .ok_or_else(|| fail(format!("missing feature `{}`", decl.name)))?;
                check_feature(decl, t).map_err(fail)?;
                values.push(t.clone());
            }
            samples.push(Sample {
                id: b.utterance_id,
                domain,
                label,
                features: values,
            });
        }
        Ok(Corpus {
            domains,
            features,
            samples,
        })
    }

    pub fn to_bundles(&self) -> Vec<FeatureBundle> {
        self.samples
            .iter()
            .map(|s| FeatureBundle {
                utterance_id: s.id.clone(),
                domain: self.domains[s.domain].name.clone(),
                label: self.domains[s.domain].labels[s.label].clone(),
                features: self
                    .features
                    .iter()
                    .zip(&s.features)
                    .map(|(d, t)| (d.name.clone(), t.clone()))
                    .collect(),
            })
            .collect()
    }

    pub fn domain_index(&self, name: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| Error::UnknownDomain(name.to_string()))
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    /// Samples of one domain, in corpus order.
    pub fn domain_samples(&self, domain: usize) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.domain == domain)
    }

    /// Writes `manifest.toml` and `bundles/<id>.bin` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let bundle_dir = dir.join("bundles");
        std::fs::create_dir_all(&bundle_dir).map_err(|e| Error::io(&bundle_dir, e))?;
        let mut utterances = Vec::with_capacity(self.samples.len());
        for b in self.to_bundles() {
            let file = format!("bundles/{}.bin", file_stem(&b.utterance_id));
            b.write(&dir.join(&file))?;
            utterances.push(UtteranceEntry {
                id: b.utterance_id,
                file,
            });
        }
        let manifest = CorpusManifest {
            version: MANIFEST_VERSION,
            domains: self.domains.clone(),
            features: self.features.clone(),
            utterances,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::invalid("manifest", e.to_string()))?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Reads and validates a corpus directory (or a manifest path).
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: CorpusManifest = toml::from_str(&text).map_err(|e| Error::Format {
            path: manifest_path.clone(),
            msg: e.to_string(),
        })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format {
                path: manifest_path,
                msg: format!("unsupported manifest version {}", manifest.version),
            });
        }
        let mut bundles = Vec::with_capacity(manifest.utterances.len());
        for u in &manifest.utterances {
            let b = FeatureBundle::read(&root.join(&u.file))?;
            if b.utterance_id != u.id {
                return Err(Error::Bundle {
                    utterance: u.id.clone(),
                    msg: format!("file {} holds utterance `{}`", u.file, b.utterance_id),
                });
            }
            bundles.push(b);
        }
        Self::from_bundles(manifest.domains, manifest.features, bundles)
    }
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn validate_decls(domains: &[DomainDecl], features: &[FeatureDecl]) -> Result<()> {
    if domains.is_empty() {
        return Err(Error::invalid("corpus", "no domains declared"));
    }
    if features.is_empty() {
        return Err(Error::invalid("corpus", "no features declared"));
    }
    let mut names = HashSet::new();
    for d in domains {
        if !names.insert(&d.name) {
            return Err(Error::invalid("corpus", format!("domain `{}` declared twice", d.name)));
        }
        let labels: HashSet<_> = d.labels.iter().collect();
        if d.labels.len() < 2 || labels.len() != d.labels.len() {
            return Err(Error::invalid(
                "corpus",
                format!("domain `{}` needs at least two distinct labels", d.name),
            ));
        }
    }
    let mut names = HashSet::new();
    for f in features {
        if !names.insert(&f.name) || f.dim == 0 {
            return Err(Error::invalid("corpus", format!("feature `{}` is duplicated or has zero width", f.name)));
        }
    }
    Ok(())
}

fn check_feature(decl: &FeatureDecl, t: &Tensor) -> Result<(), String> {
    let ok = match (decl.kind, t.shape()) {
        (FeatureKind::Vector, [d]) => *d == decl.dim,
        (FeatureKind::Sequence, [l, d]) => *l >= 1 && *d == decl.dim,
        _ => false,
    };
    if !ok {
        let want = match decl.kind {
            FeatureKind::Vector => format!("[{}]", decl.dim),
            FeatureKind::Sequence => format!("[L × {}] with L ≥ 1", decl.dim),
        };
        return Err(format!("feature `{}` has shape {:?}, expected {want}", decl.name, t.shape()));
    }
    if !t.all_finite() {
        return Err(format!("feature `{}` contains non-finite values", decl.name));
    }
    Ok(())
}

/// Union of all domains' labels in order of first appearance.
pub fn label_union(domains: &[DomainDecl]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for d in domains {
        for l in &d.labels {
            if !out.contains(l) {
                out.push(l.clone());
            }
        }
    }
    out
}

/// Per domain, the union index of each of its labels.
pub fn union_index(domains: &[DomainDecl]) -> Vec<Vec<usize>> {
    let union = label_union(domains);
    let pos: HashMap<&str, usize> = union.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    domains
        .iter()
        .map(|d| d.labels.iter().map(|l| pos[l.as_str()]).collect())
        .collect()
}

/// Label sets of the three reference corpora.
pub fn reference_domains() -> Vec<DomainDecl> {
    let l = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
    vec![
        DomainDecl {
            name: "english".into(),
            labels: l(&["Neutral", "Happy", "Anger", "Sad"]),
        },
        DomainDecl {
            name: "german".into(),
            labels: l(&["Neutral", "Happy", "Anger", "Sad", "Fear", "Bored", "Disgusted"]),
        },
        DomainDecl {
            name: "french".into(),
            labels: l(&["Neutral", "Happy", "Anger", "Sad", "Fear", "Surprise", "Disgusted"]),
        },
    ]
}
