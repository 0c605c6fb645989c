//! Synthetic multi-domain corpora with controllable per-domain feature
//! informativeness.
//!
//! Every coordinate of a class mean is drawn from `N(0, signal²)` and every
//! noise coordinate from `N(0, noise²)`. For each (domain, feature) pair the
//! feature is either informative, carrying its class mean, or pure noise.
//! Sequences place the class mean under a half-sine envelope
//! `√2·sin(π(t + ½)/L)`, so each frame is noisy and the signal is spread over
//! time. Vector features additionally share one fixed offset per feature
//! across all domains and classes.
//!
//! With `distractors`, an uninformative feature is not pure noise: it carries
//! the mean of a class drawn independently of the label, so its marginal
//! distribution matches an informative feature's and the domain cannot be
//! told from which features look structured.
//!
//! With `shared_centers`, each feature draws one pool of class means and every
//! domain assigns its labels to the pool through its own permutation, so the
//! same region of feature space means different emotions in different
//! domains.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{reference_domains, Corpus, DomainDecl, FeatureBundle, FeatureDecl};
use crate::encoder::FeatureKind;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDomain {
    pub name: String,
    pub labels: Vec<String>,
    pub samples_per_class: usize,
    /// Names of the features that carry class signal in this domain.
    pub informative: Vec<String>,
}

/// Omitted fields take their [`Default`] values when deserialised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub domains: Vec<SyntheticDomain>,
    pub features: Vec<FeatureDecl>,
    /// Inclusive sequence length range.
    pub seq_len: [usize; 2],
    /// Standard deviation of class-mean coordinates.
    pub signal: f64,
    /// Standard deviation of noise coordinates.
    pub noise: f64,
    /// Norm of the per-feature offset shared by every vector sample.
    pub offset: f64,
    pub shared_centers: bool,
    /// Give uninformative features the mean of a randomly drawn class.
    pub distractors: bool,
}

impl Default for SyntheticSpec {
    /// Three domains with the reference label sets, two sequence features
    /// and three vector features, each domain informative on a different
    /// pair of features.
    fn default() -> Self {
        let informative: [&[&str]; 3] = [&["wav2vec", "byol"], &["allosaurus", "mfcc"], &["byol", "mfcc"]];
        let domains = reference_domains()
            .into_iter()
            .zip(informative)
            .map(|(d, inf)| SyntheticDomain {
                name: d.name,
                labels: d.labels,
                samples_per_class: 30,
                informative: inf.iter().map(|s| s.to_string()).collect(),
            })
            .collect();
        SyntheticSpec {
            seed: 7,
            domains,
            features: default_features(),
            seq_len: [20, 40],
            signal: 0.4,
            noise: 1.0,
            offset: 1.0,
            shared_centers: true,
            distractors: true,
        }
    }
}

/// `allosaurus`, `wav2vec` (sequences, width 32) and `ge2e`, `byol`, `mfcc`
/// (vectors, width 64).
pub fn default_features() -> Vec<FeatureDecl> {
    let f = |name: &str, kind, dim| FeatureDecl {
        name: name.into(),
        kind,
        dim,
    };
    vec![
        f("allosaurus", FeatureKind::Sequence, 32),
        f("wav2vec", FeatureKind::Sequence, 32),
        f("ge2e", FeatureKind::Vector, 64),
        f("byol", FeatureKind::Vector, 64),
        f("mfcc", FeatureKind::Vector, 64),
    ]
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("synthetic spec", msg));
        if self.domains.is_empty() || self.features.is_empty() {
            return bad("needs at least one domain and one feature".into());
        }
        if self.seq_len[0] == 0 || self.seq_len[0] > self.seq_len[1] {
            return bad(format!("sequence length range {:?} is empty or starts at 0", self.seq_len));
        }
        if !(self.signal >= 0.0 && self.noise >= 0.0 && self.offset >= 0.0) {
            return bad("signal, noise and offset must be non-negative".into());
        }
        for d in &self.domains {
            if d.samples_per_class == 0 {
                return bad(format!("domain `{}` has no samples per class", d.name));
            }
            if d.informative.is_empty() {
                return bad(format!("domain `{}` has no informative feature", d.name));
            }
            for f in &d.informative {
                if !self.features.iter().any(|x| x.name == *f) {
                    return bad(format!("domain `{}` names unknown feature `{f}`", d.name));
                }
            }
        }
        if self.features.iter().any(|f| f.dim == 0) {
            return bad("feature widths must be positive".into());
        }
        Ok(())
    }

    pub fn domain_decls(&self) -> Vec<DomainDecl> {
        self.domains
            .iter()
            .map(|d| DomainDecl {
                name: d.name.clone(),
                labels: d.labels.clone(),
            })
            .collect()
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * sd
        })
        .collect()
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// Builds the corpus described by `spec`. Equal specs give equal corpora.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let max_classes = spec.domains.iter().map(|d| d.labels.len()).max().unwrap_or(0);

    let offsets: Vec<Vec<f64>> = spec
        .features
        .iter()
        .map(|f| {
            let v = normal_vec(&mut rng, f.dim, 1.0);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            match f.kind {
                FeatureKind::Vector => v.iter().map(|x| x / n * spec.offset).collect(),
                FeatureKind::Sequence => vec![0.0; f.dim],
            }
        })
        .collect();

    // means[k][c][f]
    let means: Vec<Vec<Vec<Vec<f64>>>> = if spec.shared_centers {
        let pools: Vec<Vec<Vec<f64>>> = spec
            .features
            .iter()
            .map(|f| (0..max_classes).map(|_| normal_vec(&mut rng, f.dim, spec.signal)).collect())
            .collect();
        spec.domains
            .iter()
            .enumerate()
            .map(|(k, d)| {
                let mut perm: Vec<usize> = (0..max_classes).collect();
                if k > 0 {
                    perm.shuffle(&mut rng);
                }
                (0..d.labels.len())
                    .map(|c| pools.iter().map(|p| p[perm[c]].clone()).collect())
                    .collect()
            })
            .collect()
    } else {
        spec.domains
            .iter()
            .map(|d| {
                (0..d.labels.len())
                    .map(|_| spec.features.iter().map(|f| normal_vec(&mut rng, f.dim, spec.signal)).collect())
                    .collect()
            })
            .collect()
    };

    let mut bundles = Vec::new();
    for (k, d) in spec.domains.iter().enumerate() {
        let informative: Vec<bool> = spec.features.iter().map(|f| d.informative.contains(&f.name)).collect();
        let mut n = 0;
        for _ in 0..d.samples_per_class {
            for (c, label) in d.labels.iter().enumerate() {
                let mut features = Vec::with_capacity(spec.features.len());
                for (fi, f) in spec.features.iter().enumerate() {
                    let source = if informative[fi] || !spec.distractors {
                        c
                    } else {
                        rng.random_range(0..d.labels.len())
                    };
                    let mean: &[f64] = &means[k][source][fi];
                    let carries = informative[fi] || spec.distractors;
                    let t = match f.kind {
                        FeatureKind::Vector => {
                            let noise = normal_vec(&mut rng, f.dim, spec.noise);
                            let v = (0..f.dim)
                                .map(|i| {
                                    let m = if carries { mean[i] } else { 0.0 };
                                    f32_round(offsets[fi][i] + m + noise[i])
                                })
                                .collect();
                            Tensor::vector(v)
                        }
                        FeatureKind::Sequence => {
                            let len = rng.random_range(spec.seq_len[0]..=spec.seq_len[1]);
                            let mut data = Vec::with_capacity(len * f.dim);
                            for t in 0..len {
                                let env = 2f64.sqrt() * (std::f64::consts::PI * (t as f64 + 0.5) / len as f64).sin();
                                let noise = normal_vec(&mut rng, f.dim, spec.noise);
                                for i in 0..f.dim {
                                    let m = if carries { mean[i] * env } else { 0.0 };
                                    data.push(f32_round(m + noise[i]));
                                }
                            }
                            Tensor::matrix(len, f.dim, data).expect("shape product")
                        }
                    };
                    features.push((f.name.clone(), t));
                }
                bundles.push(FeatureBundle {
                    utterance_id: format!("{}-{n:04}", d.name),
                    domain: d.name.clone(),
                    label: label.clone(),
                    features,
                });
                n += 1;
            }
        }
    }
    Corpus::from_bundles(spec.domain_decls(), spec.features.clone(), bundles)
}
