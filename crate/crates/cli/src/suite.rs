//! Canned multi-run experiments: the variant ladder, the auxiliary-loss
//! ablation and the gate-attribution check.

use std::fmt::Write as _;

use emogate::data::{Corpus, SyntheticSpec};
use emogate::eval::{compactness, embeddings, gate_report};
use emogate::model::Variant;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Scale};
use crate::error::CliError;
use crate::run::{mean_std, train_seed, SeedRun};

/// The configuration suites start from when none is given: desk-scale
/// layers on the default synthetic corpus.
pub fn suite_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(Variant::Ours);
    cfg.model.scale = Scale::Desk;
    cfg
}

/// Test scores of one trained seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedScores {
    pub seed: u64,
    /// `(ua, wa)` per domain.
    pub domains: Vec<(f64, f64)>,
}

impl SeedScores {
    fn of(run: &SeedRun) -> Self {
        SeedScores {
            seed: run.seed,
            domains: run.test.domains.iter().map(|d| (d.ua, d.wa)).collect(),
        }
    }

    pub fn mean_ua(&self) -> f64 {
        self.domains.iter().map(|d| d.0).sum::<f64>() / self.domains.len() as f64
    }

    pub fn mean_wa(&self) -> f64 {
        self.domains.iter().map(|d| d.1).sum::<f64>() / self.domains.len() as f64
    }
}

/// Runs every (setting, seed) pair in parallel; results come back grouped
/// by setting, in seed order.
fn run_grid(configs: &[ExperimentConfig], corpus: &Corpus) -> Result<Vec<Vec<SeedRun>>, CliError> {
    let jobs: Vec<(usize, u64)> = configs
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let runs: Vec<(usize, SeedRun)> = jobs
        .par_iter()
        .map(|&(i, s)| train_seed(&configs[i], corpus, s).map(|r| (i, r)))
        .collect::<Result<_, _>>()?;
    let mut grouped: Vec<Vec<SeedRun>> = configs.iter().map(|_| Vec::new()).collect();
    for (i, r) in runs {
        grouped[i].push(r);
    }
    Ok(grouped)
}

fn cell(scores: &[SeedScores], domain: Option<usize>) -> String {
    let (ua, wa): (Vec<f64>, Vec<f64>) = scores
        .iter()
        .map(|s| match domain {
            Some(d) => s.domains[d],
            None => (s.mean_ua(), s.mean_wa()),
        })
        .unzip();
    format!("{:.4}/{:.4}", mean_std(&ua).0, mean_std(&wa).0)
}

fn seed_rows(out: &mut String, setting: &str, domains: &[String], scores: &[SeedScores]) {
    for s in scores {
        for (d, (ua, wa)) in domains.iter().zip(&s.domains) {
            let _ = writeln!(out, "{setting}\t{}\t{d}\t{ua:.6}\t{wa:.6}", s.seed);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadderResult {
    pub domains: Vec<String>,
    pub rows: Vec<(Variant, Vec<SeedScores>)>,
}

impl LadderResult {
    /// Mean over seeds of the domain-averaged test UA.
    pub fn mean_ua(&self, v: Variant) -> Option<f64> {
        let (_, scores) = self.rows.iter().find(|(x, _)| *x == v)?;
        Some(mean_std(&scores.iter().map(SeedScores::mean_ua).collect::<Vec<_>>()).0)
    }

    /// Rows of variants, columns of domains, cells `UA/WA` averaged over
    /// seeds.
    pub fn table(&self) -> String {
        let mut out = String::from("variant");
        for d in &self.domains {
            let _ = write!(out, "\t{d}");
        }
        out.push_str("\tmean\n");
        for (v, scores) in &self.rows {
            let _ = write!(out, "{v}");
            for d in 0..self.domains.len() {
                let _ = write!(out, "\t{}", cell(scores, Some(d)));
            }
            let _ = writeln!(out, "\t{}", cell(scores, None));
        }
        out
    }

    pub fn seed_table(&self) -> String {
        let mut out = String::from("variant\tseed\tdomain\tua\twa\n");
        for (v, scores) in &self.rows {
            seed_rows(&mut out, &v.to_string(), &self.domains, scores);
        }
        out
    }
}

/// Trains each ladder variant on every seed of `cfg`.
pub fn run_ladder(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<LadderResult, CliError> {
    let configs: Vec<ExperimentConfig> = Variant::LADDER
        .iter()
        .map(|&v| ExperimentConfig { variant: v, ..cfg.clone() })
        .collect();
    let grouped = run_grid(&configs, corpus)?;
    Ok(LadderResult {
        domains: corpus.domains.iter().map(|d| d.name.clone()).collect(),
        rows: Variant::LADDER
            .iter()
            .zip(grouped)
            .map(|(&v, runs)| (v, runs.iter().map(SeedScores::of).collect()))
            .collect(),
    })
}

/// Scores of one ablation setting.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationArm {
    pub name: &'static str,
    pub scores: Vec<SeedScores>,
    /// Per seed: compactness ratio of test-split representations, averaged
    /// over domains.
    pub compactness: Vec<f64>,
}

impl AblationArm {
    pub fn mean_ua(&self) -> f64 {
        mean_std(&self.scores.iter().map(SeedScores::mean_ua).collect::<Vec<_>>()).0
    }

    pub fn mean_compactness(&self) -> f64 {
        mean_std(&self.compactness).0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub domains: Vec<String>,
    pub with_aux: AblationArm,
    pub without_aux: AblationArm,
}

impl AblationResult {
    pub fn table(&self) -> String {
        let mut out = String::from("setting");
        for d in &self.domains {
            let _ = write!(out, "\t{d}");
        }
        out.push_str("\tmean\tcompactness\n");
        for arm in [&self.with_aux, &self.without_aux] {
            let _ = write!(out, "{}", arm.name);
            for d in 0..self.domains.len() {
                let _ = write!(out, "\t{}", cell(&arm.scores, Some(d)));
            }
            let _ = writeln!(out, "\t{}\t{:.6}", cell(&arm.scores, None), arm.mean_compactness());
        }
        out
    }

    pub fn seed_table(&self) -> String {
        let mut out = String::from("setting\tseed\tdomain\tua\twa\n");
        for arm in [&self.with_aux, &self.without_aux] {
            seed_rows(&mut out, arm.name, &self.domains, &arm.scores);
        }
        out
    }
}

/// Mean over domains of the compactness ratio of test representations.
fn test_compactness(run: &SeedRun, corpus: &Corpus) -> Result<f64, CliError> {
    let mut ratios = Vec::new();
    for split in &run.splits {
        ratios.push(split_compactness(run, corpus, &split.test)?);
    }
    Ok(mean_std(&ratios).0)
}

fn split_compactness(run: &SeedRun, corpus: &Corpus, indices: &[usize]) -> Result<f64, CliError> {
    let rows = embeddings(&run.model, corpus, indices)?;
    let labels: Vec<usize> = indices.iter().map(|&i| corpus.samples[i].label).collect();
    let reps: Vec<Vec<f64>> = rows.into_iter().map(|r| r.rep).collect();
    Ok(compactness(&reps, &labels)?.ratio)
}

/// The samples of domain `k` as a corpus of their own.
pub fn domain_corpus(corpus: &Corpus, k: usize) -> Corpus {
    Corpus {
        domains: vec![corpus.domains[k].clone()],
        features: corpus.features.clone(),
        samples: corpus
            .domain_samples(k)
            .map(|s| emogate::data::Sample { domain: 0, ..s.clone() })
            .collect(),
    }
}

/// Trains `cfg` as given and again with every α set to 0.
///
/// With the `single` variant each domain gets its own model trained on its
/// samples alone; a seed's scores then collect one entry per domain and
/// its compactness is the mean over those models.
pub fn run_ablation(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<AblationResult, CliError> {
    let mut off = cfg.clone();
    off.alpha = corpus.domains.iter().map(|d| (d.name.clone(), 0.0)).collect();
    let arms = [("aux", cfg.clone()), ("no_aux", off)];
    let domains: Vec<String> = corpus.domains.iter().map(|d| d.name.clone()).collect();
    let mut built = Vec::new();
    if cfg.variant == Variant::Single {
        let parts: Vec<Corpus> = (0..corpus.domains.len()).map(|k| domain_corpus(corpus, k)).collect();
        let jobs: Vec<(usize, usize, u64)> = (0..arms.len())
            .flat_map(|a| (0..parts.len()).flat_map(move |k| cfg.seeds.iter().map(move |&s| (a, k, s))))
            .collect();
        let runs: Vec<(SeedRun, f64)> = jobs
            .par_iter()
            .map(|&(a, k, s)| {
                let mut arm = arms[a].1.clone();
                arm.alpha.retain(|d, _| *d == parts[k].domains[0].name);
                let r = train_seed(&arm, &parts[k], s)?;
                let c = test_compactness(&r, &parts[k])?;
                Ok((r, c))
            })
            .collect::<Result<_, CliError>>()?;
        let per_arm = parts.len() * cfg.seeds.len();
        for (a, (name, _)) in arms.iter().enumerate() {
            let mut scores = Vec::new();
            let mut comp = Vec::new();
            for (si, &seed) in cfg.seeds.iter().enumerate() {
                let mut ds = Vec::new();
                let mut cs = Vec::new();
                for k in 0..parts.len() {
                    let (r, c) = &runs[a * per_arm + k * cfg.seeds.len() + si];
                    ds.push((r.test.domains[0].ua, r.test.domains[0].wa));
                    cs.push(*c);
                }
                scores.push(SeedScores { seed, domains: ds });
                comp.push(mean_std(&cs).0);
            }
            built.push(AblationArm { name, scores, compactness: comp });
        }
    } else {
        let configs: Vec<ExperimentConfig> = arms.iter().map(|(_, c)| c.clone()).collect();
        for ((name, _), runs) in arms.iter().zip(run_grid(&configs, corpus)?) {
            built.push(AblationArm {
                name,
                scores: runs.iter().map(SeedScores::of).collect(),
                compactness: runs.iter().map(|r| test_compactness(r, corpus)).collect::<Result<_, _>>()?,
            });
        }
    }
    let without_aux = built.pop().expect("two arms");
    let with_aux = built.pop().expect("two arms");
    Ok(AblationResult { domains, with_aux, without_aux })
}

/// The default corpus with exactly one informative feature per domain:
/// `wav2vec` for English, `mfcc` for German, `byol` for French.
pub fn gate_spec() -> SyntheticSpec {
    let mut spec = SyntheticSpec::default();
    for (d, f) in spec.domains.iter_mut().zip(["wav2vec", "mfcc", "byol"]) {
        d.informative = vec![f.into()];
    }
    spec.signal = 1.0;
    spec
}

/// One (variant, seed, domain) outcome of the gate check.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutcome {
    pub variant: Variant,
    pub seed: u64,
    pub domain: String,
    pub informative: String,
    pub top: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateCheckResult {
    pub outcomes: Vec<GateOutcome>,
}

impl GateCheckResult {
    /// Seeds in which `variant` put its largest mean weight for `domain` on
    /// the informative feature.
    pub fn hits(&self, variant: Variant, domain: &str) -> usize {
        self.outcomes
            .iter()
            .filter(|o| o.variant == variant && o.domain == domain && o.top == o.informative)
            .count()
    }

    pub fn table(&self) -> String {
        let mut out = String::from("variant\tseed\tdomain\tinformative\ttop_feature\ttop_weight\thit\n");
        for o in &self.outcomes {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{:.6}\t{}",
                o.variant,
                o.seed,
                o.domain,
                o.informative,
                o.top,
                o.weight,
                u8::from(o.top == o.informative)
            );
        }
        out
    }
}

/// Trains MMoE and Ours on a corpus where each domain has one informative
/// feature and reads off the top-weighted feature per domain on the test
/// split. `informative[k]` names domain k's informative feature.
pub fn run_gate_check(cfg: &ExperimentConfig, corpus: &Corpus, informative: &[String]) -> Result<GateCheckResult, CliError> {
    let variants = [Variant::Mmoe, Variant::Ours];
    let configs: Vec<ExperimentConfig> = variants
        .iter()
        .map(|&v| ExperimentConfig { variant: v, ..cfg.clone() })
        .collect();
    let grouped = run_grid(&configs, corpus)?;
    let mut outcomes = Vec::new();
    for (&v, runs) in variants.iter().zip(grouped) {
        for r in runs {
            let test = r.test_indices();
            let report = gate_report(&r.model, corpus, &test)?;
            for (k, d) in corpus.domains.iter().enumerate() {
                let ws = report.domain_weights(&d.name);
                let top = report.top_feature(&d.name).unwrap_or_default().to_string();
                let weight = ws.iter().find(|(f, _)| *f == top).map_or(f64::NAN, |(_, w)| *w);
                outcomes.push(GateOutcome {
                    variant: v,
                    seed: r.seed,
                    domain: d.name.clone(),
                    informative: informative[k].clone(),
                    top,
                    weight,
                });
            }
        }
    }
    Ok(GateCheckResult { outcomes })
}

/// The informative feature of each domain of `spec`, if each has exactly one.
pub fn single_informative(spec: &SyntheticSpec) -> Result<Vec<String>, CliError> {
    spec.domains
        .iter()
        .map(|d| match d.informative.as_slice() {
            [f] => Ok(f.clone()),
            _ => Err(CliError::Validation(format!(
                "gate check needs exactly one informative feature per domain; `{}` has {}",
                d.name,
                d.informative.len()
            ))),
        })
        .collect()
}
