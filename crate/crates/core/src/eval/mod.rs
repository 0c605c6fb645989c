//! Accuracy metrics, confusion matrices, embedding compactness, gate reports
//! and embedding dumps.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::gating::{ConnectionRow, GateReport, GateRow};
use crate::model::Model;

fn check_lengths(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::invalid("metric input", "no predictions"));
    }
    if preds.len() != labels.len() {
        return Err(Error::invalid(
            "metric input",
            format!("{} predictions for {} labels", preds.len(), labels.len()),
        ));
    }
    Ok(())
}

/// Overall accuracy.
pub fn weighted_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Mean per-class recall over the classes present in `labels`.
pub fn unweighted_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut hits = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        counts[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    let present: Vec<f64> = hits
        .iter()
        .zip(&counts)
        .filter(|(_, &n)| n > 0)
        .map(|(&h, &n)| h as f64 / n as f64)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// `m[true][predicted]` counts.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    check_lengths(preds, labels)?;
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(Error::invalid("metric input", format!("class index out of range for {classes} classes")));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainEval {
    pub domain: String,
    pub wa: f64,
    pub ua: f64,
    pub confusion: Vec<Vec<usize>>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub domains: Vec<DomainEval>,
}

impl EvalResult {
    pub fn mean_ua(&self) -> f64 {
        self.domains.iter().map(|d| d.ua).sum::<f64>() / self.domains.len() as f64
    }

    pub fn mean_wa(&self) -> f64 {
        self.domains.iter().map(|d| d.wa).sum::<f64>() / self.domains.len() as f64
    }

    /// `domain\tcount\twa\tua`, one row per domain.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("domain\tcount\twa\tua\n");
        for d in &self.domains {
            let _ = writeln!(out, "{}\t{}\t{:.6}\t{:.6}", d.domain, d.count, d.wa, d.ua);
        }
        out
    }
}

/// Eval-mode predictions and representations for some samples of a corpus.
pub fn predict_samples(model: &Model, corpus: &Corpus, indices: &[usize]) -> Result<Vec<(usize, Vec<f64>)>> {
    indices
        .iter()
        .map(|&i| {
            let s = &corpus.samples[i];
            let out = model.infer(s.domain, &s.features)?;
            Ok((out.prediction, out.rep))
        })
        .collect()
}

/// Scores one domain on the given sample indices, all of which must belong
/// to it.
pub fn evaluate_domain(model: &Model, corpus: &Corpus, domain: usize, indices: &[usize]) -> Result<DomainEval> {
    let decl = corpus
        .domains
        .get(domain)
        .ok_or_else(|| Error::UnknownDomain(format!("domain index {domain}")))?;
    if let Some(&i) = indices.iter().find(|&&i| corpus.samples[i].domain != domain) {
        return Err(Error::invalid(
            "evaluation",
            format!("utterance `{}` is not in domain `{}`", corpus.samples[i].id, decl.name),
        ));
    }
    let preds: Vec<usize> = predict_samples(model, corpus, indices)?.into_iter().map(|(p, _)| p).collect();
    let labels: Vec<usize> = indices.iter().map(|&i| corpus.samples[i].label).collect();
    Ok(DomainEval {
        domain: decl.name.clone(),
        wa: weighted_accuracy(&preds, &labels)?,
        ua: unweighted_accuracy(&preds, &labels)?,
        confusion: confusion_matrix(&preds, &labels, decl.labels.len())?,
        count: indices.len(),
    })
}

/// Scores every domain that has samples among `indices`.
pub fn evaluate(model: &Model, corpus: &Corpus, indices: &[usize]) -> Result<EvalResult> {
    let mut domains = Vec::new();
    for k in 0..corpus.domains.len() {
        let own: Vec<usize> = indices.iter().copied().filter(|&i| corpus.samples[i].domain == k).collect();
        if !own.is_empty() {
            domains.push(evaluate_domain(model, corpus, k, &own)?);
        }
    }
    if domains.is_empty() {
        return Err(Error::invalid("evaluation", "no samples to evaluate"));
    }
    Ok(EvalResult { domains })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompactnessScore {
    /// Mean cosine over pairs with the same label.
    pub intra: f64,
    /// Mean cosine over pairs with different labels.
    pub inter: f64,
    /// `(1 + intra) / (1 + inter)`, which stays finite as both approach 0.
    pub ratio: f64,
}

/// Pairwise-cosine compactness of labelled embeddings.
pub fn compactness(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<CompactnessScore> {
    if embeddings.len() != labels.len() {
        return Err(Error::invalid("compactness", "embedding and label counts differ"));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    let present: Vec<usize> = counts.iter().copied().filter(|&n| n > 0).collect();
    if present.len() < 2 || present.iter().any(|&n| n < 2) {
        return Err(Error::invalid("compactness", "needs at least 2 classes with at least 2 samples each"));
    }
    let unit: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| {
            let n = e.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            e.iter().map(|v| v / n).collect()
        })
        .collect();
    let (mut intra, mut inter, mut n_intra, mut n_inter) = (0.0, 0.0, 0usize, 0usize);
    for i in 0..unit.len() {
        for j in i + 1..unit.len() {
            let c: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            if labels[i] == labels[j] {
                intra += c;
                n_intra += 1;
            } else {
                inter += c;
                n_inter += 1;
            }
        }
    }
    let intra = intra / n_intra as f64;
    let inter = inter / n_inter as f64;
    Ok(CompactnessScore {
        intra,
        inter,
        ratio: (1.0 + intra) / (1.0 + inter),
    })
}

/// Mean eval-mode gate weight per (domain, feature) over `indices`, plus the
/// deterministic routing gate of every connection for `ours`.
pub fn gate_report(model: &Model, corpus: &Corpus, indices: &[usize]) -> Result<GateReport> {
    if model.gates.is_none() {
        return Err(Error::invalid(
            "gate report",
            format!("variant `{}` has no gates", model.variant()),
        ));
    }
    let names: Vec<&str> = model.features.iter().map(|f| f.name.as_str()).collect();
    let mut weights = Vec::new();
    for (k, d) in corpus.domains.iter().enumerate() {
        let own: Vec<usize> = indices.iter().copied().filter(|&i| corpus.samples[i].domain == k).collect();
        if own.is_empty() {
            continue;
        }
        let mut sums = vec![0.0; names.len()];
        for &i in &own {
            let out = model.infer(k, &corpus.samples[i].features)?;
            let g = out.gate.expect("gated model");
            for (acc, v) in sums.iter_mut().zip(g) {
                *acc += v;
            }
        }
        for (name, total) in names.iter().zip(sums) {
            weights.push(GateRow {
                domain: d.name.clone(),
                feature: name.to_string(),
                mean_weight: total / own.len() as f64,
            });
        }
    }
    let mut connectivity = Vec::new();
    if let Some(nas) = &model.nas {
        for (k, d) in model.config.domains.iter().enumerate() {
            let xi = nas.deterministic_matrix(&model.store, k)?;
            for (i, to) in names.iter().enumerate() {
                for (j, from) in names.iter().enumerate() {
                    connectivity.push(ConnectionRow {
                        domain: d.name.clone(),
                        to: to.to_string(),
                        from: from.to_string(),
                        xi: xi.at2(i, j),
                    });
                }
            }
        }
    }
    Ok(GateReport { weights, connectivity })
}

/// One row of an embedding dump.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub utterance_id: String,
    pub domain: String,
    pub label: String,
    pub rep: Vec<f64>,
}

/// Eval-mode representations of the given samples.
pub fn embeddings(model: &Model, corpus: &Corpus, indices: &[usize]) -> Result<Vec<EmbeddingRow>> {
    let reps = predict_samples(model, corpus, indices)?;
    Ok(indices
        .iter()
        .zip(reps)
        .map(|(&i, (_, rep))| {
            let s = &corpus.samples[i];
            let d = &corpus.domains[s.domain];
            EmbeddingRow {
                utterance_id: s.id.clone(),
                domain: d.name.clone(),
                label: d.labels[s.label].clone(),
                rep,
            }
        })
        .collect())
}

/// Tab-separated `utterance_id, domain, label, e0 … e{D-1}` with a header
/// line; values carry 9 significant digits.
pub fn format_embeddings(rows: &[EmbeddingRow]) -> String {
    let dim = rows.first().map_or(0, |r| r.rep.len());
    let mut out = String::from("utterance_id\tdomain\tlabel");
    for i in 0..dim {
        let _ = write!(out, "\te{i}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{}\t{}\t{}", r.utterance_id, r.domain, r.label);
        for v in &r.rep {
            let _ = write!(out, "\t{v:.8e}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_embeddings(text: &str) -> Result<Vec<EmbeddingRow>> {
    let bad = |line: usize, msg: &str| Error::invalid("embedding dump", format!("line {line}: {msg}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header"))?;
    let width = header.split('\t').count();
    lines
        .enumerate()
        .map(|(n, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != width || width < 3 {
                return Err(bad(n + 2, "wrong column count"));
            }
            let rep = cols[3..]
                .iter()
                .map(|c| c.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad(n + 2, "bad number"))?;
            Ok(EmbeddingRow {
                utterance_id: cols[0].into(),
                domain: cols[1].into(),
                label: cols[2].into(),
                rep,
            })
        })
        .collect()
}

pub fn embedding_dump(model: &Model, corpus: &Corpus, indices: &[usize], path: &Path) -> Result<()> {
    let rows = embeddings(model, corpus, indices)?;
    std::fs::write(path, format_embeddings(&rows)).map_err(|e| Error::io(path, e))
}
