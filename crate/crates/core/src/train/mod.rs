//! AdamW, dataset splitting, batch scheduling and the training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{aux_loss, total_loss, validate_alpha};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::eval::{evaluate_domain, DomainEval};
use crate::model::Model;
use crate::nn::{cross_entropy, Mode, ParamGrads, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "optimizer",
                "need lr ≥ 0, betas in [0, 1), eps > 0 and weight_decay ≥ 0",
            ))
        }
    }
}

/// Moment buffers and step counts, one slot per parameter.
///
/// A parameter without a gradient in a step is left alone, buffers
/// included, so a batch from one domain never moves another domain's
/// tower or gate.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    /// Number of `step` calls.
    pub t: u64,
    slots: Vec<Option<Slot>>,
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    m: Tensor,
    v: Tensor,
    steps: i32,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        AdamWState {
            config,
            t: 0,
            slots: vec![None; store.len()],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        if grads.len() != store.len() || self.slots.len() != store.len() {
            return Err(Error::invalid("optimizer", "gradient, state and parameter counts differ"));
        }
        let c = self.config;
        for (id, g) in grads.iter() {
            let Some(g) = g else { continue };
            let p = store.get_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::invalid(
                    "optimizer",
                    format!("gradient shape {:?} for parameter of shape {:?}", g.shape(), p.shape()),
                ));
            }
            let slot = self.slots[id.index()].get_or_insert_with(|| Slot {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
                steps: 0,
            });
            slot.steps += 1;
            let bc1 = 1.0 - c.beta1.powi(slot.steps);
            let bc2 = 1.0 - c.beta2.powi(slot.steps);
            let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *p);
            }
        }
        self.t += 1;
        Ok(())
    }
}

/// How single-domain batches from several domains are ordered.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainSampling {
    /// Spread each domain's batches evenly, in proportion to its size.
    #[default]
    Proportional,
    /// All of one domain's batches, then the next domain's.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub sampling: DomainSampling,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 20,
            batch_size: 32,
            sampling: DomainSampling::Proportional,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("schedule", "epochs and batch_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub domain: usize,
    /// Sample indices into the corpus.
    pub samples: Vec<usize>,
}

/// Shuffles each domain's samples and cuts them into batches, then orders
/// the batches by `sampling`. Every batch holds one domain.
pub fn make_batches(
    per_domain: &[Vec<usize>],
    batch_size: usize,
    sampling: DomainSampling,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size", "must be at least 1"));
    }
    if per_domain.iter().all(Vec::is_empty) {
        return Err(Error::invalid("batching", "empty dataset"));
    }
    let queues: Vec<Vec<Batch>> = per_domain
        .iter()
        .enumerate()
        .map(|(k, idx)| {
            let mut idx = idx.clone();
            idx.shuffle(rng);
            idx.chunks(batch_size)
                .map(|c| Batch {
                    domain: k,
                    samples: c.to_vec(),
                })
                .collect()
        })
        .collect();
    match sampling {
        DomainSampling::Sequential => Ok(queues.into_iter().flatten().collect()),
        DomainSampling::Proportional => Ok(interleave(queues)),
    }
}

/// Repeatedly emits from the queue with the largest remaining fraction,
/// lowest index on ties.
fn interleave(queues: Vec<Vec<Batch>>) -> Vec<Batch> {
    let totals: Vec<usize> = queues.iter().map(Vec::len).collect();
    let mut taken = vec![0usize; queues.len()];
    let mut iters: Vec<_> = queues.into_iter().map(Vec::into_iter).collect();
    let mut out = Vec::with_capacity(totals.iter().sum());
    loop {
        let mut best: Option<usize> = None;
        for k in 0..totals.len() {
            if taken[k] == totals[k] {
                continue;
            }
            // remaining_k / total_k > remaining_b / total_b, cross-multiplied.
            let better = best.is_none_or(|b| {
                (totals[k] - taken[k]) * totals[b] > (totals[b] - taken[b]) * totals[k]
            });
            if better {
                best = Some(k);
            }
        }
        let Some(k) = best else { break };
        taken[k] += 1;
        out.push(iters[k].next().expect("counted"));
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Takes `count` items from `pool`, stratified by `labels`: every class gets
/// its floor share and the leftover slots go to the largest remainders,
/// lowest class first on ties. Returns (taken, rest).
fn stratified_take(pool: &[usize], labels: &[usize], count: usize) -> (Vec<usize>, Vec<usize>) {
    let classes = pool.iter().map(|&i| labels[i]).max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for &i in pool {
        by_class[labels[i]].push(i);
    }
    let n = pool.len() as f64;
    let exact: Vec<f64> = by_class.iter().map(|c| c.len() as f64 * count as f64 / n).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = count - quota.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            left -= 1;
        }
    }
    let (mut taken, mut rest) = (Vec::new(), Vec::new());
    for (c, members) in by_class.iter().enumerate() {
        taken.extend_from_slice(&members[..quota[c]]);
        rest.extend_from_slice(&members[quota[c]..]);
    }
    taken.sort_unstable();
    rest.sort_unstable();
    (taken, rest)
}

/// Splits `indices` into train/val/test: `round(0.2·n)` go to test and
/// `round(0.2·dev)` of the remaining dev set to validation, stratified by
/// label. `labels` is indexed by the values in `indices`.
pub fn split_dataset(indices: &[usize], labels: &[usize], rng: &mut ChaCha8Rng) -> Result<Split> {
    let n = indices.len();
    if n < 5 {
        return Err(Error::invalid("split", format!("{n} samples; need at least 5")));
    }
    let mut pool = indices.to_vec();
    pool.shuffle(rng);
    let n_test = (0.2 * n as f64).round() as usize;
    let (test, dev) = stratified_take(&pool, labels, n_test);
    let mut dev_pool = dev;
    dev_pool.shuffle(rng);
    let n_val = (0.2 * dev_pool.len() as f64).round() as usize;
    let (val, train) = stratified_take(&dev_pool, labels, n_val);
    Ok(Split { train, val, test })
}

/// Splits each domain of a corpus separately with one random stream.
pub fn split_corpus(corpus: &Corpus, seed: u64) -> Result<Vec<Split>> {
    let mut rng = stream(seed, Stream::Split);
    let labels: Vec<usize> = corpus.samples.iter().map(|s| s.label).collect();
    (0..corpus.domains.len())
        .map(|k| {
            let idx: Vec<usize> = (0..corpus.samples.len()).filter(|&i| corpus.samples[i].domain == k).collect();
            split_dataset(&idx, &labels, &mut rng).map_err(|e| match e {
                Error::Invalid { what, msg } => Error::Invalid {
                    what,
                    msg: format!("domain `{}`: {msg}", corpus.domains[k].name),
                },
                e => e,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
enum Stream {
    Split = 1,
    Batches = 2,
    Noise = 3,
}

/// Independent random streams derived from one seed.
fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub schedule: TrainSchedule,
    pub optimizer: AdamWConfig,
    /// Auxiliary loss weight per domain.
    pub alphas: Vec<f64>,
    /// Seeds batching, dropout and routing noise.
    pub seed: u64,
    /// Exclude a sample from its own centroid in the similarity matrix.
    pub exclude_self: bool,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    pub domain: String,
    /// `train` or `val`.
    pub split: &'static str,
    pub wa: f64,
    pub ua: f64,
    pub l_ce: f64,
    pub l_aux: f64,
}

pub const LOG_HEADER: &str = "epoch\tdomain\tsplit\twa\tua\tl_ce\tl_aux";

impl LogRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch, self.domain, self.split, self.wa, self.ua, self.l_ce, self.l_aux
        )
    }
}

pub fn format_log(records: &[LogRecord]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in records {
        let _ = writeln!(out, "{}", r.to_line());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub log: Vec<LogRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    /// Mean validation UA over domains at `best_epoch`.
    pub best_val_ua: f64,
    /// Per-batch training losses in order: (domain, L_CE, L_aux).
    pub batch_losses: Vec<(usize, f64, f64)>,
}

/// Losses of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub ce: f64,
    pub aux: f64,
    pub total: f64,
}

/// Forward and backward over one single-domain batch.
///
/// CE is the batch mean; the auxiliary loss is summed over the batch's
/// representations and weighted by `alpha`.
pub fn batch_gradients(
    model: &Model,
    corpus: &Corpus,
    batch: &Batch,
    alpha: f64,
    exclude_self: bool,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(BatchLoss, ParamGrads)> {
    let mut s = Session::new(&model.store, mode, Some(rng));
    let mut logits = Vec::with_capacity(batch.samples.len());
    let mut reps = Vec::with_capacity(batch.samples.len());
    let mut targets = Vec::with_capacity(batch.samples.len());
    let mut labels = Vec::with_capacity(batch.samples.len());
    for &i in &batch.samples {
        let sample = &corpus.samples[i];
        if sample.domain != batch.domain {
            return Err(Error::invalid("batch", format!("utterance `{}` is from another domain", sample.id)));
        }
        let fwd = model.forward(&mut s, batch.domain, &sample.features)?;
        let row = s.graph.reshape(fwd.logits, &[1, s.graph.shape(fwd.logits)[0]])?;
        logits.push(row);
        reps.push(fwd.rep);
        targets.push(model.target(batch.domain, sample.label));
        labels.push(sample.label);
    }
    let stacked = s.graph.concat(&logits, 0)?;
    let ce = cross_entropy(&mut s.graph, stacked, &targets)?;
    let mut loss = ce;
    let mut aux_value = 0.0;
    if alpha != 0.0 {
        let aux = aux_loss(&mut s, &reps, &labels, model.similarity, exclude_self)?;
        aux_value = s.value(aux).item();
        loss = total_loss(&mut s.graph, ce, aux, alpha)?;
    }
    if let Some(nas) = &model.nas {
        if let Some(pen) = nas.l0_penalty(&mut s, batch.domain)? {
            loss = s.graph.add(loss, pen)?;
        }
    }
    let out = BatchLoss {
        ce: s.value(ce).item(),
        aux: aux_value,
        total: s.value(loss).item(),
    };
    let grads = s.backward(loss)?;
    Ok((out, grads))
}

/// Eval-mode CE mean and auxiliary loss of a sample set from one domain.
fn split_losses(model: &Model, corpus: &Corpus, domain: usize, indices: &[usize], exclude_self: bool) -> Result<(f64, f64)> {
    let mut s = Session::eval(&model.store);
    let mut logits = Vec::with_capacity(indices.len());
    let mut reps = Vec::with_capacity(indices.len());
    let mut targets = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let sample = &corpus.samples[i];
        let fwd = model.forward(&mut s, domain, &sample.features)?;
        let row = s.graph.reshape(fwd.logits, &[1, s.graph.shape(fwd.logits)[0]])?;
        logits.push(row);
        reps.push(fwd.rep);
        targets.push(model.target(domain, sample.label));
        labels.push(sample.label);
    }
    let stacked = s.graph.concat(&logits, 0)?;
    let ce = cross_entropy(&mut s.graph, stacked, &targets)?;
    let aux = aux_loss(&mut s, &reps, &labels, model.similarity, exclude_self)?;
    Ok((s.value(ce).item(), s.value(aux).item()))
}

/// Trains `model` on the `train` part of each domain's split and keeps the
/// parameters of the epoch with the best mean validation UA (earliest on
/// ties). `on_record` sees every log record as it is produced.
pub fn fit(
    model: &mut Model,
    corpus: &Corpus,
    splits: &[Split],
    opts: &FitOptions,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<FitReport> {
    opts.schedule.validate()?;
    opts.optimizer.validate()?;
    let k = model.num_domains();
    if corpus.domains != model.config.domains {
        return Err(Error::invalid("fit", "corpus domains differ from the model's"));
    }
    if splits.len() != k || opts.alphas.len() != k {
        return Err(Error::invalid(
            "fit",
            format!("{k} domains, {} splits, {} alpha values", splits.len(), opts.alphas.len()),
        ));
    }
    for &a in &opts.alphas {
        validate_alpha(a)?;
    }
    let train: Vec<Vec<usize>> = splits.iter().map(|s| s.train.clone()).collect();
    let mut opt = AdamWState::new(opts.optimizer, &model.store);
    let mut batch_rng = stream(opts.seed, Stream::Batches);
    let mut noise_rng = stream(opts.seed, Stream::Noise);
    let mut log = Vec::new();
    let mut batch_losses = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;

    for epoch in 1..=opts.schedule.epochs {
        let batches = make_batches(&train, opts.schedule.batch_size, opts.schedule.sampling, &mut batch_rng)?;
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (b, batch) in batches.iter().enumerate() {
            let d = batch.domain;
            let (loss, grads) =
                batch_gradients(model, corpus, batch, opts.alphas[d], opts.exclude_self, Mode::Train, &mut noise_rng)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                    domain: corpus.domains[d].name.clone(),
                    ce: loss.ce,
                    aux: loss.aux,
                });
            }
            opt.step(&mut model.store, &grads)?;
            model.similarity.enforce(&mut model.store);
            sums[d].0 += loss.ce;
            sums[d].1 += loss.aux;
            sums[d].2 += 1;
            batch_losses.push((d, loss.ce, loss.aux));
        }

        let mut val_uas = Vec::new();
        for (d, split) in splits.iter().enumerate() {
            let name = &corpus.domains[d].name;
            if !split.train.is_empty() {
                let ev: DomainEval = evaluate_domain(model, corpus, d, &split.train)?;
                let n = sums[d].2.max(1) as f64;
                let rec = LogRecord {
                    epoch,
                    domain: name.clone(),
                    split: "train",
                    wa: ev.wa,
                    ua: ev.ua,
                    l_ce: sums[d].0 / n,
                    l_aux: sums[d].1 / n,
                };
                on_record(&rec);
                log.push(rec);
            }
            if !split.val.is_empty() {
                let ev = evaluate_domain(model, corpus, d, &split.val)?;
                let (l_ce, l_aux) = split_losses(model, corpus, d, &split.val, opts.exclude_self)?;
                val_uas.push(ev.ua);
                let rec = LogRecord {
                    epoch,
                    domain: name.clone(),
                    split: "val",
                    wa: ev.wa,
                    ua: ev.ua,
                    l_ce,
                    l_aux,
                };
                on_record(&rec);
                log.push(rec);
            }
        }
        let score = if val_uas.is_empty() {
            f64::NEG_INFINITY
        } else {
            val_uas.iter().sum::<f64>() / val_uas.len() as f64
        };
        // Without validation data the last epoch is kept.
        if val_uas.is_empty() || best.as_ref().is_none_or(|(_, b, _)| score > *b) {
            best = Some((epoch, score, model.store.clone()));
        }
    }
    let (best_epoch, best_val_ua, store) = best.expect("at least one epoch");
    model.store = store;
    Ok(FitReport {
        log,
        best_epoch,
        best_val_ua,
        batch_losses,
    })
}
