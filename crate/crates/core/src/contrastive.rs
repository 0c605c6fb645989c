//! Centroid-based contrastive auxiliary loss over emotion groups in a batch.
//!
//! Embeddings are L2-normalised and grouped by label; labels seen five times
//! or fewer in the batch are dropped. Each remaining embedding is scored
//! against every group centroid with `w·cos(x, c) + b` and pays the softmax
//! cross-entropy of its own group's column. The per-sample losses are summed,
//! not averaged, before weighting by `alpha`.

use crate::error::Result;
use crate::nn::{ParamId, ParamStore, Session};
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Groups need strictly more members than this to be kept.
pub const MIN_GROUP: usize = 5;

/// Lower bound for the similarity scale after each optimiser step.
pub const MIN_SCALE: f64 = 1e-6;

/// Normalised embeddings of the retained groups, stacked group by group.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    /// `[R × dim]`, rows ordered by group then by original position.
    pub rows: Option<Var>,
    /// `(label, original indices)` per retained group, ascending label.
    pub groups: Vec<(usize, Vec<usize>)>,
}

impl ContrastiveBatch {
    /// Number of retained emotions.
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_rows(&self) -> usize {
        self.groups.iter().map(|(_, m)| m.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Group index of each stacked row.
    pub fn row_groups(&self) -> Vec<usize> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(j, (_, m))| std::iter::repeat_n(j, m.len()))
            .collect()
    }

    /// `[R × N]` one-hot membership of rows in groups.
    fn membership(&self) -> Tensor {
        let n = self.num_groups();
        let owner = self.row_groups();
        let mut t = Tensor::zeros(&[owner.len(), n]);
        for (r, &j) in owner.iter().enumerate() {
            t.data_mut()[r * n + j] = 1.0;
        }
        t
    }
}

/// Groups `embeddings` by label, keeps labels with more than [`MIN_GROUP`]
/// members and normalises every kept embedding.
pub fn group_batch(g: &mut Graph, embeddings: &[Var], labels: &[usize]) -> Result<ContrastiveBatch, TensorError> {
    if embeddings.len() != labels.len() {
        return Err(TensorError::invalid(
            "group_batch",
            format!("{} embeddings for {} labels", embeddings.len(), labels.len()),
        ));
    }
    let mut by_label: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let groups: Vec<(usize, Vec<usize>)> = by_label.into_iter().filter(|(_, m)| m.len() > MIN_GROUP).collect();
    if groups.is_empty() {
        return Ok(ContrastiveBatch { rows: None, groups });
    }
    let mut rows = Vec::new();
    for (_, members) in &groups {
        for &i in members {
            let e = embeddings[i];
            let dim = g.value(e).numel();
            rows.push(g.reshape(e, &[1, dim])?);
        }
    }
    let stacked = g.concat(&rows, 0)?;
    let rows = g.l2_normalize(stacked)?;
    Ok(ContrastiveBatch { rows: Some(rows), groups })
}

/// `[N × dim]` group means, each including every member.
pub fn centroids(g: &mut Graph, batch: &ContrastiveBatch) -> Result<Var, TensorError> {
    let rows = batch.rows.ok_or_else(|| TensorError::invalid("centroids", "empty batch"))?;
    let mut avg = batch.membership();
    let n = batch.num_groups();
    for (j, (_, members)) in batch.groups.iter().enumerate() {
        let inv = 1.0 / members.len() as f64;
        for r in 0..avg.shape()[0] {
            avg.data_mut()[r * n + j] *= inv;
        }
    }
    let avg_t = g.constant(avg);
    let avg_t = g.transpose(avg_t)?;
    g.matmul(avg_t, rows)
}

/// The learnable affine map applied to cosine similarities.
#[derive(Debug, Clone, Copy)]
pub struct SimilarityParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl SimilarityParams {
    /// Registers `w = 10` and `b = -5`.
    pub fn new(store: &mut ParamStore, name: &str) -> Self {
        SimilarityParams {
            w: store.add(format!("{name}.w"), Tensor::scalar(10.0)),
            b: store.add(format!("{name}.b"), Tensor::scalar(-5.0)),
        }
    }

    /// Keeps the scale positive.
    pub fn enforce(&self, store: &mut ParamStore) {
        let w = store.get_mut(self.w);
        let v = &mut w.data_mut()[0];
        *v = v.max(MIN_SCALE);
    }
}

/// `[R × N]` scores `w·cos(x_r, c_k) + b`.
///
/// With `exclude_self`, the own-group column compares each row with the
/// mean of the other members of its group.
pub fn similarity_matrix(
    s: &mut Session<'_>,
    batch: &ContrastiveBatch,
    cents: Var,
    params: SimilarityParams,
    exclude_self: bool,
) -> Result<Var, TensorError> {
    let rows = batch.rows.ok_or_else(|| TensorError::invalid("similarity", "empty batch"))?;
    let g = &mut s.graph;
    let mut cos = g.cosine(rows, cents)?;
    if exclude_self {
        cos = replace_own_column(g, batch, rows, cents, cos)?;
    }
    let w = s.param(params.w);
    let b = s.param(params.b);
    let scaled = s.graph.mul(cos, w)?;
    s.graph.add(scaled, b)
}

fn replace_own_column(
    g: &mut Graph,
    batch: &ContrastiveBatch,
    rows: Var,
    cents: Var,
    cos: Var,
) -> Result<Var, TensorError> {
    let member = batch.membership();
    let r = member.shape()[0];
    let owner = batch.row_groups();
    let sizes: Vec<f64> = owner.iter().map(|&j| batch.groups[j].1.len() as f64).collect();
    // (M·c − x) / (M − 1), the centroid of the other members.
    let counts = g.constant(Tensor::new(vec![r, 1], sizes.clone())?);
    let inv = g.constant(Tensor::new(vec![r, 1], sizes.iter().map(|m| 1.0 / (m - 1.0)).collect())?);
    let sel = g.constant(member.clone());
    let own_c = g.matmul(sel, cents)?;
    let sums = g.mul(own_c, counts)?;
    let others = g.sub(sums, rows)?;
    let others = g.mul(others, inv)?;
    let pair = g.cosine(rows, others)?;
    let diag: Vec<usize> = (0..r).map(|i| i * r + i).collect();
    let own = g.gather(pair, &diag)?;
    let own = g.reshape(own, &[r, 1])?;
    let mask = g.constant(member.clone());
    let keep = g.constant(member.map(|v| 1.0 - v));
    let kept = g.mul(cos, keep)?;
    let placed = g.mul(own, mask)?;
    g.add(kept, placed)
}

/// `Σ_r −log softmax(S_r)[own group]`.
pub fn contrastive_loss(g: &mut Graph, sim: Var, batch: &ContrastiveBatch) -> Result<Var, TensorError> {
    let n = batch.num_groups();
    let owner = batch.row_groups();
    if g.shape(sim) != [owner.len(), n] {
        return Err(TensorError::invalid(
            "contrastive_loss",
            format!("scores {:?} for {} rows in {n} groups", g.shape(sim), owner.len()),
        ));
    }
    let logp = g.log_softmax(sim)?;
    let idx: Vec<usize> = owner.iter().enumerate().map(|(r, &j)| r * n + j).collect();
    let picked = g.gather(logp, &idx)?;
    let total = g.sum(picked);
    Ok(g.neg(total))
}

/// The full auxiliary loss for one batch; zero when no group survives.
pub fn aux_loss(
    s: &mut Session<'_>,
    embeddings: &[Var],
    labels: &[usize],
    params: SimilarityParams,
    exclude_self: bool,
) -> Result<Var, TensorError> {
    let batch = group_batch(&mut s.graph, embeddings, labels)?;
    if batch.is_empty() {
        return Ok(s.graph.scalar(0.0));
    }
    let cents = centroids(&mut s.graph, &batch)?;
    let sim = similarity_matrix(s, &batch, cents, params, exclude_self)?;
    contrastive_loss(&mut s.graph, sim, &batch)
}

/// `ce + alpha·aux`.
pub fn total_loss(g: &mut Graph, ce: Var, aux: Var, alpha: f64) -> Result<Var, TensorError> {
    if alpha == 0.0 {
        return Ok(ce);
    }
    let weighted = g.scale(aux, alpha);
    g.add(ce, weighted)
}

/// Default auxiliary weight for a domain name: 0.1 for English, 0.01 for
/// German, 0.015 for French, 0.1 otherwise.
pub fn default_alpha(domain: &str) -> f64 {
    match domain.to_ascii_lowercase().as_str() {
        "english" | "en" | "iemocap" => 0.1,
        "german" | "de" | "emodb" => 0.01,
        "french" | "fr" | "cafe" => 0.015,
        _ => 0.1,
    }
}

pub fn validate_alpha(alpha: f64) -> Result<f64> {
    if alpha >= 0.0 && alpha.is_finite() {
        Ok(alpha)
    } else {
        Err(crate::Error::invalid("alpha", format!("{alpha} must be a finite non-negative number")))
    }
}
