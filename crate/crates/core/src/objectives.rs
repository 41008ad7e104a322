//! Training objectives: classification, gate sparsity, cross-modal InfoNCE
//! against a memory bank, and next-window prediction.

use std::collections::VecDeque;

use ami_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{AmiError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub task: f64,
    pub gating: f64,
    pub contrastive: f64,
    pub predictive: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            task: 1.0,
            gating: 0.1,
            contrastive: 0.05,
            predictive: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("task", self.task),
            ("gating", self.gating),
            ("contrastive", self.contrastive),
            ("predictive", self.predictive),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(AmiError::config(format!("loss.{name}"), "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Scalar values of the four parts and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub task: f64,
    pub gating: f64,
    pub contrastive: f64,
    pub predictive: f64,
    pub total: f64,
}

/// Mean cross-entropy of `logits` `[B, K]` against `labels`.
pub fn task_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    let (b, k) = (s[0], s[1]);
    if labels.len() != b {
        return Err(AmiError::Invalid(format!("{} labels for batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(AmiError::Invalid(format!("label {bad} out of range for {k} classes")));
    }
    let lp = g.log_softmax(logits)?;
    let mut onehot = vec![0.0; b * k];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * k + y] = -1.0 / b as f64;
    }
    let w = g.constant(Tensor::new(vec![b, k], onehot)?);
    let picked = g.mul(lp, w)?;
    Ok(g.sum_all(picked)?)
}

/// Mean of the soft gate probabilities.
pub fn gating_loss(g: &mut Graph, p_soft: Var) -> Result<Var> {
    Ok(g.mean_all(p_soft)?)
}

/// Detached, unit-norm embeddings from earlier windows.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    /// (window id, modality, embedding)
    entries: VecDeque<(u64, usize, Vec<f64>)>,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Store a normalized copy; the oldest entry is evicted when full.
    pub fn push(&mut self, window: u64, modality: usize, embedding: &[f64]) {
        if self.capacity == 0 {
            return;
        }
        let norm = (embedding.iter().map(|v| v * v).sum::<f64>() + ami_tensor::NORM_EPS).sqrt();
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries
            .push_back((window, modality, embedding.iter().map(|v| v / norm).collect()));
    }

    /// Entries as a `[Q, D]` tensor.
    pub fn matrix(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.entries.len() * self.dim);
        for (_, _, e) in &self.entries {
            data.extend_from_slice(e);
        }
        Tensor::new(vec![self.entries.len(), self.dim], data).expect("bank shape")
    }

    pub fn ids(&self) -> impl Iterator<Item = (u64, usize)> + '_ {
        self.entries.iter().map(|(w, m, _)| (*w, *m))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Rebuild a bank from stored ids and already-normalized rows `[Q, D]`.
    pub fn restore(capacity: usize, ids: &[(u64, usize)], rows: &Tensor) -> Result<Self> {
        let s = rows.shape();
        if s.len() != 2 || s[0] != ids.len() || ids.len() > capacity {
            return Err(AmiError::Invalid(format!(
                "bank rows {s:?} do not match {} ids with capacity {capacity}",
                ids.len()
            )));
        }
        let dim = s[1];
        let entries = ids
            .iter()
            .zip(rows.data().chunks(dim.max(1)))
            .map(|(&(w, m), r)| (w, m, r.to_vec()))
            .collect();
        Ok(Self { capacity, dim, entries })
    }
}

/// One embedding that takes part in the contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContrastiveItem {
    /// Window identity; items sharing it are positives for each other.
    pub window: usize,
    pub modality: usize,
}

/// InfoNCE over modality embeddings `[N, D]`. For every ordered pair `(i, j)`
/// from the same window and different modalities the loss is
/// `−log(exp(s_ij/τ) / (exp(s_ij/τ) + Σ_neg exp(s_ik/τ)))` with negatives
/// drawn from other windows in the batch and from the bank. Returns `None`
/// when no positive pair exists.
pub fn contrastive_loss(
    g: &mut Graph,
    embeddings: Var,
    items: &[ContrastiveItem],
    bank: Option<&Tensor>,
    tau: f64,
) -> Result<Option<Var>> {
    let n = items.len();
    if g.shape(embeddings)[0] != n {
        return Err(AmiError::Invalid(format!(
            "{} contrastive items for {} embeddings",
            n,
            g.shape(embeddings)[0]
        )));
    }
    if !(tau > 0.0) {
        return Err(AmiError::Invalid(format!("contrastive temperature must be > 0, got {tau}")));
    }
    let mut pairs = vec![0.0; n * n];
    let mut negatives = vec![0.0; n * n];
    let mut count = 0usize;
    for (i, a) in items.iter().enumerate() {
        for (j, b) in items.iter().enumerate() {
            if a.window == b.window {
                if a.modality != b.modality {
                    pairs[i * n + j] = 1.0;
                    count += 1;
                }
            } else {
                negatives[i * n + j] = 1.0;
            }
        }
    }
    if count == 0 {
        log::debug!("contrastive loss: no positive pairs in this window, term is 0");
        return Ok(None);
    }
    let e = g.l2_normalize(embeddings)?;
    let et = g.transpose(e)?;
    let sims = g.matmul(e, et)?;
    let s = g.scale(sims, 1.0 / tau);
    let xs = g.exp(s);
    let neg_mask = g.constant(Tensor::new(vec![n, n], negatives)?);
    let neg = g.mul(xs, neg_mask)?;
    let mut neg_sum = g.sum(neg, 1)?;
    if let Some(bank) = bank.filter(|b| b.shape()[0] > 0) {
        let bt = g.constant(transpose2(bank));
        let sb = g.matmul(e, bt)?;
        let sb = g.scale(sb, 1.0 / tau);
        let xb = g.exp(sb);
        let bank_sum = g.sum(xb, 1)?;
        neg_sum = g.add(neg_sum, bank_sum)?;
    }
    let neg_col = g.reshape(neg_sum, &[n, 1])?;
    let denom = g.add(xs, neg_col)?;
    let log_denom = g.log(denom);
    let per_pair = g.sub(log_denom, s)?;
    let weights = g.constant(Tensor::new(vec![n, n], pairs.iter().map(|p| p / count as f64).collect())?);
    let weighted = g.mul(per_pair, weights)?;
    Ok(Some(g.sum_all(weighted)?))
}

fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Tensor::from_fn(&[c, r], |i| t.data()[(i % r) * c + i / r])
}

/// `mean((prediction − target)²)` with the target treated as a constant.
pub fn predictive_loss(g: &mut Graph, prediction: Var, target: Var) -> Result<Var> {
    let target = g.detach(target);
    let diff = g.sub(prediction, target)?;
    let sq = g.square(diff);
    Ok(g.mean_all(sq)?)
}

/// Weighted sum of the four parts. Any non-finite part aborts with its name.
pub fn total_loss(
    g: &mut Graph,
    task: Var,
    gating: Option<Var>,
    contrastive: Option<Var>,
    predictive: Option<Var>,
    w: &LossWeights,
) -> Result<(Var, LossParts)> {
    let value = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0]);
    let parts = [
        ("task", Some(task), w.task),
        ("gating", gating, w.gating),
        ("contrastive", contrastive, w.contrastive),
        ("predictive", predictive, w.predictive),
    ];
    for (name, v, _) in parts {
        let x = value(g, v);
        if !x.is_finite() {
            return Err(AmiError::NonFiniteLoss { part: name, value: x });
        }
    }
    let mut total = g.scale(task, w.task);
    for (_, v, weight) in &parts[1..] {
        if let Some(v) = v {
            let s = g.scale(*v, *weight);
            total = g.add(total, s)?;
        }
    }
    let out = LossParts {
        task: value(g, Some(task)),
        gating: value(g, gating),
        contrastive: value(g, contrastive),
        predictive: value(g, predictive),
        total: g.value(total).data()[0],
    };
    Ok((total, out))
}
