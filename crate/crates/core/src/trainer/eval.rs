//! Deterministic evaluation, metrics and the two robustness protocols.

use ami_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{unroll, GatePolicy, PredictTarget, UnrollOptions};
use crate::data::Dataset;
use crate::error::{AmiError, Result};
use crate::fmpm::{Model, Switches, WindowTrace};
use crate::objectives::LossWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Mean gate-open rate, percent.
    pub modality_sensing: f64,
    /// Mean of gate × active-patch fraction, percent.
    pub patch_sensing: f64,
    /// The headline sensing column: patch-inclusive when Sigma-Delta is on.
    pub sensing: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    /// Per-modality gate-open rate in `[0, 1]`.
    pub modality_rates: Vec<f64>,
    /// `[M][L]` fraction of windows in which each patch was read.
    pub heatmap: Vec<Vec<f64>>,
    pub windows: usize,
    /// One row of 0/1 gates per evaluated (window, stream).
    pub gate_trace: Vec<Vec<u8>>,
}

/// Accuracy and macro-F1 (both percent) from a confusion matrix. Classes
/// that never occur and are never predicted are left out of the F1 mean.
pub fn confusion_metrics(confusion: &[Vec<usize>]) -> (f64, f64) {
    let k = confusion.len();
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    let accuracy = if total == 0 { 0.0 } else { 100.0 * correct as f64 / total as f64 };
    let mut f1s = Vec::new();
    for c in 0..k {
        let tp = confusion[c][c];
        let fn_: usize = confusion[c].iter().sum::<usize>() - tp;
        let fp: usize = (0..k).map(|r| confusion[r][c]).sum::<usize>() - tp;
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            f1s.push(100.0 * 2.0 * tp as f64 / denom as f64);
        }
    }
    let f1 = if f1s.is_empty() { 0.0 } else { f1s.iter().sum::<f64>() / f1s.len() as f64 };
    (accuracy, f1)
}

#[derive(Clone, Debug)]
pub enum EvalGates {
    /// Deterministic controller decisions (the normal mode).
    Controller { cold_start_open: bool },
    /// Independent Bernoulli dropout of each modality with probability `p`.
    RandomMask { p: f64, seed: u64 },
    /// The same open/closed pattern for every window.
    Fixed(Vec<bool>),
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub switches: Switches,
    pub gates: EvalGates,
    pub batch_size: usize,
}

impl EvalOptions {
    pub fn standard(switches: Switches) -> Self {
        Self {
            switches,
            gates: EvalGates::Controller { cold_start_open: true },
            batch_size: 64,
        }
    }
}

pub fn evaluate(model: &Model, data: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    if data.num_windows() == 0 {
        return Err(AmiError::Data("cannot evaluate an empty split".into()));
    }
    let m = model.num_modalities();
    let l = model.patches_per_window();
    let k = model.spec.num_classes;
    let mut confusion = vec![vec![0usize; k]; k];
    let mut traces: Vec<WindowTrace> = Vec::new();
    let mut mask_rng = match opts.gates {
        EvalGates::RandomMask { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    // Unused by deterministic gates; required by the unroll signature.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for ids in data.ordered_batches(opts.batch_size) {
        let len = data.sequences[ids[0]].windows.len();
        let windows: Vec<_> = (0..len).map(|t| data.stack(&ids, t)).collect();
        let b = ids.len();
        let (policy, switches) = match &opts.gates {
            EvalGates::Controller { cold_start_open } => (
                GatePolicy::Controller {
                    sample_tau: None,
                    straight_through: false,
                    cold_start_open: *cold_start_open,
                },
                opts.switches,
            ),
            EvalGates::RandomMask { p, .. } => {
                let r = mask_rng.as_mut().expect("mask rng");
                let masks = (0..len)
                    .map(|_| Tensor::from_fn(&[b, m], |_| if r.random::<f64>() < *p { 0.0 } else { 1.0 }))
                    .collect();
                (GatePolicy::Fixed(masks), Switches { amc: false, ..opts.switches })
            }
            EvalGates::Fixed(open) => {
                if open.len() != m {
                    return Err(AmiError::Invalid(format!("fixed gate pattern has {} entries, model has {m} modalities", open.len())));
                }
                let masks = (0..len)
                    .map(|_| Tensor::from_fn(&[b, m], |i| f64::from(u8::from(open[i % m]))))
                    .collect();
                (GatePolicy::Fixed(masks), Switches { amc: false, ..opts.switches })
            }
        };
        let uo = UnrollOptions {
            switches,
            gates: policy,
            train: false,
            weights: LossWeights::default(),
            contrastive_tau: 0.1,
            predict_offset: 1,
            predict_target: PredictTarget::Cls,
            bank: None,
            frozen_targets: None,
            compute_loss: false,
            modality_dropout: 0.0,
        };
        let mut g = Graph::new();
        let res = unroll(&mut g, model, &windows, &uo, &mut rng)?;
        for (t, logits) in res.logits.iter().enumerate() {
            for (bi, row) in logits.data().chunks(k).enumerate() {
                let pred = argmax(row);
                confusion[windows[t].labels[bi]][pred] += 1;
            }
        }
        traces.extend(res.traces);
    }

    let mut modality_rates = vec![0.0; m];
    let mut heatmap = vec![vec![0.0; l]; m];
    let mut gate_trace = Vec::new();
    let mut rows = 0usize;
    let (mut gate_sum, mut patch_sum) = (0.0, 0.0);
    for tr in &traces {
        for (gates, patches) in tr.gates.iter().zip(&tr.patches) {
            rows += 1;
            gate_trace.push(gates.iter().map(|&g| u8::from(g)).collect());
            for mi in 0..m {
                if gates[mi] {
                    modality_rates[mi] += 1.0;
                    gate_sum += 1.0;
                }
                let active = patches[mi].iter().filter(|&&a| a).count();
                patch_sum += active as f64 / l as f64;
                for li in 0..l {
                    if patches[mi][li] {
                        heatmap[mi][li] += 1.0;
                    }
                }
            }
        }
    }
    let n = rows.max(1) as f64;
    for r in &mut modality_rates {
        *r /= n;
    }
    for row in &mut heatmap {
        for v in row {
            *v /= n;
        }
    }
    let modality_sensing = 100.0 * gate_sum / (n * m as f64);
    let patch_sensing = 100.0 * patch_sum / (n * m as f64);
    let (accuracy, macro_f1) = confusion_metrics(&confusion);
    Ok(EvalReport {
        accuracy,
        macro_f1,
        modality_sensing,
        patch_sensing,
        sensing: if opts.switches.sigma_delta { patch_sensing } else { modality_sensing },
        confusion,
        modality_rates,
        heatmap,
        windows: rows,
        gate_trace,
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Evaluate with the controller off and each modality dropped independently
/// with probability `p` per window.
pub fn robustness_random_masking(model: &Model, data: &Dataset, switches: Switches, p: f64, seed: u64) -> Result<EvalReport> {
    if !(0.0..=1.0).contains(&p) {
        return Err(AmiError::Invalid(format!("mask probability {p} not in [0, 1]")));
    }
    let opts = EvalOptions {
        switches: Switches { amc: false, ..switches },
        gates: EvalGates::RandomMask { p, seed },
        batch_size: 64,
    };
    evaluate(model, data, &opts)
}

/// Evaluate on streams decimated by `factor`, with patch sizes shrunk by
/// the same factor and tokenizers folded to match.
pub fn robustness_sampling_rate(model: &Model, data: &Dataset, opts: &EvalOptions, factor: usize) -> Result<EvalReport> {
    let small = data.decimated(factor)?;
    let folded = model.resampled(factor)?;
    evaluate(&folded, &small, opts)
}
