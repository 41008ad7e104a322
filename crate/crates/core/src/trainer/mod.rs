//! Truncated-BPTT training over window sequences, evaluation and robustness
//! protocols.

mod eval;
pub mod optim;

pub use eval::{
    confusion_metrics, evaluate, robustness_random_masking, robustness_sampling_rate, EvalGates, EvalOptions, EvalReport,
};

use ami_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amc::{self, GateMode};
use crate::data::{Dataset, WindowBatch};
use crate::error::{AmiError, Result};
use crate::fmpm::{AppliedGates, HistoryMemory, Model, Switches, WindowTrace};
use crate::objectives::{self, ContrastiveItem, LossParts, LossWeights, MemoryBank};
use optim::{clip_global_norm, cosine_lr, AdamW};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictTarget {
    /// The class-token embedding.
    Cls,
    /// Mean of the output tokens.
    TokenMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub bptt_window: usize,
    pub clip_norm: f64,
    /// Consecutive non-finite gradient steps tolerated before aborting.
    pub max_bad_steps: usize,
    pub contrastive_tau: f64,
    pub bank_capacity: usize,
    /// Forecast horizon of the predictive loss, in windows.
    pub predict_offset: usize,
    pub predict_target: PredictTarget,
    pub loss: LossWeights,
    pub ablation: Switches,
    /// Learning-rate multiplier for the per-modality gate biases.
    pub gate_lr_scale: f64,
    /// Train-time probability of hiding a modality on top of the gates.
    pub modality_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 1e-3,
            bptt_window: 10,
            clip_norm: 1.0,
            max_bad_steps: 10,
            contrastive_tau: 0.1,
            bank_capacity: 512,
            predict_offset: 1,
            predict_target: PredictTarget::Cls,
            loss: LossWeights::default(),
            ablation: Switches::default(),
            gate_lr_scale: 3.0,
            modality_dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bptt_window == 0 {
            return Err(AmiError::config("train.bptt_window", "must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(AmiError::config("train.lr", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(AmiError::config("train.batch_size", "must be >= 1"));
        }
        if self.weight_decay < 0.0 {
            return Err(AmiError::config("train.weight_decay", "must be >= 0"));
        }
        if !(self.contrastive_tau > 0.0) {
            return Err(AmiError::config("train.contrastive_tau", "must be > 0"));
        }
        if self.predict_offset == 0 {
            return Err(AmiError::config("train.predict_offset", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.modality_dropout) {
            return Err(AmiError::config("train.modality_dropout", "must be in [0, 1)"));
        }
        if !(self.gate_lr_scale > 0.0) {
            return Err(AmiError::config("train.gate_lr_scale", "must be > 0"));
        }
        self.loss.validate()
    }

    /// Loss weights with switched-off terms zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.loss;
        if !self.ablation.amc {
            w.gating = 0.0;
        }
        if !self.ablation.contrastive {
            w.contrastive = 0.0;
        }
        if !self.ablation.predictive {
            w.predictive = 0.0;
        }
        w
    }
}

/// Where gates for each window come from.
#[derive(Clone, Debug)]
pub enum GatePolicy {
    /// Controller decisions from the previous window. `sample_tau` selects
    /// Gumbel sampling (training) over deterministic gates.
    Controller {
        sample_tau: Option<f64>,
        straight_through: bool,
        cold_start_open: bool,
    },
    /// Every modality read every window.
    Open,
    /// Externally supplied `[B, M]` 0/1 masks, one per window.
    Fixed(Vec<Tensor>),
}

pub struct UnrollOptions<'a> {
    pub switches: Switches,
    pub gates: GatePolicy,
    /// Enables dropout.
    pub train: bool,
    pub weights: LossWeights,
    pub contrastive_tau: f64,
    pub predict_offset: usize,
    pub predict_target: PredictTarget,
    pub bank: Option<&'a Tensor>,
    /// Constant predictive targets, one `[B, D]` per window. Used when the
    /// loss must be a smooth function of parameters (gradient checks).
    pub frozen_targets: Option<&'a [Tensor]>,
    pub compute_loss: bool,
    /// Probability of additionally hiding each (stream, modality) after the
    /// gate decision. Training-time augmentation; 0 disables it.
    pub modality_dropout: f64,
}

pub struct Unrolled {
    pub loss: Option<(Var, LossParts)>,
    pub logits: Vec<Tensor>,
    pub traces: Vec<WindowTrace>,
    /// Predictive-target embeddings per window, `[B, D]`.
    pub targets: Vec<Tensor>,
    /// Gate logits emitted after each window (controller on).
    pub gate_logits: Vec<Option<Tensor>>,
    /// Detached open-modality embeddings for the memory bank.
    pub bank_updates: Vec<(usize, Vec<f64>)>,
}

/// Forward an unrolled window sequence and accumulate the four losses.
pub fn unroll<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &Model,
    windows: &[WindowBatch],
    opts: &UnrollOptions<'_>,
    rng: &mut R,
) -> Result<Unrolled> {
    if windows.is_empty() {
        return Err(AmiError::Invalid("empty unroll".into()));
    }
    let b = windows[0].batch_size();
    let m = model.num_modalities();
    let d = model.spec.model.d_model;
    let capacity = if opts.switches.context { model.spec.model.history } else { 0 };
    let mut memory = HistoryMemory::new(capacity);

    let mut prev_logits: Option<Var> = None;
    let mut task_terms = Vec::new();
    let mut gate_terms = Vec::new();
    let mut contrast_terms = Vec::new();
    let mut h_vars = Vec::new();
    let mut out = Unrolled {
        loss: None,
        logits: Vec::new(),
        traces: Vec::new(),
        targets: Vec::new(),
        gate_logits: Vec::new(),
        bank_updates: Vec::new(),
    };

    for (t, batch) in windows.iter().enumerate() {
        let applied = match &opts.gates {
            GatePolicy::Open => None,
            GatePolicy::Fixed(masks) => {
                let mask = masks.get(t).ok_or_else(|| AmiError::Invalid(format!("no gate mask for window {t}")))?;
                if mask.data().iter().all(|&v| v > 0.5) {
                    None
                } else {
                    let value = g.constant(mask.clone());
                    Some(AppliedGates {
                        value,
                        hard: mask.clone(),
                    })
                }
            }
            GatePolicy::Controller {
                sample_tau,
                straight_through,
                cold_start_open,
            } => {
                if !opts.switches.amc {
                    None
                } else {
                    let logits = match prev_logits {
                        Some(l) => Some(l),
                        None if *cold_start_open => None,
                        None => {
                            let zeros = g.constant(Tensor::zeros(&[b, m, d]));
                            Some(amc::gate_logits(g, &model.params, zeros)?)
                        }
                    };
                    match logits {
                        None => None,
                        Some(l) => {
                            let mode = match sample_tau {
                                Some(tau) => GateMode::Sample { tau: *tau },
                                None => GateMode::Deterministic,
                            };
                            let dec = amc::decide(g, l, mode, *straight_through, rng)?;
                            gate_terms.push(objectives::gating_loss(g, dec.soft)?);
                            Some(AppliedGates {
                                value: dec.applied,
                                hard: dec.hard,
                            })
                        }
                    }
                }
            }
        };

        let applied = if opts.modality_dropout > 0.0 {
            drop_modalities(g, applied, b, m, opts.modality_dropout, rng)?
        } else {
            applied
        };

        let out_w = model.forward_window(
            g,
            &batch.modalities,
            applied.as_ref(),
            &mut memory,
            &opts.switches,
            if opts.train { Some(&mut *rng) } else { None },
        )?;
        prev_logits = out_w.gate_logits;
        out.gate_logits.push(out_w.gate_logits.map(|l| g.value(l).clone()));
        out.logits.push(g.value(out_w.logits).clone());

        let h = match opts.predict_target {
            PredictTarget::Cls => out_w.h_cls,
            PredictTarget::TokenMean => g.mean(out_w.repr, 1)?,
        };
        out.targets.push(g.value(h).clone());
        h_vars.push(h);

        // Embeddings of modalities that were actually read this window.
        let mut ids = Vec::new();
        let mut items = Vec::new();
        for bi in 0..b {
            for mi in 0..m {
                if out_w.trace.gates[bi][mi] {
                    ids.push(bi * m + mi);
                    items.push(ContrastiveItem { window: bi, modality: mi });
                }
            }
        }
        if opts.compute_loss {
            task_terms.push(objectives::task_loss(g, out_w.logits, &batch.labels)?);
            if opts.weights.contrastive > 0.0 && !ids.is_empty() {
                let flat = g.reshape(out_w.features, &[b * m, d])?;
                let emb = g.embedding(flat, &ids)?;
                if let Some(c) = objectives::contrastive_loss(g, emb, &items, opts.bank, opts.contrastive_tau)? {
                    contrast_terms.push(c);
                }
            }
        }
        let feats = g.value(out_w.features).data().to_vec();
        for (&id, item) in ids.iter().zip(&items) {
            out.bank_updates.push((item.modality, feats[id * d..(id + 1) * d].to_vec()));
        }
        out.traces.push(out_w.trace);
    }

    if opts.compute_loss {
        let mean_of = |g: &mut Graph, terms: &[Var]| -> Result<Option<Var>> {
            if terms.is_empty() {
                return Ok(None);
            }
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = g.add(acc, t)?;
            }
            Ok(Some(g.scale(acc, 1.0 / terms.len() as f64)))
        };
        let mut pred_terms = Vec::new();
        if opts.weights.predictive > 0.0 {
            let delta = opts.predict_offset;
            for t in 0..windows.len().saturating_sub(delta) {
                let p = model.predict_next(g, h_vars[t])?;
                let target = match opts.frozen_targets {
                    Some(frozen) => g.constant(frozen[t + delta].clone()),
                    None => h_vars[t + delta],
                };
                pred_terms.push(objectives::predictive_loss(g, p, target)?);
            }
        }
        let task = mean_of(g, &task_terms)?.expect("at least one window");
        let gating = if opts.weights.gating > 0.0 { mean_of(g, &gate_terms)? } else { None };
        let contrastive = mean_of(g, &contrast_terms)?;
        let predictive = mean_of(g, &pred_terms)?;
        out.loss = Some(objectives::total_loss(g, task, gating, contrastive, predictive, &opts.weights)?);
    }
    Ok(out)
}

fn drop_modalities<R: Rng + ?Sized>(
    g: &mut Graph,
    applied: Option<AppliedGates>,
    b: usize,
    m: usize,
    p: f64,
    rng: &mut R,
) -> Result<Option<AppliedGates>> {
    let keep = Tensor::from_fn(&[b, m], |_| if rng.random::<f64>() < p { 0.0 } else { 1.0 });
    if keep.data().iter().all(|&k| k == 1.0) {
        return Ok(applied);
    }
    let kv = g.constant(keep.clone());
    Ok(Some(match applied {
        None => AppliedGates { value: kv, hard: keep },
        Some(a) => AppliedGates {
            value: g.mul(a.value, kv)?,
            hard: Tensor::from_fn(&[b, m], |i| a.hard.data()[i] * keep.data()[i]),
        },
    }))
}

/// One row of the per-step training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub task: f64,
    pub gating: f64,
    pub contrastive: f64,
    pub predictive: f64,
    pub total: f64,
    pub sensing_rate: f64,
    pub lr: f64,
    pub tau: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "step,epoch,task,gating,contrastive,predictive,total,sensing_rate,lr,tau";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.task,
            self.gating,
            self.contrastive,
            self.predictive,
            self.total,
            self.sensing_rate,
            self.lr,
            self.tau
        )
    }
}

/// Model, optimizer and bookkeeping; everything a checkpoint stores.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub opt: AdamW,
    pub bank: MemoryBank,
    pub epochs_done: usize,
    pub step: usize,
    /// Consecutive skipped (non-finite) steps.
    pub bad_steps: usize,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig) -> Self {
        let d = model.spec.model.d_model;
        Self {
            model,
            opt: AdamW::new(cfg.weight_decay),
            bank: MemoryBank::new(cfg.bank_capacity, d),
            epochs_done: 0,
            step: 0,
            bad_steps: 0,
        }
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn steps_per_epoch(data: &Dataset, cfg: &TrainConfig) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    data.batches(cfg.batch_size, &mut rng)
        .iter()
        .map(|ids| data.sequences[ids[0]].windows.len().div_ceil(cfg.bptt_window))
        .sum()
}

/// Run epochs until `until_epoch` (exclusive upper bound, capped at
/// `cfg.epochs`). Each epoch draws its own RNG stream from `seed`, so a run
/// resumed from an epoch boundary matches an uninterrupted one.
pub fn train_epochs(
    state: &mut TrainState,
    data: &Dataset,
    cfg: &TrainConfig,
    gate_cfg: &amc::GateConfig,
    seed: u64,
    until_epoch: usize,
    log: &mut Vec<LogRow>,
) -> Result<()> {
    cfg.validate()?;
    if data.sequences.is_empty() {
        return Err(AmiError::Data("training split is empty".into()));
    }
    let total_steps = steps_per_epoch(data, cfg) * cfg.epochs;
    let weights = cfg.effective_weights();
    let until = until_epoch.min(cfg.epochs);
    while state.epochs_done < until {
        let epoch = state.epochs_done;
        let mut rng = epoch_rng(seed, epoch);
        for ids in data.batches(cfg.batch_size, &mut rng) {
            let len = data.sequences[ids[0]].windows.len();
            let mut start = 0;
            while start < len {
                let end = (start + cfg.bptt_window).min(len);
                if end - start < cfg.bptt_window && len >= cfg.bptt_window {
                    log::debug!("short unroll of {} windows at sequence end", end - start);
                }
                let windows: Vec<WindowBatch> = (start..end).map(|t| data.stack(&ids, t)).collect();
                train_step(state, &windows, cfg, gate_cfg, &weights, total_steps, epoch, &mut rng, log)?;
                start = end;
            }
        }
        state.epochs_done += 1;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    state: &mut TrainState,
    windows: &[WindowBatch],
    cfg: &TrainConfig,
    gate_cfg: &amc::GateConfig,
    weights: &LossWeights,
    total_steps: usize,
    epoch: usize,
    rng: &mut ChaCha8Rng,
    log: &mut Vec<LogRow>,
) -> Result<()> {
    let progress = state.step as f64 / total_steps.max(1) as f64;
    let tau = gate_cfg.tau_at(progress);
    let lr = cosine_lr(cfg.lr, state.step, total_steps);
    let bank = (!state.bank.is_empty()).then(|| state.bank.matrix());
    let opts = UnrollOptions {
        switches: cfg.ablation,
        gates: GatePolicy::Controller {
            sample_tau: Some(tau),
            straight_through: true,
            cold_start_open: gate_cfg.cold_start_open,
        },
        train: true,
        weights: *weights,
        contrastive_tau: cfg.contrastive_tau,
        predict_offset: cfg.predict_offset,
        predict_target: cfg.predict_target,
        bank: bank.as_ref(),
        frozen_targets: None,
        compute_loss: true,
        modality_dropout: cfg.modality_dropout,
    };
    let mut g = Graph::new();
    let res = unroll(&mut g, &state.model, windows, &opts, rng)?;
    let (loss, parts) = res.loss.expect("loss requested");
    let grads = g.backward(loss)?;
    let mut grads = grads.for_params(&state.model.params);
    let finite = grads.values().all(Tensor::is_finite);
    if finite {
        clip_global_norm(&mut grads, cfg.clip_norm);
        let gate_lr = lr * cfg.gate_lr_scale;
        state
            .opt
            .update_with(&mut state.model.params, &grads, |name| if name == "gate.bias" { gate_lr } else { lr });
        state.bad_steps = 0;
    } else {
        state.bad_steps += 1;
        log::warn!("step {}: non-finite gradient, update skipped", state.step);
        if state.bad_steps >= cfg.max_bad_steps {
            return Err(AmiError::DivergedGradients(state.bad_steps));
        }
    }
    let window_id = state.step as u64;
    for (m, e) in &res.bank_updates {
        state.bank.push(window_id, *m, e);
    }
    let sensing = {
        let rates: Vec<f64> = res
            .traces
            .iter()
            .map(|t| if cfg.ablation.sigma_delta { t.patch_rate() } else { t.modality_rate() })
            .collect();
        rates.iter().sum::<f64>() / rates.len() as f64
    };
    log.push(LogRow {
        step: state.step,
        epoch,
        task: parts.task,
        gating: parts.gating,
        contrastive: parts.contrastive,
        predictive: parts.predictive,
        total: parts.total,
        sensing_rate: sensing,
        lr,
        tau,
    });
    state.step += 1;
    Ok(())
}
