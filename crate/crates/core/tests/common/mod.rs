#![allow(dead_code)]

use ami_core::amc::GateConfig;
use ami_core::data::{ModalitySpec, WindowBatch};
use ami_core::fmpm::{Model, ModelConfig, ModelSpec, Switches};
use ami_core::objectives::{LossWeights, MemoryBank};
use ami_core::amc::{self, GateMode};
use ami_core::fmpm::{AppliedGates, HistoryMemory};
use ami_core::objectives::task_loss;
use ami_core::sigma_delta::{encode_window, skip_policy, tokenize_with_reuse, SigmaDeltaParams};
use ami_core::trainer::{unroll, GatePolicy, PredictTarget, UnrollOptions};
use ami_tensor::gradcheck::{param_grad_check, GradCheckReport};
use ami_tensor::{Graph, ParamSet, Tensor};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `m` modalities of 2 channels with patch size 2 and `l` patches per window.
pub fn toy_spec(m: usize, d: usize, l: usize) -> ModelSpec {
    ModelSpec {
        model: ModelConfig {
            d_model: d,
            layers: 1,
            heads: 2,
            ff_dim: 2 * d,
            history: 3,
            dropout: 0.0,
        },
        gate: GateConfig {
            hidden: 8,
            ..Default::default()
        },
        sensing: SigmaDeltaParams::default(),
        modalities: (0..m)
            .map(|i| ModalitySpec {
                name: format!("s{i}"),
                channels: 2,
                rate_hz: 4.0,
                patch_size: 2,
                power_mw: [1.0, 2.0],
            })
            .collect(),
        num_classes: 3,
        window_seconds: l as f64 * 0.5,
    }
}

/// Gaussian windows `[B, C, T]` per modality and random labels.
pub fn random_windows(spec: &ModelSpec, b: usize, t: usize, seed: u64) -> Vec<WindowBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<usize> = (0..spec.num_classes).collect();
    (0..t)
        .map(|_| WindowBatch {
            modalities: spec
                .modalities
                .iter()
                .map(|ms| Tensor::randn(&[b, ms.channels, ms.window_samples(spec.window_seconds)], &mut rng))
                .collect(),
            labels: (0..b).map(|_| *classes.choose(&mut rng).unwrap()).collect(),
        })
        .collect()
}

pub fn loss_options<'a>(bank: Option<&'a Tensor>, frozen: Option<&'a [Tensor]>, gates: GatePolicy) -> UnrollOptions<'a> {
    UnrollOptions {
        switches: Switches::default(),
        gates,
        train: false,
        weights: LossWeights::default(),
        contrastive_tau: 0.1,
        predict_offset: 1,
        predict_target: PredictTarget::Cls,
        bank,
        frozen_targets: frozen,
        compute_loss: true,
        modality_dropout: 0.0,
    }
}

/// Central differences against the tape over the whole unrolled forward
/// (Sigma-Delta tokenization, fusion, context, backbone, controller and all
/// four loss terms). Gates are sampled with fixed noise and applied as
/// constants; predictive targets and the memory bank are frozen, so the
/// loss is a smooth function of the parameters away from gate flips.
/// Probes up to `per_tensor` entries of every parameter tensor.
pub fn full_forward_gradcheck(seed: u64, per_tensor: usize) -> GradCheckReport {
    let spec = toy_spec(2, 16, 4);
    let model = Model::new(spec.clone(), seed).unwrap();
    let (b, t) = (2, 3);
    let windows = random_windows(&spec, b, t, seed + 1000);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2000);
    let mut bank = MemoryBank::new(8, 16);
    for i in 0..6 {
        bank.push(i, (i % 2) as usize, Tensor::randn(&[16], &mut rng).data());
    }
    let bank = bank.matrix();
    let frozen: Vec<Tensor> = (0..t).map(|_| Tensor::randn(&[b, 16], &mut rng)).collect();

    let mut entries = Vec::new();
    for (name, tensor) in model.params.iter() {
        let mut idx: Vec<usize> = (0..tensor.numel()).collect();
        if idx.len() > per_tensor {
            idx = idx.choose_multiple(&mut rng, per_tensor).copied().collect();
        }
        entries.extend(idx.into_iter().map(|i| (name.clone(), i)));
    }

    let loss = |g: &mut Graph, p: &ParamSet| {
        let m = Model {
            spec: spec.clone(),
            params: p.clone(),
        };
        let opts = loss_options(
            Some(&bank),
            Some(&frozen),
            GatePolicy::Controller {
                sample_tau: Some(1.0),
                straight_through: false,
                cold_start_open: false,
            },
        );
        let mut noise = ChaCha8Rng::seed_from_u64(seed + 3000);
        let out = unroll(g, &m, &windows, &opts, &mut noise).map_err(|e| ami_tensor::TensorError::InvalidArgument {
            op: "unroll",
            reason: e.to_string(),
        })?;
        Ok(out.loss.expect("loss").0)
    };
    param_grad_check(&model.params, loss, 1e-5, Some(&entries)).unwrap()
}

/// `T_l[d] = Σ_{c,p} W[d,c,p] · x[c,l,p]`, straight from the raw patches.
fn dense_tokens(x: &Tensor, w: &Tensor) -> Vec<f64> {
    let (c, l, p) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = w.shape()[0];
    let mut out = vec![0.0; l * d];
    for li in 0..l {
        for di in 0..d {
            out[li * d + di] = (0..c)
                .flat_map(|ci| (0..p).map(move |pi| (ci, pi)))
                .map(|(ci, pi)| w.at(&[di, ci, pi]) * x.at(&[ci, li, pi]))
                .sum();
        }
    }
    out
}

/// Largest absolute gap between zero-threshold Sigma-Delta tokens and dense
/// tokens over `n` random windows of random shape.
pub fn dense_equivalence_gap(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (c, l, p, d) = (rng.random_range(1..4), rng.random_range(1..9), rng.random_range(1..6), rng.random_range(1..9));
        let x = Tensor::randn(&[c, l, p], &mut rng);
        let w = Tensor::randn(&[d, c, p], &mut rng);
        let (delta, mask) = encode_window(&x, 0.0, 2);
        if !mask.active.iter().all(|&a| a) {
            return f64::INFINITY;
        }
        let (tokens, stats) = tokenize_with_reuse(&delta, &mask, &w);
        if stats.invocations != l {
            return f64::INFINITY;
        }
        for (a, b) in tokens.data().iter().zip(dense_tokens(&x, &w)) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Number of random activity sequences whose skip mask has a run longer
/// than `k_skip`, skips an above-threshold patch or skips the first patch.
pub fn horizon_violations(n: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..n {
        let len = rng.random_range(1..33);
        let k = rng.random_range(0..6);
        let theta = rng.random_range(0.0..1.5);
        let a: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
        let mask = skip_policy(&a, theta, k);
        let mut run = 0;
        let mut ok = mask.active[0];
        for (i, &on) in mask.active.iter().enumerate() {
            run = if on { 0 } else { run + 1 };
            ok &= run <= k && (on || a[i] < theta);
        }
        bad += usize::from(!ok);
    }
    bad
}

/// Gate-logit gradient of a one-window task loss through the
/// straight-through gate, and the oracle: the upstream gradient at the hard
/// gate value pushed through `p_soft = σ(ℓ)` on a separate tape.
pub fn straight_through_pair() -> (Tensor, Tensor) {
    let spec = toy_spec(3, 8, 4);
    let model = Model::new(spec.clone(), 6).unwrap();
    let batch = &random_windows(&spec, 2, 1, 3)[0];
    let logits = Tensor::new(vec![2, 3], vec![0.7, -1.2, 2.0, -0.3, 0.4, -2.5]).unwrap();
    let switches = Switches::default();

    let window_loss = |g: &mut Graph, gates: AppliedGates| {
        let mut mem = HistoryMemory::new(3);
        let out = model
            .forward_window(g, &batch.modalities, Some(&gates), &mut mem, &switches, None::<&mut ChaCha8Rng>)
            .unwrap();
        task_loss(g, out.logits, &batch.labels).unwrap()
    };

    // Through the straight-through gate.
    let mut g = Graph::new();
    let l = g.leaf(logits.clone(), true);
    let dec = amc::decide(&mut g, l, GateMode::Deterministic, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let hard = dec.hard.clone();
    assert!(hard.data().contains(&0.0) && hard.data().contains(&1.0));
    let loss = window_loss(&mut g, AppliedGates { value: dec.applied, hard: dec.hard });
    let st = g.backward(loss).unwrap().get(l).unwrap().clone();

    // Upstream gradient at the hard gate value.
    let mut g = Graph::new();
    let h = g.leaf(hard.clone(), true);
    let loss = window_loss(&mut g, AppliedGates { value: h, hard: hard.clone() });
    let upstream = g.backward(loss).unwrap().get(h).unwrap().clone();

    // The same upstream pushed through p_soft = σ(ℓ).
    let mut g = Graph::new();
    let l = g.leaf(logits, true);
    let soft = g.sigmoid(l);
    let u = g.constant(upstream);
    let prod = g.mul(soft, u).unwrap();
    let total = g.sum_all(prod).unwrap();
    let oracle = g.backward(total).unwrap().get(l).unwrap().clone();

    (st, oracle)
}
