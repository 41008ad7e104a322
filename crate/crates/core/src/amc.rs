//! Modality controller: per-modality gate logits from the current
//! representation, Gumbel-Sigmoid sampling with straight-through gradients,
//! and deterministic gates at inference.

use ami_tensor::{Graph, ParamSet, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AmiError, Result};
use crate::fmpm::layers::{init_linear, linear};

/// Guard inside the Gumbel double logarithm.
pub const GUMBEL_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub hidden: usize,
    /// Gumbel temperature at the start and end of training (linear anneal).
    pub tau_start: f64,
    pub tau_end: f64,
    /// Initial per-modality logit bias.
    pub init_bias: f64,
    /// Open every gate for the first window of a sequence.
    pub cold_start_open: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            tau_start: 1.0,
            tau_end: 0.5,
            init_bias: 0.0,
            cold_start_open: true,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(AmiError::config("gate.hidden", "must be >= 1"));
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return Err(AmiError::config("gate.tau_start", "temperatures must be > 0"));
        }
        Ok(())
    }

    /// Temperature after `progress ∈ [0, 1]` of training.
    pub fn tau_at(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        self.tau_start + (self.tau_end - self.tau_start) * p
    }
}

pub(crate) fn init_gate_net<R: Rng + ?Sized>(p: &mut ParamSet, d: usize, m: usize, cfg: &GateConfig, rng: &mut R) {
    init_linear(p, "gate.h", d, cfg.hidden, true, rng);
    init_linear(p, "gate.o", cfg.hidden, 1, true, rng);
    p.insert("gate.bias", Tensor::full(&[m], cfg.init_bias));
}

/// Mean of each modality's tokens: `[B, M·L, D] → [B, M, D]`.
pub fn aggregate_features(g: &mut Graph, repr: Var, modalities: usize) -> Result<Var> {
    let s = g.shape(repr).to_vec();
    if modalities == 0 || !s[1].is_multiple_of(modalities) {
        return Err(AmiError::Invalid(format!(
            "cannot split {} tokens evenly over {modalities} modalities",
            s[1]
        )));
    }
    let l = s[1] / modalities;
    let r = g.reshape(repr, &[s[0], modalities, l, s[2]])?;
    Ok(g.mean(r, 2)?)
}

/// Gate logits `[B, M]` from aggregated features `[B, M, D]`.
pub fn gate_logits(g: &mut Graph, p: &ParamSet, features: Var) -> Result<Var> {
    let s = g.shape(features).to_vec();
    let h = linear(g, p, "gate.h", features)?;
    let h = g.gelu(h);
    let o = linear(g, p, "gate.o", h)?;
    let o = g.reshape(o, &[s[0], s[1]])?;
    let bias = g.param(p, "gate.bias")?;
    Ok(g.add(o, bias)?)
}

/// `g = −log(−log(u + ε) + ε)` with `u ~ U(0, 1)`.
pub fn gumbel_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let u: f64 = rng.random();
        -(-(u + GUMBEL_EPS).ln() + GUMBEL_EPS).ln()
    })
}

/// `1{p > 0.5}`; an exact half stays closed.
pub fn harden(soft: &Tensor) -> Tensor {
    soft.map(|p| if p > 0.5 { 1.0 } else { 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateMode {
    /// Training: Gumbel-perturbed relaxation at temperature `tau`.
    Sample { tau: f64 },
    /// Inference: `σ(ℓ)` without noise.
    Deterministic,
}

/// One controller decision for the next window.
#[derive(Clone, Debug)]
pub struct GateDecision {
    pub logits: Var,
    pub soft: Var,
    pub hard: Tensor,
    /// Value multiplied into the tokens: the hard gate, carrying the soft
    /// gradient when straight-through is enabled.
    pub applied: Var,
}

/// Turn logits into gates. With `straight_through` the forward value is the
/// hard mask and the backward pass differentiates `soft`; otherwise the
/// applied gate is a constant.
pub fn decide<R: Rng + ?Sized>(
    g: &mut Graph,
    logits: Var,
    mode: GateMode,
    straight_through: bool,
    rng: &mut R,
) -> Result<GateDecision> {
    let soft = match mode {
        GateMode::Sample { tau } => {
            if !(tau > 0.0) {
                return Err(AmiError::Invalid(format!("gate temperature must be > 0, got {tau}")));
            }
            let noise = g.constant(gumbel_noise(g.shape(logits), rng));
            let z = g.add(logits, noise)?;
            let z = g.scale(z, 1.0 / tau);
            g.sigmoid(z)
        }
        GateMode::Deterministic => g.sigmoid(logits),
    };
    let hard = harden(g.value(soft));
    let applied = if straight_through {
        g.straight_through(soft, hard.clone())?
    } else {
        g.constant(hard.clone())
    };
    Ok(GateDecision {
        logits,
        soft,
        hard,
        applied,
    })
}
