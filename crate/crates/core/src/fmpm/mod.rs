//! The multimodal prediction model: per-modality tokenizers, cross-modal
//! fusion, positional encoding, temporal context over past windows, and a
//! small transformer backbone with a class token.

pub(crate) mod layers;

use std::collections::VecDeque;

use ami_tensor::{AttentionMask, Graph, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amc::{self, GateConfig};
use crate::data::ModalitySpec;
use crate::error::{AmiError, Result};
use crate::sigma_delta::{self, ActivityMask, SigmaDeltaParams, Threshold};
use layers::{init_block, init_layer_norm, init_linear, layer_norm, linear, multi_head_attention, transformer_block, BlockCtx};

pub use layers::sinusoidal_encoding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Past windows kept in the temporal memory (0 disables context).
    pub history: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            layers: 4,
            heads: 8,
            ff_dim: 1024,
            history: 10,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(AmiError::config(
                "model.heads",
                format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads),
            ));
        }
        if self.ff_dim == 0 {
            return Err(AmiError::config("model.ff_dim", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(AmiError::config("model.dropout", "must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Component switches used for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Switches {
    pub amc: bool,
    pub sigma_delta: bool,
    pub fusion: bool,
    pub context: bool,
    pub contrastive: bool,
    pub predictive: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Self {
            amc: true,
            sigma_delta: true,
            fusion: true,
            context: true,
            contrastive: true,
            predictive: true,
        }
    }
}

impl Switches {
    pub const NAMES: [&'static str; 6] = ["amc", "sigma_delta", "fusion", "context", "contrastive", "predictive"];

    /// Copy with the named component turned off.
    pub fn without(mut self, name: &str) -> Result<Self> {
        match name {
            "amc" => self.amc = false,
            "sigma_delta" => self.sigma_delta = false,
            "fusion" => self.fusion = false,
            "context" => self.context = false,
            "contrastive" => self.contrastive = false,
            "predictive" => self.predictive = false,
            other => {
                return Err(AmiError::Invalid(format!(
                    "unknown ablation switch `{other}` (expected one of {})",
                    Self::NAMES.join(", ")
                )))
            }
        }
        Ok(self)
    }

    /// Everything off: a plain dense multimodal transformer.
    pub fn dense() -> Self {
        Self {
            amc: false,
            sigma_delta: false,
            fusion: true,
            context: false,
            contrastive: false,
            predictive: false,
        }
    }
}

/// Everything needed to rebuild a model with identical parameter shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub model: ModelConfig,
    pub gate: GateConfig,
    pub sensing: SigmaDeltaParams,
    pub modalities: Vec<ModalitySpec>,
    pub num_classes: usize,
    pub window_seconds: f64,
}

impl ModelSpec {
    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    /// Common patch count per window.
    pub fn patches_per_window(&self) -> Result<usize> {
        let mut l = None;
        for m in &self.modalities {
            let samples = m.window_samples(self.window_seconds);
            if m.patch_size == 0 || samples % m.patch_size != 0 {
                return Err(AmiError::PatchPartition {
                    modality: m.name.clone(),
                    samples,
                    patch: m.patch_size,
                });
            }
            let lm = samples / m.patch_size;
            match l {
                None => l = Some(lm),
                Some(prev) if prev != lm => {
                    return Err(AmiError::config(
                        "dataset.modalities",
                        format!("modality `{}` yields {lm} patches per window, others {prev}", m.name),
                    ))
                }
                _ => {}
            }
        }
        l.ok_or_else(|| AmiError::config("dataset.modalities", "no modalities"))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.gate.validate()?;
        self.sensing.validate()?;
        if self.num_classes < 2 {
            return Err(AmiError::config("dataset.num_classes", "must be >= 2"));
        }
        self.patches_per_window()?;
        Ok(())
    }
}

/// Ring buffer of past pooled window representations, each `[B, D]`.
#[derive(Clone, Debug, Default)]
pub struct HistoryMemory {
    entries: VecDeque<Var>,
    capacity: usize,
}

impl HistoryMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, v: Var) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(v);
    }

    pub fn entries(&self) -> impl Iterator<Item = &Var> {
        self.entries.iter()
    }
}

/// Gates applied to the current window's tokenization.
#[derive(Clone, Debug)]
pub struct AppliedGates {
    /// `[B, M]` forward value (0/1); may carry a straight-through gradient.
    pub value: Var,
    pub hard: Tensor,
}

/// Per-window sensing record for every batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowTrace {
    /// `[B][M]`
    pub gates: Vec<Vec<bool>>,
    /// `[B][M][L]`: patch read and tokenized (always false behind a closed gate).
    pub patches: Vec<Vec<Vec<bool>>>,
}

impl WindowTrace {
    pub fn modality_rate(&self) -> f64 {
        let (mut on, mut n) = (0usize, 0usize);
        for row in &self.gates {
            on += row.iter().filter(|&&x| x).count();
            n += row.len();
        }
        on as f64 / n.max(1) as f64
    }

    pub fn patch_rate(&self) -> f64 {
        let (mut on, mut n) = (0usize, 0usize);
        for row in &self.patches {
            for m in row {
                on += m.iter().filter(|&&x| x).count();
                n += m.len();
            }
        }
        on as f64 / n.max(1) as f64
    }
}

pub struct WindowOutput {
    pub logits: Var,
    /// Non-class output tokens `[B, M·L, D]`.
    pub repr: Var,
    pub h_cls: Var,
    /// Per-modality token means of `repr`, `[B, M, D]`.
    pub features: Var,
    /// Controller logits for the next window, when the controller is on.
    pub gate_logits: Option<Var>,
    pub trace: WindowTrace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamSet,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl Model {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = &spec.model;
        let d = cfg.d_model;
        let m = spec.num_modalities();
        let mut p = ParamSet::new();
        for (i, ms) in spec.modalities.iter().enumerate() {
            let fan = ms.channels * ms.patch_size;
            let bound = (3.0 / fan as f64).sqrt();
            p.insert(format!("tok.{i}.w"), Tensor::uniform(&[d, ms.channels, ms.patch_size], bound, &mut rng));
        }
        p.insert("mask_embed", Tensor::randn(&[m, d], &mut rng).map(|v| 0.02 * v));
        if spec.sensing.learn_thresholds {
            p.insert("sd.theta_raw", Tensor::full(&[m], inverse_softplus(spec.sensing.theta)));
        }
        init_block(&mut p, "fuse", d, cfg.ff_dim, &mut rng);
        init_layer_norm(&mut p, "ctx.ln", d);
        init_layer_norm(&mut p, "ctx.ln_mem", d);
        layers::init_attention(&mut p, "ctx.att", d, &mut rng);
        p.insert("cls", Tensor::randn(&[d], &mut rng).map(|v| 0.02 * v));
        for i in 0..cfg.layers {
            init_block(&mut p, &format!("blk.{i}"), d, cfg.ff_dim, &mut rng);
        }
        init_layer_norm(&mut p, "ln_f", d);
        init_linear(&mut p, "head", d, spec.num_classes, true, &mut rng);
        amc::init_gate_net(&mut p, d, m, &spec.gate, &mut rng);
        init_linear(&mut p, "pred.h", d, d, true, &mut rng);
        init_linear(&mut p, "pred.o", d, d, true, &mut rng);
        Ok(Self { spec, params: p })
    }

    pub fn num_modalities(&self) -> usize {
        self.spec.num_modalities()
    }

    pub fn patches_per_window(&self) -> usize {
        self.spec.patches_per_window().expect("validated at construction")
    }

    /// Current per-modality thresholds.
    pub fn thresholds(&self) -> Vec<f64> {
        match self.params.get("sd.theta_raw") {
            Some(raw) => raw.data().iter().map(|&r| (1.0 + r.exp()).ln()).collect(),
            None => vec![self.spec.sensing.theta; self.num_modalities()],
        }
    }

    /// Check that a set of windows `[B, C_m, T_m]` matches this model.
    pub fn check_inputs(&self, inputs: &[Tensor]) -> Result<usize> {
        if inputs.len() != self.num_modalities() {
            return Err(AmiError::config(
                "dataset.modalities",
                format!("model expects {} modalities, got {}", self.num_modalities(), inputs.len()),
            ));
        }
        let b = inputs[0].shape()[0];
        for (x, ms) in inputs.iter().zip(&self.spec.modalities) {
            let s = x.shape();
            if s.len() != 3 || s[0] != b || s[1] != ms.channels || s[2] % ms.patch_size != 0 || s[2] / ms.patch_size != self.patches_per_window() {
                return Err(AmiError::Data(format!(
                    "modality `{}`: input shape {s:?} does not match {} channels and {} patches of {}",
                    ms.name,
                    ms.channels,
                    self.patches_per_window(),
                    ms.patch_size
                )));
            }
        }
        Ok(b)
    }

    /// Tokens for modality `m`, `[B, L, D]`, plus patch masks per batch row.
    fn tokenize(
        &self,
        g: &mut Graph,
        m: usize,
        x: &Tensor,
        sigma_delta: bool,
    ) -> Result<(Var, Vec<ActivityMask>)> {
        let ms = &self.spec.modalities[m];
        let w = g.param(&self.params, &format!("tok.{m}.w"))?;
        let b = x.shape()[0];
        if !sigma_delta {
            let xc = g.constant(x.clone());
            let t = g.conv1d_patch(xc, w)?;
            let l = g.shape(t)[1];
            return Ok((t, vec![ActivityMask::all_active(l); b]));
        }
        let sd = &self.spec.sensing;
        let threshold = if sd.learn_thresholds {
            let raw = g.param(&self.params, "sd.theta_raw")?;
            let e = g.exp(raw);
            let e1 = g.add_scalar(e, 1.0);
            let all = g.log(e1);
            Threshold::Learned(g.slice(all, 0, m, m + 1)?)
        } else {
            Threshold::Fixed(sd.theta)
        };
        let enc = sigma_delta::sigma_delta_tokens(g, x, w, ms.patch_size, threshold, sd.k_skip, sd.tau_theta)?;
        Ok((enc.tokens, enc.masks))
    }

    /// One window of the forward pass. `gates` is `None` for all-open.
    /// Closed modalities are replaced by their mask embedding; when the
    /// gate carries no gradient their raw input is never read.
    pub fn forward_window<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        inputs: &[Tensor],
        gates: Option<&AppliedGates>,
        memory: &mut HistoryMemory,
        switches: &Switches,
        rng: Option<&mut R>,
    ) -> Result<WindowOutput> {
        let b = self.check_inputs(inputs)?;
        let m_count = self.num_modalities();
        let l = self.patches_per_window();
        let d = self.spec.model.d_model;
        let p = &self.params;

        let counterfactual = gates.is_some_and(|gt| g.requires_grad(gt.value));
        let mask_table = g.param(p, "mask_embed")?;
        let mut blocks = Vec::with_capacity(m_count);
        let mut trace_gates = vec![vec![true; m_count]; b];
        let mut trace_patches = vec![vec![Vec::new(); m_count]; b];
        for (m, x) in inputs.iter().enumerate() {
            let open: Vec<bool> = match gates {
                Some(gt) => (0..b).map(|bi| gt.hard.data()[bi * m_count + m] > 0.5).collect(),
                None => vec![true; b],
            };
            let all_closed = open.iter().all(|o| !o);
            let (tokens, masks) = if all_closed && !counterfactual {
                (None, vec![ActivityMask { active: vec![false; l], activity: vec![0.0; l] }; b])
            } else if counterfactual || open.iter().all(|&o| o) {
                let (t, masks) = self.tokenize(g, m, x, switches.sigma_delta)?;
                (Some(t), masks)
            } else {
                // Zero the rows of closed gates so they are not read.
                let per = x.numel() / b;
                let mut data = x.data().to_vec();
                for (bi, &o) in open.iter().enumerate() {
                    if !o {
                        data[bi * per..(bi + 1) * per].fill(0.0);
                    }
                }
                let xz = Tensor::new(x.shape().to_vec(), data)?;
                let (t, masks) = self.tokenize(g, m, &xz, switches.sigma_delta)?;
                (Some(t), masks)
            };
            for bi in 0..b {
                trace_gates[bi][m] = open[bi];
                trace_patches[bi][m] = if open[bi] {
                    masks[bi].active.clone()
                } else {
                    vec![false; l]
                };
            }
            let all_open = open.iter().all(|&o| o);
            let block = match (gates, tokens) {
                (None, Some(t)) => t,
                (Some(_), Some(t)) if all_open && !counterfactual => t,
                (Some(gt), tokens) => {
                    let row = g.embedding(mask_table, &[m])?;
                    let mask_tok = g.reshape(row, &[1, 1, d])?;
                    match tokens {
                        Some(t) => {
                            let pm = g.slice(gt.value, 1, m, m + 1)?;
                            let pm = g.reshape(pm, &[b, 1, 1])?;
                            let diff = g.sub(t, mask_tok)?;
                            let scaled = g.mul(diff, pm)?;
                            g.add(scaled, mask_tok)?
                        }
                        None => {
                            let zeros = g.constant(Tensor::zeros(&[b, l, d]));
                            g.add(zeros, mask_tok)?
                        }
                    }
                }
                (None, None) => unreachable!("all-open gates always tokenize"),
            };
            blocks.push(block);
        }
        let mut h = g.concat(&blocks, 1)?;
        let n = m_count * l;

        let dropout = if rng.is_some() { self.spec.model.dropout } else { 0.0 };
        let mut ctx = BlockCtx {
            heads: self.spec.model.heads,
            dropout,
            rng,
        };

        if switches.fusion && m_count > 1 {
            // Each token attends to every token of the other modalities.
            let mask = AttentionMask::from_fn(n, n, |q, k| q / l == k / l);
            h = transformer_block(g, p, "fuse", h, Some(&mask), &mut ctx)?;
        }

        let pe = g.constant(sinusoidal_encoding(n, d));
        h = g.add(h, pe)?;

        if switches.context && self.spec.model.history > 0 {
            if !memory.is_empty() {
                let parts: Vec<Var> = memory
                    .entries()
                    .copied()
                    .collect::<Vec<_>>()
                    .into_iter()
                    .map(|v| g.reshape(v, &[b, 1, d]))
                    .collect::<std::result::Result<_, _>>()?;
                let mem = g.concat(&parts, 1)?;
                let q = layer_norm(g, p, "ctx.ln", h)?;
                let kv = layer_norm(g, p, "ctx.ln_mem", mem)?;
                let a = multi_head_attention(g, p, "ctx.att", q, kv, self.spec.model.heads, None)?;
                h = g.add(h, a)?;
            }
            let pooled = g.mean(h, 1)?;
            memory.push(pooled);
        }

        let cls = g.param(p, "cls")?;
        let zeros = g.constant(Tensor::zeros(&[b, 1, d]));
        let cls = g.add(zeros, cls)?;
        let mut x = g.concat(&[cls, h], 1)?;
        for i in 0..self.spec.model.layers {
            x = transformer_block(g, p, &format!("blk.{i}"), x, None, &mut ctx)?;
        }
        let x = layer_norm(g, p, "ln_f", x)?;
        let h_cls = g.slice(x, 1, 0, 1)?;
        let h_cls = g.reshape(h_cls, &[b, d])?;
        let repr = g.slice(x, 1, 1, n + 1)?;
        let logits = linear(g, p, "head", h_cls)?;
        let features = amc::aggregate_features(g, repr, m_count)?;
        let gate_logits = if switches.amc {
            Some(amc::gate_logits(g, p, features)?)
        } else {
            None
        };
        Ok(WindowOutput {
            logits,
            repr,
            h_cls,
            features,
            gate_logits,
            trace: WindowTrace {
                gates: trace_gates,
                patches: trace_patches,
            },
        })
    }

    /// Adapt the model to streams decimated by `factor`. Each tokenizer tap
    /// group of `factor` samples is folded into one tap, which equals
    /// applying the original tokenizer to a zero-order-hold upsampling of
    /// the decimated patch.
    pub fn resampled(&self, factor: usize) -> Result<Model> {
        if factor == 0 {
            return Err(AmiError::Invalid("decimation factor must be >= 1".into()));
        }
        let mut out = self.clone();
        for (i, ms) in out.spec.modalities.iter_mut().enumerate() {
            if ms.patch_size % factor != 0 {
                return Err(AmiError::Invalid(format!(
                    "modality `{}`: patch size {} is not divisible by decimation factor {factor}",
                    ms.name, ms.patch_size
                )));
            }
            let name = format!("tok.{i}.w");
            let w = self.params.require(&name)?;
            let (d, c, p) = (w.shape()[0], w.shape()[1], w.shape()[2]);
            let np = p / factor;
            let folded = Tensor::from_fn(&[d, c, np], |ix| {
                let (dc, j) = (ix / np, ix % np);
                (0..factor).map(|r| w.data()[dc * p + j * factor + r]).sum()
            });
            out.params.insert(name, folded);
            ms.patch_size = np;
            ms.rate_hz /= factor as f64;
        }
        out.spec.validate()?;
        Ok(out)
    }

    /// `MLP(h)` forecasting the next window's class embedding.
    pub fn predict_next(&self, g: &mut Graph, h_cls: Var) -> Result<Var> {
        let h = linear(g, &self.params, "pred.h", h_cls)?;
        let h = g.gelu(h);
        linear(g, &self.params, "pred.o", h)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn toy_spec(m: usize, d: usize, l: usize) -> ModelSpec {
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

    #[test]
    fn inverse_softplus_round_trips() {
        for y in [0.01, 0.1, 1.0, 5.0] {
            let x = inverse_softplus(y);
            assert!(((1.0 + f64::exp(x)).ln() - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_patch_counts_are_rejected() {
        let mut spec = toy_spec(2, 8, 4);
        spec.modalities[1].patch_size = 4;
        assert!(matches!(Model::new(spec, 0), Err(AmiError::Config { .. })));
    }

    #[test]
    fn unknown_switch_is_an_error() {
        assert!(Switches::default().without("gating").is_err());
        assert!(!Switches::default().without("amc").unwrap().amc);
    }

    #[test]
    fn memory_evicts_oldest() {
        let mut g = Graph::new();
        let mut mem = HistoryMemory::new(2);
        let vars: Vec<Var> = (0..3).map(|i| g.scalar(i as f64)).collect();
        for &v in &vars {
            mem.push(v);
        }
        let kept: Vec<Var> = mem.entries().copied().collect();
        assert_eq!(kept, vec![vars[1], vars[2]]);
        let mut none = HistoryMemory::new(0);
        none.push(vars[0]);
        assert!(none.is_empty());
    }
}
