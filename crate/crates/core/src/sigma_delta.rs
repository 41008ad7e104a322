//! Patch-wise Sigma-Delta sensing.
//!
//! A window `[C, T]` is cut into `L = T / P` patches. Each patch is compared
//! with a baseline; when the mean absolute change falls below the threshold
//! the patch is skipped (for at most `k_skip` patches in a row) and its token
//! repeats the previous one. Emitted deltas are embedded by a linear
//! tokenizer and accumulated, so with every patch active the accumulated
//! tokens equal the tokenizer applied to the raw patches.
//!
//! The baseline of the encoder in [`encode_window`] is the last *emitted*
//! patch, so skipped changes are folded into the next emitted delta and the
//! accumulated token always tracks the most recently read patch. The pure
//! [`patch_delta`] uses the consecutive-patch baseline; both coincide when
//! every patch is active.

use ami_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{AmiError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SigmaDeltaParams {
    pub enabled: bool,
    /// Initial (or frozen) threshold on normalized activity.
    pub theta: f64,
    pub k_skip: usize,
    pub learn_thresholds: bool,
    /// Temperature of the threshold surrogate.
    pub tau_theta: f64,
}

impl Default for SigmaDeltaParams {
    fn default() -> Self {
        Self {
            enabled: true,
            theta: 0.1,
            k_skip: 2,
            learn_thresholds: false,
            tau_theta: 0.1,
        }
    }
}

impl SigmaDeltaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta >= 0.0) {
            return Err(AmiError::config("sensing.theta", "must be >= 0"));
        }
        if !(self.tau_theta > 0.0) {
            return Err(AmiError::config("sensing.tau_theta", "must be > 0"));
        }
        if self.learn_thresholds && self.theta == 0.0 {
            return Err(AmiError::config(
                "sensing.theta",
                "learnable thresholds need a positive initial value (softplus range)",
            ));
        }
        Ok(())
    }
}

/// Patches of one modality window: `[C, L, P]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSeries {
    pub modality: usize,
    pub patches: Tensor,
}

impl PatchSeries {
    pub fn num_patches(&self) -> usize {
        self.patches.shape()[1]
    }

    /// Back to the `[C, T]` window.
    pub fn flatten(&self) -> Tensor {
        let s = self.patches.shape();
        self.patches.reshape(&[s[0], s[1] * s[2]]).expect("same length")
    }
}

/// Per-window skip decisions for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivityMask {
    pub active: Vec<bool>,
    pub activity: Vec<f64>,
}

impl ActivityMask {
    pub fn all_active(len: usize) -> Self {
        Self {
            active: vec![true; len],
            activity: vec![f64::INFINITY; len],
        }
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    /// Fraction of patches that were read and tokenized.
    pub fn sensing_rate(&self) -> f64 {
        if self.active.is_empty() {
            0.0
        } else {
            self.active_count() as f64 / self.active.len() as f64
        }
    }
}

/// Work done by the tokenizer for one window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenStats {
    pub invocations: usize,
}

/// Cut a `[C, T]` window into `[C, T/P, P]` patches.
pub fn partition_patches(window: &Tensor, modality: usize, name: &str, patch: usize) -> Result<PatchSeries> {
    let (c, t) = (window.shape()[0], window.shape()[1]);
    if patch == 0 || t % patch != 0 {
        return Err(AmiError::PatchPartition {
            modality: name.to_string(),
            samples: t,
            patch,
        });
    }
    Ok(PatchSeries {
        modality,
        patches: window.reshape(&[c, t / patch, patch])?,
    })
}

/// Consecutive patch differences with a zero baseline for the first patch.
pub fn patch_delta(patches: &Tensor) -> Tensor {
    let s = patches.shape();
    let (c, l, p) = (s[0], s[1], s[2]);
    let x = patches.data();
    Tensor::from_fn(s, |i| {
        let li = (i / p) % l;
        if li == 0 {
            x[i]
        } else {
            x[i] - x[i - p]
        }
    })
    .reshape(&[c, l, p])
    .expect("same shape")
}

/// `a_l = mean |Δx_l|` over channels and samples of each patch.
pub fn activity_score(delta: &Tensor) -> Vec<f64> {
    let s = delta.shape();
    let (c, l, p) = (s[0], s[1], s[2]);
    let d = delta.data();
    (0..l)
        .map(|li| {
            let mut total = 0.0;
            for ci in 0..c {
                let start = (ci * l + li) * p;
                total += d[start..start + p].iter().map(|v| v.abs()).sum::<f64>();
            }
            total / (c * p) as f64
        })
        .collect()
}

/// Skip patch `l` when `a_l < θ` and fewer than `k_skip` patches in a row have
/// been skipped. The first patch is always active.
pub fn skip_policy(activity: &[f64], theta: f64, k_skip: usize) -> ActivityMask {
    let mut run = 0;
    let active = activity
        .iter()
        .enumerate()
        .map(|(l, &a)| {
            let skip = l > 0 && a < theta && run < k_skip;
            if skip {
                run += 1;
            } else {
                run = 0;
            }
            !skip
        })
        .collect();
    ActivityMask {
        active,
        activity: activity.to_vec(),
    }
}

/// Held-baseline encoder: returns the emitted deltas `[C, L, P]` (zero for
/// skipped patches) and the skip decisions.
pub fn encode_window(patches: &Tensor, theta: f64, k_skip: usize) -> (Tensor, ActivityMask) {
    let s = patches.shape();
    let (c, l, p) = (s[0], s[1], s[2]);
    let x = patches.data();
    let mut baseline = vec![0.0; c * p];
    let mut emitted = vec![0.0; c * l * p];
    let mut active = Vec::with_capacity(l);
    let mut activity = Vec::with_capacity(l);
    let mut run = 0;
    let mut delta = vec![0.0; c * p];
    for li in 0..l {
        let mut total = 0.0;
        for ci in 0..c {
            for pi in 0..p {
                let v = x[(ci * l + li) * p + pi] - baseline[ci * p + pi];
                delta[ci * p + pi] = v;
                total += v.abs();
            }
        }
        let a = total / (c * p) as f64;
        let skip = li > 0 && a < theta && run < k_skip;
        if skip {
            run += 1;
        } else {
            run = 0;
            for ci in 0..c {
                for pi in 0..p {
                    emitted[(ci * l + li) * p + pi] = delta[ci * p + pi];
                    baseline[ci * p + pi] = x[(ci * l + li) * p + pi];
                }
            }
        }
        active.push(!skip);
        activity.push(a);
    }
    (
        Tensor::new(vec![c, l, p], emitted).expect("shape"),
        ActivityMask { active, activity },
    )
}

/// Embed active deltas with a linear tokenizer `[D, C, P]` and accumulate;
/// skipped patches reuse the running token without calling the tokenizer.
pub fn tokenize_with_reuse(delta: &Tensor, mask: &ActivityMask, weight: &Tensor) -> (Tensor, TokenStats) {
    let s = delta.shape();
    let (c, l, p) = (s[0], s[1], s[2]);
    let d = weight.shape()[0];
    let w = weight.data();
    let x = delta.data();
    let mut running = vec![0.0; d];
    let mut out = Vec::with_capacity(l * d);
    let mut invocations = 0;
    for li in 0..l {
        if mask.active[li] {
            invocations += 1;
            for (di, r) in running.iter_mut().enumerate() {
                let mut e = 0.0;
                for ci in 0..c {
                    for pi in 0..p {
                        e += w[(di * c + ci) * p + pi] * x[(ci * l + li) * p + pi];
                    }
                }
                *r += e;
            }
        }
        out.extend_from_slice(&running);
    }
    (
        Tensor::new(vec![l, d], out).expect("shape"),
        TokenStats { invocations },
    )
}

/// Threshold source for the in-graph encoder.
#[derive(Clone, Copy, Debug)]
pub enum Threshold {
    Fixed(f64),
    /// A trainable `[1]` node holding the (already non-negative) threshold.
    Learned(Var),
}

/// Output of [`sigma_delta_tokens`].
pub struct EncodedTokens {
    /// `[B, L, D]`
    pub tokens: Var,
    pub masks: Vec<ActivityMask>,
}

/// Batched Sigma-Delta tokenization on the tape. `x` is `[B, C, T]`, the
/// tokenizer weight `[D, C, P]`. With a learned threshold the skip decision
/// of each non-forced patch is a straight-through gate whose backward pass
/// follows `σ((a_l − θ) / τ_θ)`.
pub fn sigma_delta_tokens(
    g: &mut Graph,
    x: &Tensor,
    weight: Var,
    patch: usize,
    threshold: Threshold,
    k_skip: usize,
    tau_theta: f64,
) -> Result<EncodedTokens> {
    let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if patch == 0 || t % patch != 0 {
        return Err(AmiError::PatchPartition {
            modality: format!("input of {c} channels"),
            samples: t,
            patch,
        });
    }
    let l = t / patch;
    let theta = match threshold {
        Threshold::Fixed(v) => v,
        Threshold::Learned(var) => g.value(var).data()[0],
    };
    let per = c * t;
    let mut emitted = Vec::with_capacity(b * per);
    let mut raw_delta = Vec::with_capacity(b * per);
    let mut masks = Vec::with_capacity(b);
    for bi in 0..b {
        let window = Tensor::new(vec![c, l, patch], x.data()[bi * per..(bi + 1) * per].to_vec())?;
        let (em, mask) = encode_window(&window, theta, k_skip);
        // Raw held-baseline deltas for every patch (also skipped ones) so a
        // learned threshold sees what emitting would have contributed.
        let mut full = em.data().to_vec();
        let xd = window.data();
        for li in 1..l {
            if !mask.active[li] {
                for ci in 0..c {
                    let start = (ci * l + li) * patch;
                    // Find the held baseline: the most recent active patch.
                    let held = (0..li).rev().find(|&k| mask.active[k]).expect("patch 0 active");
                    let hstart = (ci * l + held) * patch;
                    for pi in 0..patch {
                        full[start + pi] = xd[start + pi] - xd[hstart + pi];
                    }
                }
            }
        }
        emitted.extend_from_slice(em.data());
        raw_delta.extend(full);
        masks.push(mask);
    }

    let deltas = match threshold {
        Threshold::Fixed(_) => g.constant(Tensor::new(vec![b, c, t], emitted)?),
        Threshold::Learned(theta_var) => {
            // forced[b, l] = 1 where the decision did not depend on θ.
            let mut forced = vec![0.0; b * l];
            let mut hard = vec![0.0; b * l];
            let mut act = vec![0.0; b * l];
            for (bi, mask) in masks.iter().enumerate() {
                let mut run = 0;
                for li in 0..l {
                    let i = bi * l + li;
                    act[i] = mask.activity[li];
                    hard[i] = f64::from(u8::from(mask.active[li]));
                    if li == 0 || run >= k_skip {
                        forced[i] = 1.0;
                    }
                    if mask.active[li] {
                        run = 0;
                    } else {
                        run += 1;
                    }
                }
            }
            let a = g.constant(Tensor::new(vec![b, 1, l, 1], act)?);
            let diff = g.sub(a, theta_var)?;
            let z = g.scale(diff, 1.0 / tau_theta);
            let soft = g.sigmoid(z);
            let st = g.straight_through(soft, Tensor::new(vec![b, 1, l, 1], hard)?)?;
            let free = g.constant(Tensor::new(vec![b, 1, l, 1], forced.iter().map(|f| 1.0 - f).collect())?);
            let forced = g.constant(Tensor::new(vec![b, 1, l, 1], forced)?);
            let gated = g.mul(st, free)?;
            let gate = g.add(gated, forced)?;
            let raw = g.constant(Tensor::new(vec![b, c, l, patch], raw_delta)?);
            let d = g.mul(raw, gate)?;
            g.reshape(d, &[b, c, t])?
        }
    };
    let e = g.conv1d_patch(deltas, weight)?;
    let tokens = g.cumsum(e, 1)?;
    Ok(EncodedTokens { tokens, masks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn partition_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = Tensor::randn(&[3, 100], &mut rng);
        let s = partition_patches(&w, 0, "acc", 10).unwrap();
        assert_eq!(s.num_patches(), 10);
        assert_eq!(s.flatten(), w);
        let single = partition_patches(&w, 0, "acc", 100).unwrap();
        assert_eq!(single.patches.data(), w.data());
        match partition_patches(&w, 0, "acc", 7) {
            Err(AmiError::PatchPartition { modality, samples, patch }) => {
                assert_eq!((modality.as_str(), samples, patch), ("acc", 100, 7));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn delta_of_constant_and_ramp() {
        let constant = Tensor::full(&[1, 4, 2], 3.0);
        let d = patch_delta(&constant);
        assert_eq!(d.data(), &[3.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let ramp = Tensor::from_fn(&[2, 5, 3], |i| ((i / 3) % 5) as f64 + 1.0);
        let d = patch_delta(&ramp);
        for ci in 0..2 {
            for li in 1..5 {
                for pi in 0..3 {
                    assert_eq!(d.at(&[ci, li, pi]), 1.0);
                }
            }
        }
    }

    #[test]
    fn activity_examples() {
        assert_eq!(activity_score(&Tensor::zeros(&[2, 3, 4])), vec![0.0; 3]);
        assert_eq!(activity_score(&t(&[1, 1, 2], &[3.0, -1.0])), vec![2.0]);
    }

    #[test]
    fn skip_policy_examples() {
        let a = [5.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(skip_policy(&a, 0.0, 2).active, vec![true; 5]);
        assert_eq!(skip_policy(&a, 0.1, 2).active, vec![true, false, false, true, false]);
        let inf = skip_policy(&[1.0; 7], f64::INFINITY, 2);
        assert_eq!(inf.active, vec![true, false, false, true, false, false, true]);
    }

    #[test]
    fn skipped_tail_repeats_first_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let delta = Tensor::randn(&[2, 4, 3], &mut rng);
        let w = Tensor::randn(&[5, 2, 3], &mut rng);
        let mask = ActivityMask {
            active: vec![true, false, false, false],
            activity: vec![0.0; 4],
        };
        let (tokens, stats) = tokenize_with_reuse(&delta, &mask, &w);
        assert_eq!(stats.invocations, 1);
        for li in 1..4 {
            assert_eq!(&tokens.data()[li * 5..(li + 1) * 5], &tokens.data()[..5]);
        }
    }

    #[test]
    fn held_baseline_folds_skipped_change_into_next_delta() {
        // Patches: 0, 0.05, 0.05, 1.0 with θ = 0.1 and k_skip = 5.
        let x = t(&[1, 4, 1], &[0.0, 0.05, 0.05, 1.0]);
        let (em, mask) = encode_window(&x, 0.1, 5);
        assert_eq!(mask.active, vec![true, false, false, true]);
        assert_eq!(em.data(), &[0.0, 0.0, 0.0, 1.0]);
        let cum: Vec<f64> = em.data().iter().scan(0.0, |s, v| { *s += v; Some(*s) }).collect();
        assert_eq!(cum[3], 1.0);
    }

    #[test]
    fn learned_threshold_surrogate_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[2, 2, 12], &mut rng).map(|v| 0.2 * v);
        let w = Tensor::randn(&[3, 2, 3], &mut rng);
        let probe = Tensor::randn(&[2, 4, 3], &mut rng);
        let theta0 = 0.15;
        let loss_of = |g: &mut Graph, theta: Var| -> Result<Var> {
            let wv = g.constant(w.clone());
            let enc = sigma_delta_tokens(g, &x, wv, 3, Threshold::Learned(theta), 1, 0.1)?;
            let p = g.constant(probe.clone());
            let prod = g.mul(enc.tokens, p)?;
            Ok(g.sum_all(prod)?)
        };
        let mut g = Graph::new();
        let theta = g.leaf(Tensor::from_vec(vec![theta0]), true);
        let loss = loss_of(&mut g, theta).unwrap();
        let analytic = g.backward(loss).unwrap().get(theta).unwrap().data()[0];

        // Oracle: the same loss with hard gates replaced by the surrogate
        // itself, differentiated numerically.
        let surrogate_loss = |th: f64| -> f64 {
            let mut total = 0.0;
            for bi in 0..2 {
                let window = Tensor::new(vec![2, 4, 3], x.data()[bi * 24..(bi + 1) * 24].to_vec()).unwrap();
                let (_, mask) = encode_window(&window, theta0, 1);
                let mut run = 0;
                let mut running = [0.0; 3];
                let mut held = 0;
                for li in 0..4 {
                    let forced = li == 0 || run >= 1;
                    let gate = if forced {
                        1.0
                    } else {
                        1.0 / (1.0 + (-(mask.activity[li] - th) / 0.1).exp())
                    };
                    let wd = w.data();
                    for (di, r) in running.iter_mut().enumerate() {
                        let mut e = 0.0;
                        for ci in 0..2 {
                            for pi in 0..3 {
                                let cur = window.at(&[ci, li, pi]);
                                let base = if li == 0 { 0.0 } else { window.at(&[ci, held, pi]) };
                                e += wd[(di * 2 + ci) * 3 + pi] * (cur - base);
                            }
                        }
                        *r += gate * e;
                    }
                    for (di, r) in running.iter().enumerate() {
                        total += r * probe.at(&[bi, li, di]);
                    }
                    if mask.active[li] {
                        run = 0;
                        held = li;
                    } else {
                        run += 1;
                    }
                }
            }
            total
        };
        let eps = 1e-6;
        let numeric = (surrogate_loss(theta0 + eps) - surrogate_loss(theta0 - eps)) / (2.0 * eps);
        assert!(analytic != 0.0);
        let rel = (analytic - numeric).abs() / (analytic.abs() + 1e-8);
        assert!(rel <= 1e-4, "analytic {analytic} numeric {numeric}");
    }

    #[test]
    fn surrogate_centre_and_limit() {
        let sig = |a: f64, th: f64, tau: f64| 1.0 / (1.0 + (-(a - th) / tau).exp());
        assert_eq!(sig(0.3, 0.3, 0.1), 0.5);
        let slope = |tau: f64| sig(0.35, 0.3, tau) * (1.0 - sig(0.35, 0.3, tau)) / tau;
        assert!(slope(1e-4) < 1e-100);
    }

    proptest! {
        #[test]
        fn sigma_of_delta_reproduces_patches(seed in 0u64..1000, c in 1usize..4, l in 1usize..8, p in 1usize..6) {
            let x = Tensor::randn(&[c, l, p], &mut ChaCha8Rng::seed_from_u64(seed));
            let d = patch_delta(&x);
            for ci in 0..c {
                for pi in 0..p {
                    let mut acc = 0.0;
                    for li in 0..l {
                        acc += d.at(&[ci, li, pi]);
                        prop_assert!((acc - x.at(&[ci, li, pi])).abs() <= 1e-12);
                    }
                }
            }
        }

        #[test]
        fn activity_matches_mean_abs(seed in 0u64..1000) {
            let d = Tensor::randn(&[3, 5, 4], &mut ChaCha8Rng::seed_from_u64(seed));
            let a = activity_score(&d);
            for li in 0..5 {
                let mut s = 0.0;
                for ci in 0..3 { for pi in 0..4 { s += d.at(&[ci, li, pi]).abs(); } }
                prop_assert!((a[li] - s / 12.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn raising_theta_never_adds_active_patches(
            a in proptest::collection::vec(0.0f64..1.0, 1..40),
            lo in 0.0f64..1.0,
            bump in 0.0f64..1.0,
            k in 0usize..5,
        ) {
            let low = skip_policy(&a, lo, k).active_count();
            let high = skip_policy(&a, lo + bump, k).active_count();
            prop_assert!(high <= low);
        }

        #[test]
        fn held_encoder_skips_respect_horizon(seed in 0u64..500, k in 0usize..4, theta in 0.0f64..2.0) {
            let x = Tensor::randn(&[2, 12, 3], &mut ChaCha8Rng::seed_from_u64(seed));
            let (_, mask) = encode_window(&x, theta, k);
            prop_assert!(mask.active[0]);
            let mut run = 0;
            for &on in &mask.active {
                run = if on { 0 } else { run + 1 };
                prop_assert!(run <= k);
            }
        }

        #[test]
        fn reported_rate_is_active_fraction(a in proptest::collection::vec(0.0f64..1.0, 1..30), k in 0usize..4) {
            let m = skip_policy(&a, 0.5, k);
            prop_assert_eq!(m.sensing_rate(), m.active.iter().filter(|x| **x).count() as f64 / a.len() as f64);
        }
    }
}
