//! AdamW with a cosine learning-rate schedule and global-norm clipping.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ami_tensor::{ParamSet, Tensor};

/// Learning rate after `step` of `total` steps, decaying from `base` to 0.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (PI * progress).cos())
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One decoupled-weight-decay update. Parameters without a gradient
    /// entry are treated as having zero gradient.
    pub fn update(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.update_with(params, grads, |_| lr);
    }

    /// Like [`AdamW::update`] with a per-parameter learning rate.
    pub fn update_with(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>, lr_for: impl Fn(&str) -> f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let g = grads.get(name);
            let lr = lr_for(name);
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * pd[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_midpoint() {
        assert_eq!(cosine_lr(1e-4, 0, 10), 1e-4);
        assert!((cosine_lr(1e-4, 5, 10) - 5e-5).abs() < 1e-20);
        assert!(cosine_lr(1e-4, 10, 10).abs() < 1e-20);
    }

    #[test]
    fn zero_gradient_without_decay_keeps_parameters() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(vec![1.5, -2.0]));
        let before = p.clone();
        let mut opt = AdamW::new(0.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(&[2]));
        opt.update(&mut p, &grads, 0.1);
        assert_eq!(p, before);
    }

    #[test]
    fn step_on_quadratic_bowl_reduces_loss() {
        // f(w) = (w - 3)^2
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(vec![0.0]));
        let mut opt = AdamW::new(0.0);
        let f = |w: f64| (w - 3.0) * (w - 3.0);
        let w0 = p.get("w").unwrap().data()[0];
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(vec![2.0 * (w0 - 3.0)]));
        opt.update(&mut p, &grads, 0.1);
        assert!(f(p.get("w").unwrap().data()[0]) < f(w0));
    }

    #[test]
    fn clipping_caps_norm() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::from_vec(vec![3.0]));
        grads.insert("b".to_string(), Tensor::from_vec(vec![4.0]));
        let norm = clip_global_norm(&mut grads, 1.0);
        assert_eq!(norm, 5.0);
        assert!((grads["a"].data()[0] - 0.6).abs() < 1e-15);
        assert!((grads["b"].data()[0] - 0.8).abs() < 1e-15);
    }
}
