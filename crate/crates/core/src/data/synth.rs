//! Synthetic multimodal streams with a known informative modality subset.
//!
//! Informative modalities carry a class-dependent posture offset (a point on
//! a circle in the first two channels) plus a class-dependent oscillation.
//! Each window jitters the offset, so a single modality is ambiguous and
//! combining informative modalities or past windows helps. Uninformative
//! modalities draw offset and frequency at random, independent of the label.
//! Labels follow a sticky Markov chain within a sequence.

use std::f64::consts::PI;

use ami_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, LabeledWindow, ModalitySpec, ModalityWindow, Sequence};
use crate::error::{AmiError, Result};

/// Reference sensor power ranges (mW), cycled over synthetic modalities.
const SENSORS: [(&str, [f64; 2]); 4] = [
    ("imu", [0.3, 1.0]),
    ("ecg", [1.0, 5.0]),
    ("emg", [6.0, 15.0]),
    ("ppg", [4.0, 10.0]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub modalities: usize,
    pub channels: usize,
    pub rate_hz: f64,
    pub window_seconds: f64,
    pub patch_size: usize,
    pub num_classes: usize,
    /// `|S_k|`, informative modalities per class.
    pub informative_per_class: usize,
    /// When true every class uses modalities `0..|S_k|`; otherwise the subset
    /// rotates with the class index.
    pub shared_informative: bool,
    /// Probability that a patch repeats the previous clean patch.
    pub redundancy: f64,
    /// Per-sample white noise.
    pub noise_std: f64,
    /// Per-window jitter of the class offset.
    pub ambiguity: f64,
    /// Jitter multiplier applied per rank within a class's informative
    /// subset, so later members carry less information (1 = all equal).
    pub ambiguity_growth: f64,
    /// Radius of the class offset circle.
    pub separation: f64,
    pub amplitude: f64,
    /// Per-window probability of switching to another class.
    pub switch_prob: f64,
    pub sequences: usize,
    pub windows_per_sequence: usize,
    /// Number of distinct subject ids (0 disables subject tags).
    pub subjects: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            modalities: 6,
            channels: 2,
            rate_hz: 20.0,
            window_seconds: 2.0,
            patch_size: 10,
            num_classes: 4,
            informative_per_class: 2,
            shared_informative: true,
            redundancy: 0.5,
            noise_std: 0.03,
            ambiguity: 0.6,
            ambiguity_growth: 1.0,
            separation: 1.5,
            amplitude: 0.5,
            switch_prob: 0.1,
            sequences: 240,
            windows_per_sequence: 10,
            subjects: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(AmiError::config(format!("synthetic.{field}"), reason));
        if self.modalities == 0 {
            return bad("modalities", "must be >= 1");
        }
        if self.channels == 0 {
            return bad("channels", "must be >= 1");
        }
        if self.num_classes < 2 {
            return bad("num_classes", "must be >= 2");
        }
        if self.informative_per_class == 0 || self.informative_per_class > self.modalities {
            return bad("informative_per_class", "must be in 1..=modalities");
        }
        if !(0.0..=1.0).contains(&self.redundancy) {
            return bad("redundancy", "must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.switch_prob) {
            return bad("switch_prob", "must be in [0, 1]");
        }
        if !(self.ambiguity_growth > 0.0) {
            return bad("ambiguity_growth", "must be > 0");
        }
        if self.noise_std < 0.0 || self.ambiguity < 0.0 {
            return bad("noise_std", "noise scales must be non-negative");
        }
        if self.rate_hz <= 0.0 || self.window_seconds <= 0.0 {
            return bad("rate_hz", "rate and window length must be positive");
        }
        if self.windows_per_sequence == 0 {
            return bad("windows_per_sequence", "must be >= 1");
        }
        Ok(())
    }

    pub fn window_samples(&self) -> usize {
        (self.window_seconds * self.rate_hz).round() as usize
    }

    /// Informative modality subset `S_k` for class `k`.
    pub fn informative_subset(&self, class: usize) -> Vec<usize> {
        let start = if self.shared_informative { 0 } else { class };
        (0..self.informative_per_class)
            .map(|i| (start + i) % self.modalities)
            .collect()
    }

    pub fn modality_specs(&self) -> Vec<ModalitySpec> {
        (0..self.modalities)
            .map(|m| {
                let (kind, power) = SENSORS[m % SENSORS.len()];
                let round = m / SENSORS.len();
                ModalitySpec {
                    name: if round == 0 {
                        kind.to_string()
                    } else {
                        format!("{kind}{}", round + 1)
                    },
                    channels: self.channels,
                    rate_hz: self.rate_hz,
                    patch_size: self.patch_size,
                    power_mw: power,
                }
            })
            .collect()
    }

    /// Class offset of modality `m` for class `k`, per channel.
    fn prototype(&self, class: usize, modality: usize) -> Vec<f64> {
        let k = self.num_classes as f64;
        let mut out = vec![0.0; self.channels];
        if self.channels == 1 {
            out[0] = self.separation * (2.0 * class as f64 / (k - 1.0) - 1.0);
        } else {
            let angle = 2.0 * PI * class as f64 / k + 0.7 * modality as f64;
            out[0] = self.separation * angle.cos();
            out[1] = self.separation * angle.sin();
        }
        out
    }

    fn frequency(&self, class: usize, modality: usize) -> f64 {
        0.5 + 0.25 * ((class + modality) % self.num_classes) as f64
    }
}

/// Generate labelled sequences. Fixed `seed` gives an identical dataset.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = cfg.window_samples();
    let p = cfg.patch_size.max(1);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let specs = cfg.modality_specs();

    let mut sequences = Vec::with_capacity(cfg.sequences);
    for s in 0..cfg.sequences {
        let mut label = s % cfg.num_classes;
        let phases: Vec<f64> = (0..cfg.modalities * cfg.channels)
            .map(|_| rng.random_range(0.0..2.0 * PI))
            .collect();
        let mut windows = Vec::with_capacity(cfg.windows_per_sequence);
        for w in 0..cfg.windows_per_sequence {
            if w > 0 && rng.random::<f64>() < cfg.switch_prob {
                label = (label + rng.random_range(1..cfg.num_classes)) % cfg.num_classes;
            }
            let subset = cfg.informative_subset(label);
            let mut modalities = Vec::with_capacity(cfg.modalities);
            for m in 0..cfg.modalities {
                let rank = subset.iter().position(|&i| i == m);
                let (offset, freq): (Vec<f64>, f64) = if let Some(r) = rank {
                    let proto = cfg.prototype(label, m);
                    let jitter = cfg.ambiguity * cfg.ambiguity_growth.powi(r as i32);
                    (
                        proto
                            .iter()
                            .map(|mu| mu + jitter * unit.sample(&mut rng))
                            .collect(),
                        cfg.frequency(label, m),
                    )
                } else {
                    (
                        (0..cfg.channels)
                            .map(|_| cfg.separation * unit.sample(&mut rng) / 2f64.sqrt())
                            .collect(),
                        rng.random_range(0.5..0.5 + 0.25 * cfg.num_classes as f64),
                    )
                };
                // Which patches repeat their predecessor.
                let repeat: Vec<bool> = (0..t_len.div_ceil(p))
                    .map(|l| l > 0 && rng.random::<f64>() < cfg.redundancy)
                    .collect();
                let mut data = vec![0.0; cfg.channels * t_len];
                for c in 0..cfg.channels {
                    let phase = phases[m * cfg.channels + c];
                    let row = &mut data[c * t_len..(c + 1) * t_len];
                    for t in 0..t_len {
                        let l = t / p;
                        row[t] = if repeat[l] {
                            row[t - p]
                        } else {
                            let time = (w * t_len + t) as f64 / cfg.rate_hz;
                            offset[c] + cfg.amplitude * (2.0 * PI * freq * time + phase).sin()
                        };
                    }
                }
                // Noise goes on after the clean signal is fixed so that
                // repeated patches differ only by fresh noise.
                for x in &mut data {
                    *x += cfg.noise_std * unit.sample(&mut rng);
                }
                modalities.push(ModalityWindow {
                    modality: m,
                    data: Tensor::new(vec![cfg.channels, t_len], data).expect("window shape"),
                    rate_hz: cfg.rate_hz,
                });
            }
            windows.push(LabeledWindow { modalities, label });
        }
        sequences.push(Sequence {
            subject: (cfg.subjects > 0).then(|| format!("subject{}", s % cfg.subjects)),
            windows,
        });
    }

    let dataset = Dataset {
        modalities: specs,
        num_classes: cfg.num_classes,
        window_seconds: cfg.window_seconds,
        sequences,
        informative: (0..cfg.num_classes).map(|k| cfg.informative_subset(k)).collect(),
    };
    dataset.validate()?;
    Ok(dataset)
}
