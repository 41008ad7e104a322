//! Multimodal window datasets: types, splitting, normalization and batching.

mod cache;
mod delimited;
mod segment;
mod synth;

pub use cache::{load_dataset, save_dataset};
pub use delimited::{load_delimited, ColumnMap, DelimitedConfig};
pub use segment::{decimate, majority_label, window_segment, Segment};
pub use synth::{synth_generate, SynthConfig};

use ami_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AmiError, Result};

/// Static description of one sensor stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    pub channels: usize,
    pub rate_hz: f64,
    pub patch_size: usize,
    /// Nominal sensor power range `[min, max]` in mW.
    pub power_mw: [f64; 2],
}

impl ModalitySpec {
    pub fn window_samples(&self, window_seconds: f64) -> usize {
        (window_seconds * self.rate_hz).round() as usize
    }
}

/// One window of one modality: `data` is `[channels, samples]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityWindow {
    pub modality: usize,
    pub data: Tensor,
    pub rate_hz: f64,
}

impl ModalityWindow {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn samples(&self) -> usize {
        self.data.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledWindow {
    pub modalities: Vec<ModalityWindow>,
    pub label: usize,
}

/// Temporally contiguous windows from one recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub subject: Option<String>,
    pub windows: Vec<LabeledWindow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub modalities: Vec<ModalitySpec>,
    pub num_classes: usize,
    pub window_seconds: f64,
    pub sequences: Vec<Sequence>,
    /// Informative modality subset per class, when known (synthetic data).
    pub informative: Vec<Vec<usize>>,
}

/// Stacked inputs for one time step of a batch of sequences. Each modality
/// tensor is `[B, C_m, T_m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub modalities: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl WindowBatch {
    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Per-channel affine normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn num_windows(&self) -> usize {
        self.sequences.iter().map(|s| s.windows.len()).sum()
    }

    pub fn windows(&self) -> impl Iterator<Item = &LabeledWindow> {
        self.sequences.iter().flat_map(|s| s.windows.iter())
    }

    /// `|∪_k S_k|`, the number of modalities that carry label information.
    pub fn informative_union(&self) -> usize {
        let mut all: Vec<usize> = self.informative.iter().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for w in self.windows() {
            counts[w.label] += 1;
        }
        counts
    }

    fn with_sequences(&self, sequences: Vec<Sequence>) -> Dataset {
        Dataset {
            modalities: self.modalities.clone(),
            num_classes: self.num_classes,
            window_seconds: self.window_seconds,
            sequences,
            informative: self.informative.clone(),
        }
    }

    /// Check window lengths, channel counts, labels and patch divisibility.
    pub fn validate(&self) -> Result<()> {
        for spec in &self.modalities {
            let samples = spec.window_samples(self.window_seconds);
            if spec.patch_size == 0 || samples % spec.patch_size != 0 {
                return Err(AmiError::PatchPartition {
                    modality: spec.name.clone(),
                    samples,
                    patch: spec.patch_size,
                });
            }
        }
        for (si, seq) in self.sequences.iter().enumerate() {
            for (wi, w) in seq.windows.iter().enumerate() {
                if w.label >= self.num_classes {
                    return Err(AmiError::Data(format!(
                        "sequence {si} window {wi}: label {} out of range for {} classes",
                        w.label, self.num_classes
                    )));
                }
                if w.modalities.len() != self.modalities.len() {
                    return Err(AmiError::Data(format!(
                        "sequence {si} window {wi}: {} modalities, expected {}",
                        w.modalities.len(),
                        self.modalities.len()
                    )));
                }
                for (m, spec) in self.modalities.iter().enumerate() {
                    let mw = &w.modalities[m];
                    let expected = [spec.channels, spec.window_samples(self.window_seconds)];
                    if mw.data.shape() != expected {
                        return Err(AmiError::Data(format!(
                            "sequence {si} window {wi} modality `{}`: shape {:?}, expected {:?}",
                            spec.name,
                            mw.data.shape(),
                            expected
                        )));
                    }
                    if !mw.data.is_finite() {
                        return Err(AmiError::Data(format!(
                            "sequence {si} window {wi} modality `{}`: non-finite samples",
                            spec.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Subject-level 70/15/15 split when at least three subjects are known,
    /// otherwise a random split by sequence. Deterministic in `seed`.
    pub fn split(&self, seed: u64) -> Splits {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut subjects: Vec<&str> = self
            .sequences
            .iter()
            .filter_map(|s| s.subject.as_deref())
            .collect();
        subjects.sort_unstable();
        subjects.dedup();
        let by_subject = subjects.len() >= 3
            && self.sequences.iter().all(|s| s.subject.is_some());

        let (train, val, test) = if by_subject {
            subjects.shuffle(&mut rng);
            let (n_train, n_val) = split_counts(subjects.len());
            let bucket = |s: &Sequence| {
                let pos = subjects
                    .iter()
                    .position(|x| Some(*x) == s.subject.as_deref())
                    .expect("subject listed");
                if pos < n_train {
                    0
                } else if pos < n_train + n_val {
                    1
                } else {
                    2
                }
            };
            let mut parts = (Vec::new(), Vec::new(), Vec::new());
            for s in &self.sequences {
                match bucket(s) {
                    0 => parts.0.push(s.clone()),
                    1 => parts.1.push(s.clone()),
                    _ => parts.2.push(s.clone()),
                }
            }
            parts
        } else {
            let mut order: Vec<usize> = (0..self.sequences.len()).collect();
            order.shuffle(&mut rng);
            let (n_train, n_val) = split_counts(order.len());
            let pick = |ix: &[usize]| ix.iter().map(|&i| self.sequences[i].clone()).collect::<Vec<_>>();
            (
                pick(&order[..n_train]),
                pick(&order[n_train..n_train + n_val]),
                pick(&order[n_train + n_val..]),
            )
        };
        Splits {
            train: self.with_sequences(train),
            val: self.with_sequences(val),
            test: self.with_sequences(test),
        }
    }

    /// Per-channel mean and standard deviation over every sample.
    pub fn channel_stats(&self) -> ChannelStats {
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for (m, spec) in self.modalities.iter().enumerate() {
            let mut sums = vec![0.0; spec.channels];
            let mut sq = vec![0.0; spec.channels];
            let mut count = 0usize;
            for w in self.windows() {
                let d = &w.modalities[m].data;
                let t = d.shape()[1];
                for c in 0..spec.channels {
                    for &x in &d.data()[c * t..(c + 1) * t] {
                        sums[c] += x;
                    }
                }
                count += t;
            }
            let mu: Vec<f64> = sums.iter().map(|s| s / count.max(1) as f64).collect();
            for w in self.windows() {
                let d = &w.modalities[m].data;
                let t = d.shape()[1];
                for c in 0..spec.channels {
                    for &x in &d.data()[c * t..(c + 1) * t] {
                        sq[c] += (x - mu[c]) * (x - mu[c]);
                    }
                }
            }
            let sd = sq
                .iter()
                .map(|s| {
                    let v = (s / count.max(1) as f64).sqrt();
                    if v > 1e-12 {
                        v
                    } else {
                        1.0
                    }
                })
                .collect();
            mean.push(mu);
            std.push(sd);
        }
        ChannelStats { mean, std }
    }

    pub fn normalize(&mut self, stats: &ChannelStats) {
        for seq in &mut self.sequences {
            for w in &mut seq.windows {
                for (m, mw) in w.modalities.iter_mut().enumerate() {
                    let t = mw.data.shape()[1];
                    for (c, row) in mw.data.data_mut().chunks_mut(t).enumerate() {
                        let (mu, sd) = (stats.mean[m][c], stats.std[m][c]);
                        for x in row {
                            *x = (*x - mu) / sd;
                        }
                    }
                }
            }
        }
    }

    /// Keep every `factor`-th sample of every stream, shrinking patch sizes
    /// by the same factor so that each patch covers the same time span.
    pub fn decimated(&self, factor: usize) -> Result<Dataset> {
        if factor == 0 {
            return Err(AmiError::Invalid("decimation factor must be >= 1".into()));
        }
        let mut modalities = self.modalities.clone();
        for spec in &mut modalities {
            if spec.patch_size % factor != 0 {
                return Err(AmiError::Invalid(format!(
                    "modality `{}`: patch size {} is not divisible by decimation factor {factor}",
                    spec.name, spec.patch_size
                )));
            }
            spec.patch_size /= factor;
            spec.rate_hz /= factor as f64;
        }
        let sequences = self
            .sequences
            .iter()
            .map(|s| Sequence {
                subject: s.subject.clone(),
                windows: s
                    .windows
                    .iter()
                    .map(|w| LabeledWindow {
                        label: w.label,
                        modalities: w
                            .modalities
                            .iter()
                            .map(|mw| {
                                let c = mw.channels();
                                let t = mw.samples();
                                let rows: Vec<Vec<f64>> = mw
                                    .data
                                    .data()
                                    .chunks(t)
                                    .map(|row| decimate(row, factor))
                                    .collect();
                                let nt = rows[0].len();
                                ModalityWindow {
                                    modality: mw.modality,
                                    data: Tensor::new(vec![c, nt], rows.concat())
                                        .expect("decimated shape"),
                                    rate_hz: mw.rate_hz / factor as f64,
                                }
                            })
                            .collect(),
                    })
                    .collect(),
            })
            .collect();
        let out = Dataset {
            modalities,
            sequences,
            ..self.clone_meta()
        };
        out.validate()?;
        Ok(out)
    }

    fn clone_meta(&self) -> Dataset {
        self.with_sequences(Vec::new())
    }

    /// Group sequences of equal length into shuffled batches.
    pub fn batches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, s) in self.sequences.iter().enumerate() {
            if !s.windows.is_empty() {
                by_len.entry(s.windows.len()).or_default().push(i);
            }
        }
        let mut batches = Vec::new();
        for (_, mut ids) in by_len {
            ids.shuffle(rng);
            for chunk in ids.chunks(batch_size.max(1)) {
                batches.push(chunk.to_vec());
            }
        }
        batches.shuffle(rng);
        batches
    }

    /// Batches in storage order, for evaluation.
    pub fn ordered_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, s) in self.sequences.iter().enumerate() {
            if !s.windows.is_empty() {
                by_len.entry(s.windows.len()).or_default().push(i);
            }
        }
        by_len
            .into_values()
            .flat_map(|ids| ids.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect::<Vec<_>>())
            .collect()
    }

    /// Stack time step `t` of the given sequences.
    pub fn stack(&self, sequences: &[usize], t: usize) -> WindowBatch {
        let b = sequences.len();
        let modalities = (0..self.modalities.len())
            .map(|m| {
                let first = &self.sequences[sequences[0]].windows[t].modalities[m].data;
                let (c, len) = (first.shape()[0], first.shape()[1]);
                let mut data = Vec::with_capacity(b * c * len);
                for &s in sequences {
                    data.extend_from_slice(self.sequences[s].windows[t].modalities[m].data.data());
                }
                Tensor::new(vec![b, c, len], data).expect("stacked shape")
            })
            .collect();
        let labels = sequences
            .iter()
            .map(|&s| self.sequences[s].windows[t].label)
            .collect();
        WindowBatch { modalities, labels }
    }
}

fn split_counts(n: usize) -> (usize, usize) {
    let n_train = ((n as f64) * 0.70).round() as usize;
    let n_val = ((n as f64) * 0.15).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    (n_train, n_val)
}

/// Fit normalization on `train` and apply it to every split.
pub fn normalize_splits(splits: &mut Splits) -> ChannelStats {
    let stats = splits.train.channel_stats();
    splits.train.normalize(&stats);
    splits.val.normalize(&stats);
    splits.test.normalize(&stats);
    stats
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n_seq: usize, subject: impl Fn(usize) -> Option<String>) -> Dataset {
        let spec = ModalitySpec {
            name: "imu".into(),
            channels: 2,
            rate_hz: 10.0,
            patch_size: 5,
            power_mw: [0.3, 1.0],
        };
        let sequences = (0..n_seq)
            .map(|s| Sequence {
                subject: subject(s),
                windows: (0..3)
                    .map(|w| LabeledWindow {
                        label: (s + w) % 2,
                        modalities: vec![ModalityWindow {
                            modality: 0,
                            data: Tensor::from_fn(&[2, 10], |i| (s * 100 + w * 10 + i) as f64),
                            rate_hz: 10.0,
                        }],
                    })
                    .collect(),
            })
            .collect();
        Dataset {
            modalities: vec![spec],
            num_classes: 2,
            window_seconds: 1.0,
            sequences,
            informative: vec![],
        }
    }

    #[test]
    fn random_split_is_seeded_and_disjoint() {
        let d = toy(20, |_| None);
        let a = d.split(1);
        let b = d.split(1);
        assert_eq!(a.train.sequences, b.train.sequences);
        assert_eq!(a.train.sequences.len(), 14);
        assert_eq!(a.val.sequences.len(), 3);
        assert_eq!(a.test.sequences.len(), 3);
    }

    #[test]
    fn subject_split_keeps_subjects_together() {
        let d = toy(30, |s| Some(format!("subject{}", s % 6)));
        let sp = d.split(4);
        let subjects = |ds: &Dataset| {
            let mut v: Vec<String> = ds.sequences.iter().filter_map(|s| s.subject.clone()).collect();
            v.sort();
            v.dedup();
            v
        };
        let (tr, va, te) = (subjects(&sp.train), subjects(&sp.val), subjects(&sp.test));
        assert!(tr.iter().all(|s| !va.contains(s) && !te.contains(s)));
        assert!(va.iter().all(|s| !te.contains(s)));
        assert_eq!(tr.len() + va.len() + te.len(), 6);
    }

    #[test]
    fn normalization_uses_train_statistics_only() {
        let d = toy(20, |_| None);
        let mut sp = d.split(2);
        normalize_splits(&mut sp);
        let train_stats = sp.train.channel_stats();
        for c in 0..2 {
            assert!(train_stats.mean[0][c].abs() <= 1e-8);
            assert!((train_stats.std[0][c] - 1.0).abs() <= 1e-6);
        }
        let test_stats = sp.test.channel_stats();
        assert!(test_stats.mean[0].iter().any(|m| m.abs() > 1e-3));
    }

    #[test]
    fn stack_builds_batch_tensors() {
        let d = toy(4, |_| None);
        let b = d.stack(&[1, 3], 2);
        assert_eq!(b.modalities[0].shape(), &[2, 2, 10]);
        assert_eq!(b.labels, vec![1, 1]);
        assert_eq!(b.modalities[0].data()[0], 120.0);
    }

    #[test]
    fn validate_rejects_indivisible_patch() {
        let mut d = toy(2, |_| None);
        d.modalities[0].patch_size = 3;
        assert!(matches!(d.validate(), Err(AmiError::PatchPartition { .. })));
    }

    #[test]
    fn decimation_rescales_patch_and_rate() {
        let d = toy(2, |_| None);
        let half = d.decimated(5).unwrap();
        assert_eq!(half.modalities[0].patch_size, 1);
        assert_eq!(half.modalities[0].rate_hz, 2.0);
        assert_eq!(half.sequences[0].windows[0].modalities[0].data.shape(), &[2, 2]);
        assert!(d.decimated(2).is_err());
    }
}
