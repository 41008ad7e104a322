//! Datasets stored in the tensor container format.

use std::path::Path;

use ami_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{Dataset, LabeledWindow, ModalitySpec, ModalityWindow, Sequence};
use crate::checkpoint::{read_container, write_container};
use crate::error::{AmiError, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    modalities: Vec<ModalitySpec>,
    num_classes: usize,
    window_seconds: f64,
    informative: Vec<Vec<usize>>,
    sequences: Vec<SequenceHeader>,
}

#[derive(Serialize, Deserialize)]
struct SequenceHeader {
    subject: Option<String>,
    labels: Vec<usize>,
}

const KIND: &str = "dataset";

/// One `[windows, channels, samples]` block per sequence and modality.
pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    data.validate()?;
    let header = Header {
        kind: KIND.into(),
        modalities: data.modalities.clone(),
        num_classes: data.num_classes,
        window_seconds: data.window_seconds,
        informative: data.informative.clone(),
        sequences: data
            .sequences
            .iter()
            .map(|s| SequenceHeader {
                subject: s.subject.clone(),
                labels: s.windows.iter().map(|w| w.label).collect(),
            })
            .collect(),
    };
    let mut stacked = Vec::new();
    for (si, seq) in data.sequences.iter().enumerate() {
        for (mi, _) in data.modalities.iter().enumerate() {
            let first = &seq.windows[0].modalities[mi];
            let (c, t) = (first.channels(), first.samples());
            let mut buf = Vec::with_capacity(seq.windows.len() * c * t);
            for w in &seq.windows {
                buf.extend_from_slice(w.modalities[mi].data.data());
            }
            stacked.push((format!("s{si}/m{mi}"), Tensor::new(vec![seq.windows.len(), c, t], buf)?));
        }
    }
    let header = serde_json::to_value(&header).map_err(|e| AmiError::Data(e.to_string()))?;
    let blocks: Vec<(String, &Tensor)> = stacked.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_container(path, &header, &blocks)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (header, blocks) = read_container(path)?;
    let bad = |reason: String| AmiError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let h: Header = serde_json::from_value(header).map_err(|e| bad(e.to_string()))?;
    if h.kind != KIND {
        return Err(bad(format!("holds `{}`, not a dataset", h.kind)));
    }
    let m = h.modalities.len();
    if blocks.len() != h.sequences.len() * m {
        return Err(bad(format!("{} blocks for {} sequences × {m} modalities", blocks.len(), h.sequences.len())));
    }
    let mut blocks = blocks.into_iter();
    let mut sequences = Vec::with_capacity(h.sequences.len());
    for sh in h.sequences {
        let mut per_mod = Vec::with_capacity(m);
        for mi in 0..m {
            let (_, t) = blocks.next().expect("counted");
            let s = t.shape().to_vec();
            if s.len() != 3 || s[0] != sh.labels.len() {
                return Err(bad(format!("block shape {s:?} does not match {} windows", sh.labels.len())));
            }
            per_mod.push((mi, s, t));
        }
        let windows = sh
            .labels
            .iter()
            .enumerate()
            .map(|(wi, &label)| {
                let modalities = per_mod
                    .iter()
                    .map(|(mi, s, t)| {
                        let n = s[1] * s[2];
                        let data = Tensor::new(vec![s[1], s[2]], t.data()[wi * n..(wi + 1) * n].to_vec())?;
                        Ok(ModalityWindow {
                            modality: *mi,
                            data,
                            rate_hz: h.modalities[*mi].rate_hz,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(LabeledWindow { modalities, label })
            })
            .collect::<Result<Vec<_>>>()?;
        sequences.push(Sequence {
            subject: sh.subject,
            windows,
        });
    }
    let data = Dataset {
        modalities: h.modalities,
        num_classes: h.num_classes,
        window_seconds: h.window_seconds,
        sequences,
        informative: h.informative,
    };
    data.validate()?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let d = synth_generate(&SynthConfig { sequences: 5, ..Default::default() }, 2).unwrap();
        save_dataset(&p, &d).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), d);
    }
}
