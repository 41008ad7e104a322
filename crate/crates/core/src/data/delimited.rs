//! Whitespace- or comma-delimited sensor logs (one recording per file).

use std::path::{Path, PathBuf};

use ami_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{window_segment, Dataset, LabeledWindow, ModalitySpec, ModalityWindow, Sequence};
use crate::error::{AmiError, Result};

/// Assigns one file column (0-based) to a modality channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMap {
    pub column: usize,
    pub modality: usize,
    pub channel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelimitedConfig {
    pub files: Vec<PathBuf>,
    pub modalities: Vec<ModalitySpec>,
    pub columns: Vec<ColumnMap>,
    pub label_column: usize,
    /// Raw label values in class order; any other value is an error.
    pub labels: Vec<i64>,
    /// Rows carrying this raw label are removed before windowing.
    pub drop_label: Option<i64>,
    pub window_seconds: f64,
    pub stride_seconds: f64,
    /// Consecutive windows per training sequence.
    pub sequence_windows: usize,
}

impl DelimitedConfig {
    fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(AmiError::config("dataset.modalities", "at least one modality required"));
        }
        let rate = self.modalities[0].rate_hz;
        if self.modalities.iter().any(|m| m.rate_hz != rate) {
            return Err(AmiError::config(
                "dataset.modalities",
                "all modalities in one delimited file must share a sampling rate",
            ));
        }
        for (m, spec) in self.modalities.iter().enumerate() {
            for c in 0..spec.channels {
                let n = self
                    .columns
                    .iter()
                    .filter(|col| col.modality == m && col.channel == c)
                    .count();
                if n != 1 {
                    return Err(AmiError::config(
                        "dataset.columns",
                        format!("modality `{}` channel {c} mapped {n} times", spec.name),
                    ));
                }
            }
        }
        if let Some(col) = self.columns.iter().find(|c| c.modality >= self.modalities.len()) {
            return Err(AmiError::config(
                "dataset.columns",
                format!("column {} names unknown modality {}", col.column, col.modality),
            ));
        }
        if self.labels.is_empty() {
            return Err(AmiError::config("dataset.labels", "no classes listed"));
        }
        if self.stride_seconds <= 0.0 || self.window_seconds <= 0.0 {
            return Err(AmiError::config("dataset.window_seconds", "window and stride must be positive"));
        }
        if self.sequence_windows == 0 {
            return Err(AmiError::config("dataset.sequence_windows", "must be >= 1"));
        }
        Ok(())
    }
}

struct Stream {
    /// `[column][sample]`
    columns: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

fn parse_file(path: &Path, cfg: &DelimitedConfig) -> Result<Vec<Stream>> {
    let text = std::fs::read_to_string(path).map_err(|e| AmiError::io(path, e))?;
    let max_col = cfg
        .columns
        .iter()
        .map(|c| c.column)
        .chain([cfg.label_column])
        .max()
        .unwrap_or(0);
    let mut runs = Vec::new();
    let mut current = Stream {
        columns: vec![Vec::new(); cfg.columns.len()],
        labels: Vec::new(),
    };
    let mut width = None;
    for (ix, line) in text.lines().enumerate() {
        let line_no = ix + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = trimmed
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        let parse_err = |reason: String| AmiError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(parse_err(format!("ragged row: {} cells, expected {w}", cells.len())))
            }
            _ => {}
        }
        if cells.len() <= max_col {
            return Err(parse_err(format!(
                "row has {} cells but column {max_col} is mapped",
                cells.len()
            )));
        }
        let mut values = Vec::with_capacity(cells.len());
        for (c, cell) in cells.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(format!("column {c}: `{cell}` is not numeric")))?;
            values.push(v);
        }
        let raw = values[cfg.label_column];
        if raw.fract() != 0.0 {
            return Err(parse_err(format!("label `{raw}` is not an integer")));
        }
        let raw = raw as i64;
        if Some(raw) == cfg.drop_label {
            if !current.labels.is_empty() {
                runs.push(std::mem::replace(
                    &mut current,
                    Stream {
                        columns: vec![Vec::new(); cfg.columns.len()],
                        labels: Vec::new(),
                    },
                ));
            }
            continue;
        }
        let class = cfg
            .labels
            .iter()
            .position(|&l| l == raw)
            .ok_or_else(|| parse_err(format!("label {raw} is not in the configured label list")))?;
        for (k, col) in cfg.columns.iter().enumerate() {
            current.columns[k].push(values[col.column]);
        }
        current.labels.push(class);
    }
    if !current.labels.is_empty() {
        runs.push(current);
    }
    Ok(runs)
}

/// Load every configured file into labelled window sequences. Each file is a
/// subject; rows with the dropped label split a recording into separate
/// contiguous runs.
pub fn load_delimited(cfg: &DelimitedConfig) -> Result<Dataset> {
    cfg.validate()?;
    let rate = cfg.modalities[0].rate_hz;
    let length = (cfg.window_seconds * rate).round() as usize;
    let stride = ((cfg.stride_seconds * rate).round() as usize).max(1);
    let mut sequences = Vec::new();
    for path in &cfg.files {
        let subject = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned());
        for run in parse_file(path, cfg)? {
            let segments = window_segment(&run.labels, length, stride);
            let windows: Vec<LabeledWindow> = segments
                .iter()
                .map(|seg| LabeledWindow {
                    label: seg.label,
                    modalities: cfg
                        .modalities
                        .iter()
                        .enumerate()
                        .map(|(m, spec)| {
                            let mut data = Vec::with_capacity(spec.channels * length);
                            for c in 0..spec.channels {
                                let k = cfg
                                    .columns
                                    .iter()
                                    .position(|col| col.modality == m && col.channel == c)
                                    .expect("validated column map");
                                data.extend_from_slice(&run.columns[k][seg.start..seg.start + length]);
                            }
                            ModalityWindow {
                                modality: m,
                                data: Tensor::new(vec![spec.channels, length], data)
                                    .expect("window shape"),
                                rate_hz: spec.rate_hz,
                            }
                        })
                        .collect(),
                })
                .collect();
            for chunk in windows.chunks(cfg.sequence_windows) {
                sequences.push(Sequence {
                    subject: subject.clone(),
                    windows: chunk.to_vec(),
                });
            }
        }
    }
    let dataset = Dataset {
        modalities: cfg.modalities.clone(),
        num_classes: cfg.labels.len(),
        window_seconds: cfg.window_seconds,
        sequences,
        informative: Vec::new(),
    };
    dataset.validate()?;
    Ok(dataset)
}
