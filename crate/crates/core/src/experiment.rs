//! Run configuration and the train/evaluate pipeline shared by the CLI and
//! the end-to-end tests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::amc::GateConfig;
use crate::checkpoint::{load_state, save_state};
use crate::data::{load_dataset, load_delimited, normalize_splits, synth_generate, Dataset, DelimitedConfig, Splits, SynthConfig};
use crate::energy::EnergyConfig;
use crate::error::{AmiError, Result};
use crate::fmpm::{Model, ModelConfig, ModelSpec, Switches};
use crate::sigma_delta::SigmaDeltaParams;
use crate::trainer::{evaluate, train_epochs, EvalOptions, EvalReport, LogRow, TrainConfig, TrainState};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "AMI_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic(SynthConfig),
    Delimited(DelimitedConfig),
    /// A dataset written by `gen-data`.
    Cached { path: PathBuf },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::Synthetic(SynthConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sensing: SigmaDeltaParams,
    pub gate: GateConfig,
    pub energy: EnergyConfig,
    pub eval_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sensing: SigmaDeltaParams::default(),
            gate: GateConfig::default(),
            energy: EnergyConfig::default(),
            eval_batch_size: 64,
        }
    }
}

/// Short names accepted by `--set` in place of full dotted paths.
const ALIASES: &[(&str, &str)] = &[
    ("lambda1", "train.loss.task"),
    ("lambda2", "train.loss.gating"),
    ("lambda3", "train.loss.contrastive"),
    ("lambda4", "train.loss.predictive"),
    ("λ1", "train.loss.task"),
    ("λ2", "train.loss.gating"),
    ("λ3", "train.loss.contrastive"),
    ("λ4", "train.loss.predictive"),
];

impl RunConfig {
    /// Parse TOML text, apply `key=value` overrides and validate.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| AmiError::config("<file>", e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| AmiError::config("<config>", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| AmiError::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.energy.validate()?;
        if self.eval_batch_size == 0 {
            return Err(AmiError::config("eval_batch_size", "must be >= 1"));
        }
        if self.model.d_model == 0 || self.model.heads == 0 || !self.model.d_model.is_multiple_of(self.model.heads) {
            return Err(AmiError::config("model.heads", "must divide model.d_model"));
        }
        if let DatasetConfig::Synthetic(s) = &self.dataset {
            s.validate()?;
        }
        Ok(())
    }

    /// `output_dir`, placed under `$AMI_OUTPUT_ROOT` when that is set and
    /// the configured path is relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn model_spec(&self, data: &Dataset) -> ModelSpec {
        ModelSpec {
            model: self.model.clone(),
            gate: self.gate.clone(),
            sensing: self.sensing.clone(),
            modalities: data.modalities.clone(),
            num_classes: data.num_classes,
            window_seconds: data.window_seconds,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            switches: self.train.ablation,
            gates: crate::trainer::EvalGates::Controller {
                cold_start_open: self.gate.cold_start_open,
            },
            batch_size: self.eval_batch_size,
        }
    }
}

fn apply_override(doc: &mut toml::Table, raw: &str) -> Result<()> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| AmiError::config(raw, "override must look like key=value"))?;
    let key = key.trim();
    let key = ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, full)| full);
    let value = value.trim();
    let parsed = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(value.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| AmiError::config(key, format!("`{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

pub fn load_data(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    match cfg {
        DatasetConfig::Synthetic(s) => synth_generate(s, seed),
        DatasetConfig::Delimited(d) => load_delimited(d),
        DatasetConfig::Cached { path } => load_dataset(path),
    }
}

/// Train/val/test splits with channel statistics taken from the training
/// split.
pub fn prepare_splits(cfg: &RunConfig) -> Result<Splits> {
    let data = load_data(&cfg.dataset, cfg.seed)?;
    let mut splits = data.split(cfg.seed);
    normalize_splits(&mut splits);
    Ok(splits)
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub val: EvalReport,
    pub log: Vec<LogRow>,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "loss.csv";

/// Train from scratch (or resume from `out/model.ckpt`), checkpointing after
/// every epoch and evaluating on the validation split at the end.
pub fn train_run(cfg: &RunConfig, splits: &Splits, out: Option<&Path>, resume: bool) -> Result<TrainOutcome> {
    let ckpt = out.map(|o| o.join(CHECKPOINT_FILE));
    let mut state = match (&ckpt, resume) {
        (Some(p), true) if p.exists() => {
            let (state, meta) = load_state(p)?;
            let stored: RunConfig = serde_json::from_value(meta["config"].clone())
                .map_err(|e| AmiError::config("<checkpoint>", e.to_string()))?;
            if !same_run(&stored, cfg) {
                return Err(AmiError::config("<resume>", "checkpoint was trained with a different configuration"));
            }
            log::info!("resuming from epoch {}", state.epochs_done);
            state
        }
        _ => TrainState::new(Model::new(cfg.model_spec(&splits.train), cfg.seed)?, &cfg.train),
    };
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(|e| AmiError::io(o, e))?;
        fs::write(o.join("config.toml"), cfg.to_toml()).map_err(|e| AmiError::io(o, e))?;
    }
    let meta = serde_json::json!({ "config": cfg, "seed": cfg.seed });
    let mut all = Vec::new();
    while state.epochs_done < cfg.train.epochs {
        let mut rows = Vec::new();
        let next = state.epochs_done + 1;
        train_epochs(&mut state, &splits.train, &cfg.train, &cfg.gate, cfg.seed, next, &mut rows)?;
        if let Some(last) = rows.last() {
            log::info!(
                "epoch {next}/{}: loss {:.4} task {:.4} sensing {:.3}",
                cfg.train.epochs,
                last.total,
                last.task,
                last.sensing_rate
            );
        }
        if let (Some(o), Some(p)) = (out, &ckpt) {
            append_log(&o.join(LOG_FILE), &rows)?;
            save_state(p, &state, &meta)?;
        }
        all.extend(rows);
    }
    let val = evaluate(&state.model, &splits.val, &cfg.eval_options())?;
    if let Some(o) = out {
        write_json(&o.join("val_report.json"), &val)?;
    }
    Ok(TrainOutcome { state, val, log: all })
}

fn same_run(a: &RunConfig, b: &RunConfig) -> bool {
    let mut a = a.clone();
    a.train.epochs = b.train.epochs;
    a.output_dir.clone_from(&b.output_dir);
    a == *b
}

fn append_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| AmiError::io(path, e))?;
    let mut s = String::new();
    if fresh {
        s.push_str(LogRow::HEADER);
        s.push('\n');
    }
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    f.write_all(s.as_bytes()).map_err(|e| AmiError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| AmiError::Invalid(e.to_string()))?;
    fs::write(path, text).map_err(|e| AmiError::io(path, e))
}

/// Load a trained model plus the configuration it was trained with.
pub fn load_trained(path: &Path) -> Result<(TrainState, RunConfig)> {
    let (state, meta) = load_state(path)?;
    let cfg: RunConfig = serde_json::from_value(meta["config"].clone()).map_err(|e| AmiError::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("no usable config echo: {e}"),
    })?;
    Ok((state, cfg))
}

/// Copy of `cfg` with one component switched off; `"none"` is the full model.
pub fn ablated(cfg: &RunConfig, switch: &str) -> Result<RunConfig> {
    let mut c = cfg.clone();
    if switch != "none" {
        for s in switch.split('+') {
            c.train.ablation = c.train.ablation.without(s)?;
        }
    }
    Ok(c)
}

/// The dense same-architecture baseline: every gate open, no Sigma-Delta.
pub fn dense_baseline(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.train.ablation = Switches::dense();
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_and_aliases() {
        let c = RunConfig::from_toml(
            "seed = 3\n[train]\nepochs = 5\n",
            &["train.epochs=7".into(), "lambda2=0.2".into(), "output_dir=out/x".into()],
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.loss.gating, 0.2);
        assert_eq!(c.output_dir, PathBuf::from("out/x"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = RunConfig::from_toml("[train]\nepochz = 5\n", &[]).unwrap_err();
        assert!(e.to_string().contains("epochz"), "{e}");
        assert!(RunConfig::from_toml("", &["model.d_modle=3".into()]).is_err());
        assert!(RunConfig::from_toml("", &["no_equals_sign".into()]).is_err());
    }

    #[test]
    fn invalid_values_name_the_field() {
        let e = RunConfig::from_toml("", &["train.lr=-1".into()]).unwrap_err();
        assert!(e.to_string().contains("train.lr"), "{e}");
    }

    #[test]
    fn dataset_kinds_parse() {
        let c = RunConfig::from_toml("[dataset]\nkind = \"cached\"\npath = \"d.bin\"\n", &[]).unwrap();
        assert_eq!(c.dataset, DatasetConfig::Cached { path: "d.bin".into() });
        let c = RunConfig::from_toml("[dataset]\nkind = \"synthetic\"\nmodalities = 4\n", &[]).unwrap();
        match c.dataset {
            DatasetConfig::Synthetic(s) => assert_eq!(s.modalities, 4),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::from_toml("[dataset]\nkind = \"synthetic\"\nmodalitiez = 4\n", &[]).is_err());
    }

    #[test]
    fn toml_echo_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml(), &[]).unwrap(), c);
    }

    #[test]
    fn ablation_names() {
        let c = RunConfig::default();
        assert!(!ablated(&c, "amc").unwrap().train.ablation.amc);
        let both = ablated(&c, "fusion+context").unwrap().train.ablation;
        assert!(!both.fusion && !both.context);
        assert_eq!(ablated(&c, "none").unwrap(), c);
        assert!(ablated(&c, "bogus").is_err());
    }
}
