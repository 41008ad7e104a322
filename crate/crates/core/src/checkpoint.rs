//! Binary container for named f64 tensors plus a JSON header, and the
//! training-state checkpoint built on it.
//!
//! Layout (little-endian): magic `AMICKPT\0`, format version `u32`, header
//! length `u64` and UTF-8 JSON header, block count `u64`, then per block the
//! name (`u32` length + bytes), rank `u32`, dims `u64 × rank` and the data as
//! `f64`.

use std::fs;
use std::path::{Path, PathBuf};

use ami_tensor::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{AmiError, Result};
use crate::fmpm::{Model, ModelSpec};
use crate::objectives::MemoryBank;
use crate::trainer::optim::AdamW;
use crate::trainer::TrainState;

const MAGIC: &[u8; 8] = b"AMICKPT\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_container(path: &Path, header: &Value, blocks: &[(String, &Tensor)]) -> Result<()> {
    let json = serde_json::to_vec(header).map_err(|e| ckpt_err(path, e))?;
    let mut out = Vec::with_capacity(64 + json.len() + blocks.iter().map(|(_, t)| t.numel() * 8 + 64).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(blocks.len() as u64).to_le_bytes());
    for (name, t) in blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| AmiError::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| AmiError::io(path, e))
}

pub fn read_container(path: &Path) -> Result<(Value, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| AmiError::io(path, e))?;
    let mut r = Reader { path, bytes: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(r.fail("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(r.fail(&format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let hlen = r.len()?;
    let header: Value = serde_json::from_slice(r.take(hlen)?).map_err(|e| ckpt_err(path, e))?;
    let count = r.len()?;
    let mut blocks = Vec::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| ckpt_err(path, e))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.fail("shape overflow"))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| r.fail("shape overflow"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| ckpt_err(path, e))?;
        blocks.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes"));
    }
    Ok((header, blocks))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(self.fail("truncated file")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| self.fail("length overflow"))
    }

    fn fail(&self, reason: &str) -> AmiError {
        AmiError::Checkpoint {
            path: self.path.to_path_buf(),
            reason: format!("{reason} at byte {}", self.pos),
        }
    }
}

fn ckpt_err(path: &Path, e: impl std::fmt::Display) -> AmiError {
    AmiError::Checkpoint {
        path: PathBuf::from(path),
        reason: e.to_string(),
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    epochs_done: usize,
    step: usize,
    bad_steps: usize,
    adam: AdamHeader,
    bank_capacity: usize,
    bank_ids: Vec<(u64, usize)>,
    /// Free-form run metadata (config echo, seed).
    meta: Value,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
}

/// Save model, optimizer moments and memory bank.
pub fn save_state(path: &Path, state: &TrainState, meta: &Value) -> Result<()> {
    let header = Header {
        spec: state.model.spec.clone(),
        epochs_done: state.epochs_done,
        step: state.step,
        bad_steps: state.bad_steps,
        adam: AdamHeader {
            beta1: state.opt.beta1,
            beta2: state.opt.beta2,
            eps: state.opt.eps,
            weight_decay: state.opt.weight_decay,
            step: state.opt.step,
        },
        bank_capacity: state.bank.capacity(),
        bank_ids: state.bank.ids().collect(),
        meta: meta.clone(),
    };
    let header = serde_json::to_value(&header).map_err(|e| ckpt_err(path, e))?;
    let bank = state.bank.matrix();
    let mut blocks: Vec<(String, &Tensor)> = Vec::new();
    for (n, t) in state.model.params.iter() {
        blocks.push((format!("param/{n}"), t));
    }
    for (n, t) in &state.opt.m {
        blocks.push((format!("adam_m/{n}"), t));
    }
    for (n, t) in &state.opt.v {
        blocks.push((format!("adam_v/{n}"), t));
    }
    blocks.push(("bank".into(), &bank));
    write_container(path, &header, &blocks)
}

/// Load a checkpoint written by [`save_state`]; returns the state and the
/// stored metadata. Parameter names and shapes are checked against a model
/// freshly built from the stored spec.
pub fn load_state(path: &Path) -> Result<(TrainState, Value)> {
    let (header, blocks) = read_container(path)?;
    let h: Header = serde_json::from_value(header).map_err(|e| ckpt_err(path, e))?;
    let reference = Model::new(h.spec.clone(), 0)?;
    let mut params = ParamSet::new();
    let mut opt = AdamW::new(h.adam.weight_decay);
    opt.beta1 = h.adam.beta1;
    opt.beta2 = h.adam.beta2;
    opt.eps = h.adam.eps;
    opt.step = h.adam.step;
    let mut bank_rows = None;
    for (name, t) in blocks {
        if let Some(n) = name.strip_prefix("param/") {
            params.insert(n, t);
        } else if let Some(n) = name.strip_prefix("adam_m/") {
            opt.m.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix("adam_v/") {
            opt.v.insert(n.to_string(), t);
        } else if name == "bank" {
            bank_rows = Some(t);
        } else {
            return Err(ckpt_err(path, format!("unknown block `{name}`")));
        }
    }
    if params.len() != reference.params.len() {
        return Err(ckpt_err(
            path,
            format!("{} parameter tensors, model needs {}", params.len(), reference.params.len()),
        ));
    }
    for (n, t) in reference.params.iter() {
        match params.get(n) {
            Some(p) if p.shape() == t.shape() => {}
            Some(p) => {
                return Err(ckpt_err(path, format!("parameter `{n}` has shape {:?}, expected {:?}", p.shape(), t.shape())));
            }
            None => return Err(ckpt_err(path, format!("missing parameter `{n}`"))),
        }
    }
    let bank_rows = bank_rows.ok_or_else(|| ckpt_err(path, "missing memory bank"))?;
    let bank = MemoryBank::restore(h.bank_capacity, &h.bank_ids, &bank_rows).map_err(|e| ckpt_err(path, e))?;
    let state = TrainState {
        model: Model { spec: h.spec, params },
        opt,
        bank,
        epochs_done: h.epochs_done,
        step: h.step,
        bad_steps: h.bad_steps,
    };
    Ok((state, h.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fmpm::tests::toy_spec;
    use crate::trainer::TrainConfig;

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.5, f64::MIN_POSITIVE, 0.1, 1e300, -0.0]).unwrap();
        let b = Tensor::zeros(&[0, 4]);
        let header = serde_json::json!({"k": [1, 2]});
        write_container(&p, &header, &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let (h, blocks) = read_container(&p).unwrap();
        assert_eq!(h, header);
        assert_eq!(blocks[0], ("a".to_string(), a));
        assert_eq!(blocks[1].1.shape(), &[0, 4]);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let a = Tensor::ones(&[3]);
        write_container(&p, &Value::Null, &[("a".into(), &a)]).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_container(&p), Err(AmiError::Checkpoint { .. })));
        fs::write(&p, b"garbage!garbage!").unwrap();
        assert!(matches!(read_container(&p), Err(AmiError::Checkpoint { .. })));
    }

    #[test]
    fn state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.ckpt");
        let model = Model::new(toy_spec(2, 8, 2), 3).unwrap();
        let mut state = TrainState::new(model, &TrainConfig::default());
        state.step = 7;
        state.bank.push(4, 1, &[1.0; 8]);
        state.opt.m.insert("cls".into(), Tensor::full(&[1, 8], 0.25));
        save_state(&p, &state, &serde_json::json!({"seed": 5})).unwrap();
        let (back, meta) = load_state(&p).unwrap();
        assert_eq!(meta["seed"], 5);
        assert_eq!(back.model.params, state.model.params);
        assert_eq!(back.model.spec, state.model.spec);
        assert_eq!(back.opt, state.opt);
        assert_eq!(back.step, 7);
        assert_eq!(back.bank.matrix(), state.bank.matrix());
        assert_eq!(back.bank.ids().collect::<Vec<_>>(), vec![(4, 1)]);
    }
}
