//! Checkpoint directories and the NDJSON training log.
//!
//! A checkpoint is a directory holding `params.bin` and `manifest.json`.
//! `params.bin` is little-endian: the magic `EQP1`, a u32 entry count, then per
//! entry a u32 name length, the UTF-8 name, u32 rows, u32 cols and the f64
//! values in row-major order. The manifest is written last.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::geometry::io::write_atomic;
use crate::tensor::Tensor;

use super::config::Config;
use super::model::Model;
use super::train::{LogEntry, TrainObserver};

const MAGIC: &[u8; 4] = b"EQP1";
pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Refine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub phase: Phase,
    pub step: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Names of the frozen tensors.
    pub frozen: Vec<String>,
    pub config: Config,
}

pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let (name, t) = (store.name(id), store.get(id));
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

fn bad(reason: String) -> Error {
    Error::Format { format: "params", reason }
}

pub fn decode_params(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| bad(e.to_string()))?;
        let (rows, cols) = (r.u32()?, r.u32()?);
        let n = rows.checked_mul(cols).ok_or_else(|| bad("tensor size overflows".into()))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("tensor size overflows".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((name, Tensor::from_vec(rows, cols, data)?));
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save_checkpoint(dir: &Path, model: &Model, phase: Phase, step: usize, seed: u64, train: &super::TrainConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config = Config { model: model.config.clone(), train: train.clone() };
    let frozen = model.store.ids().filter(|&id| model.store.is_frozen(id)).map(|id| model.store.name(id).to_string()).collect();
    let manifest = Manifest { phase, step, seed, config_hash: config.hash(), frozen, config };
    write_atomic(&dir.join(PARAMS_FILE), &encode_params(&model.store))?;
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&dir.join(MANIFEST_FILE), &json)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.config.hash() != m.config_hash {
        return Err(Error::Format { format: "manifest", reason: "config hash does not match the stored config".into() });
    }
    m.config.validate()?;
    Ok(m)
}

/// Rebuilds the model described by the manifest and restores every tensor.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, Manifest)> {
    let manifest = read_manifest(dir)?;
    let mut model = Model::new(&manifest.config.model, manifest.seed, 0.0)?;
    if manifest.phase == Phase::Refine {
        model.attach_control()?;
    }
    let path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let entries = decode_params(&bytes)?;
    if entries.len() != model.store.len() {
        return Err(bad(format!("{} tensors stored, the model has {}", entries.len(), model.store.len())));
    }
    for (name, value) in entries {
        let id = model.store.find(&name).ok_or_else(|| bad(format!("unknown tensor {name}")))?;
        if model.store.get(id).shape() != value.shape() {
            return Err(bad(format!("{name}: stored {:?}, expected {:?}", value.shape(), model.store.get(id).shape())));
        }
        *model.store.get_mut(id) = value;
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let frozen = manifest.frozen.iter().any(|n| n == model.store.name(id));
        model.store.set_frozen(id, frozen);
    }
    Ok((model, manifest))
}

/// Appends log entries as JSON lines and writes checkpoints to `dir`.
pub struct RunRecorder {
    log: BufWriter<File>,
    log_path: PathBuf,
    dir: PathBuf,
    phase: Phase,
    seed: u64,
    train: super::TrainConfig,
    pub echo: bool,
}

impl RunRecorder {
    pub fn new(dir: &Path, phase: Phase, seed: u64, train: &super::TrainConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log_path = dir.join("train_log.ndjson");
        let file = OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
        Ok(Self { log: BufWriter::new(file), log_path, dir: dir.to_path_buf(), phase, seed, train: train.clone(), echo: false })
    }
}

impl TrainObserver for RunRecorder {
    fn log(&mut self, entry: &LogEntry) -> Result<()> {
        let line = serde_json::to_string(entry)?;
        writeln!(self.log, "{line}").and_then(|_| self.log.flush()).map_err(|e| Error::io(&self.log_path, e))?;
        if self.echo {
            eprintln!("step {:>5}  loss {:.5}  lr {:.2e}", entry.step, entry.loss, entry.lr);
        }
        Ok(())
    }

    fn checkpoint(&mut self, model: &Model, step: usize) -> Result<()> {
        save_checkpoint(&self.dir, model, self.phase, step, self.seed, &self.train)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::ModelConfig;

    fn small() -> ModelConfig {
        ModelConfig { width: 8, heads: 2, group_width: 4, pose_hidden: 8, kernel_size: 6, k_seed: 2, max_neighbors: 8, time_width: 8, ..ModelConfig::default() }
    }

    #[test]
    fn params_round_trip_and_reject_damage() {
        let model = Model::new(&small(), 3, -0.5).unwrap();
        let bytes = encode_params(&model.store);
        let back = decode_params(&bytes).unwrap();
        assert_eq!(back.len(), model.store.len());
        for ((name, t), id) in back.iter().zip(model.store.ids()) {
            assert_eq!(name, model.store.name(id));
            assert_eq!(t, model.store.get(id));
        }
        assert!(decode_params(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_params(&extra).is_err());
        assert!(decode_params(b"NOPE\0\0\0\0").is_err());
    }

    #[test]
    fn refine_checkpoint_restores_values_and_freezing() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::new(&small(), 5, -0.3).unwrap();
        model.attach_control().unwrap();
        model.apply_refine_freeze();
        let id = model.store.find("control.latent_in.w").unwrap();
        model.store.get_mut(id).data_mut()[0] = 0.125;
        save_checkpoint(dir.path(), &model, Phase::Refine, 7, 5, &Default::default()).unwrap();
        let (back, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!((manifest.phase, manifest.step), (Phase::Refine, 7));
        assert!(back.is_refining());
        for id in model.store.ids() {
            let other = back.store.find(model.store.name(id)).unwrap();
            assert_eq!(model.store.get(id), back.store.get(other));
            assert_eq!(model.store.is_frozen(id), back.store.is_frozen(other));
        }
    }

    #[test]
    fn tampered_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(&small(), 1, 0.0).unwrap();
        save_checkpoint(dir.path(), &model, Phase::Pretrain, 1, 1, &Default::default()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("\"width\": 8", "\"width\": 16");
        fs::write(&path, text).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
