//! Versioned single-file checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, JSON
//! header, `u64` value count, little-endian `f64` payload, then a SHA-256
//! digest of every preceding byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, Normalization, StageSpec, TinyBackbone};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{build_backbone, MultiAttentionModel};
use crate::nn::optim::AdamSlot;
use crate::nn::Param;
use crate::tensor::Tensor;
use crate::train::{TrainState, Trainer};

pub const MAGIC: &[u8; 8] = b"MADDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config: String,
    pub stage_spec: StageSpec,
    pub normalization: Normalization,
    pub state: TrainState,
    pub adam_step: u64,
    pub center_alpha: f64,
    pub tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint contents. Tensor names are prefixed by kind:
/// `param/`, `buffer/`, `adam_m/`, `adam_v/` and `centers`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn capture<B: Backbone>(trainer: &mut Trainer<B>) -> Self {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        trainer
            .model
            .visit_params(&mut |n: &str, p: &mut Param| tensors.push((format!("param/{n}"), p.value.clone())));
        trainer
            .model
            .visit_buffers(&mut |n: &str, t: &mut Tensor| tensors.push((format!("buffer/{n}"), t.clone())));
        for AdamSlot { name, m, v } in &trainer.optimizer.slots {
            tensors.push((format!("adam_m/{name}"), m.clone()));
            tensors.push((format!("adam_v/{name}"), v.clone()));
        }
        tensors.push(("centers".into(), trainer.centers.centers.clone()));
        let mut offset = 0;
        let entries = tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        Checkpoint {
            header: Header {
                format_version: FORMAT_VERSION,
                config: trainer.cfg.to_text(),
                stage_spec: trainer.model.backbone.stage_spec().clone(),
                normalization: trainer.model.backbone.normalization().clone(),
                state: trainer.state,
                adam_step: trainer.optimizer.step,
                center_alpha: trainer.centers.alpha,
                tensors: entries,
            },
            tensors: tensors.into_iter().collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.header.format_version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let total: usize = self.header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        out.extend_from_slice(&(total as u64).to_le_bytes());
        for e in &self.header.tensors {
            for v in self.tensors[&e.name].data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 8 + 4 + 8 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch, the archive is corrupted"));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e + 8 <= body.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&body[20..hend]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let count = u64::from_le_bytes(body[hend..hend + 8].try_into().unwrap()) as usize;
        let payload = &body[hend + 8..];
        if payload.len() != count * 8 {
            return Err(bad("payload length does not match its declared size"));
        }
        let values: Vec<f64> =
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let slice = values.get(e.offset..e.offset + n).ok_or_else(|| bad("tensor outside payload"))?;
            tensors.insert(e.name.clone(), Tensor::from_vec(&e.shape, slice.to_vec())?);
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::from_text(&self.header.config)
    }

    fn take(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::ConfigConflict(format!(
                "{name} has shape {:?} in the checkpoint but {:?} in the model",
                t.shape(),
                shape
            )));
        }
        Ok(t)
    }

    /// Copies parameters and buffers into `model`.
    pub fn apply_model<B: Backbone>(&self, model: &mut MultiAttentionModel<B>) -> Result<()> {
        let mut err = None;
        model.visit_params(&mut |n: &str, p: &mut Param| {
            if err.is_none() {
                match self.take(&format!("param/{n}"), p.value.shape()) {
                    Ok(t) => p.value = t.clone(),
                    Err(e) => err = Some(e),
                }
            }
        });
        model.visit_buffers(&mut |n: &str, b: &mut Tensor| {
            if err.is_none() {
                match self.take(&format!("buffer/{n}"), b.shape()) {
                    Ok(t) => *b = t.clone(),
                    Err(e) => err = Some(e),
                }
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Restores model, centers, optimizer and progress counters.
    pub fn restore<B: Backbone>(&self, trainer: &mut Trainer<B>) -> Result<()> {
        let stored = self.config()?;
        if stored.num_attentions != trainer.cfg.num_attentions {
            return Err(Error::ConfigConflict(format!(
                "checkpoint has M = {} attention maps, the run expects M = {}",
                stored.num_attentions, trainer.cfg.num_attentions
            )));
        }
        if stored.architecture() != trainer.cfg.architecture() {
            return Err(Error::ConfigConflict(format!(
                "checkpoint architecture {:?} differs from the run's {:?}",
                stored.architecture(),
                trainer.cfg.architecture()
            )));
        }
        if &self.header.stage_spec != trainer.model.backbone.stage_spec() {
            return Err(Error::ConfigConflict("checkpoint stage layout differs from the backbone's".into()));
        }
        self.apply_model(&mut trainer.model)?;
        trainer.centers.centers = self.take("centers", trainer.centers.centers.shape())?.clone();
        trainer.centers.alpha = self.header.center_alpha;
        trainer.optimizer.step = self.header.adam_step;
        trainer.optimizer.slots.clear();
        for e in &self.header.tensors {
            if let Some(name) = e.name.strip_prefix("adam_m/") {
                trainer.optimizer.slots.push(AdamSlot {
                    name: name.to_string(),
                    m: self.tensors[&e.name].clone(),
                    v: self
                        .tensors
                        .get(&format!("adam_v/{name}"))
                        .ok_or_else(|| Error::Checkpoint(format!("missing second moment for {name}")))?
                        .clone(),
                });
            }
        }
        trainer.state = self.header.state;
        Ok(())
    }
}

pub fn save_trainer<B: Backbone>(trainer: &mut Trainer<B>, path: &Path) -> Result<()> {
    Checkpoint::capture(trainer).save(path)
}

/// Rebuilds a trainer from the configuration stored in the checkpoint.
pub fn load_trainer(path: &Path) -> Result<Trainer<TinyBackbone>> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = ckpt.config()?;
    let backbone = build_backbone(&cfg)?.with_normalization(ckpt.header.normalization.clone());
    let model = MultiAttentionModel::with_backbone(backbone, &cfg)?;
    let mut trainer = Trainer::with_model(model, cfg)?;
    ckpt.restore(&mut trainer)?;
    Ok(trainer)
}

/// Initialises every parameter present in the checkpoint with a matching
/// name and shape; used to start one run from another's weights.
pub fn init_from<B: Backbone>(model: &mut MultiAttentionModel<B>, path: &Path) -> Result<usize> {
    let ckpt = Checkpoint::load(path)?;
    let mut copied = 0;
    model.visit_params(&mut |n: &str, p: &mut Param| {
        if let Some(t) = ckpt.tensors.get(&format!("param/{n}")) {
            if t.shape() == p.value.shape() {
                p.value = t.clone();
                copied += 1;
            }
        }
    });
    Ok(copied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SynthConfig};

    fn data() -> crate::data::Dataset {
        synthesize(&SynthConfig {
            size: 32,
            cue_size: 4,
            videos: 16,
            frames_per_video: 1,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut t = Trainer::new(TrainConfig::toy()).unwrap();
        t.train_epoch_until(&data(), 1).unwrap();
        let c = Checkpoint::capture(&mut t);
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let mut t = Trainer::new(TrainConfig::toy()).unwrap();
        let mut bytes = Checkpoint::capture(&mut t).to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        bytes[mid] ^= 1;
        bytes[8] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn mismatched_head_count_is_a_conflict() {
        let mut t = Trainer::new(TrainConfig::toy()).unwrap();
        let c = Checkpoint::capture(&mut t);
        let mut cfg = TrainConfig::toy();
        cfg.num_attentions = 2;
        let mut other = Trainer::new(cfg).unwrap();
        assert!(matches!(c.restore(&mut other), Err(Error::ConfigConflict(_))));
    }

    #[test]
    fn resumed_step_equals_uninterrupted_step() {
        let d = data();
        let mut a = Trainer::new(TrainConfig::toy()).unwrap();
        a.train_epoch_until(&d, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        save_trainer(&mut a, &path).unwrap();
        let next_a = a.train_epoch_until(&d, 1).unwrap();
        let mut b = load_trainer(&path).unwrap();
        let next_b = b.train_epoch_until(&d, 1).unwrap();
        assert_eq!(next_a, next_b);
        assert_eq!(Checkpoint::capture(&mut a), Checkpoint::capture(&mut b));
    }
}
