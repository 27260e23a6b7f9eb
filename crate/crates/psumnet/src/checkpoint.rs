//! Stream checkpoints.
//!
//! Layout: the magic `PSUMCKPT`, a little-endian `u32` version, a `u64`
//! header length, the JSON header, then every tensor as little-endian
//! `f32` at the offsets the header lists.

use std::fs;
use std::path::Path;

use psumnet_core::model::{build_stream, Stream};
use psumnet_core::nn::{ParamKind, ParamStore};
use psumnet_core::skeleton::Part;
use psumnet_core::train::{EpochRecord, TrainState};
use psumnet_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::EffectiveConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PSUMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
    Velocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    /// In `f32` elements from the start of the payload.
    pub offset: usize,
    pub len: usize,
}

/// Trainer bookkeeping stored alongside the weights of a resumable
/// checkpoint. Velocities travel as tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SavedState {
    pub next_epoch: usize,
    pub log: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
    pub stopped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub part: Part,
    pub config: EffectiveConfig,
    pub config_hash: String,
    /// The epoch these weights come from.
    pub epoch: usize,
    pub val_acc: Option<f64>,
    pub state: Option<SavedState>,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore<f32>,
    pub velocities: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(
        part: Part,
        config: &EffectiveConfig,
        epoch: usize,
        val_acc: Option<f64>,
        params: &ParamStore<f32>,
        state: Option<&TrainState>,
    ) -> Self {
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut record = |name: &str, kind, t: &Tensor<f32>| {
            tensors.push(TensorRecord {
                name: name.into(),
                kind,
                shape: t.shape().to_vec(),
                offset,
                len: t.numel(),
            });
            offset += t.numel();
        };
        for e in params.entries() {
            let kind = match e.kind {
                ParamKind::Param => TensorKind::Param,
                ParamKind::Buffer => TensorKind::Buffer,
            };
            record(&e.name, kind, &e.value);
        }
        let velocities = state.map(|s| s.velocities.clone()).unwrap_or_default();
        for (name, v) in &velocities {
            record(name, TensorKind::Velocity, v);
        }
        Checkpoint {
            header: CheckpointHeader {
                part,
                config_hash: config.hash(),
                config: config.clone(),
                epoch,
                val_acc,
                state: state.map(|s| SavedState {
                    next_epoch: s.next_epoch,
                    log: s.log.clone(),
                    best_epoch: s.best_epoch,
                    best_val_acc: s.best_val_acc,
                    stopped: s.stopped,
                }),
                tensors,
            },
            params: params.clone(),
            velocities,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let values = self
            .params
            .entries()
            .iter()
            .map(|e| &e.value)
            .chain(self.velocities.iter().map(|(_, v)| v));
        for t in values {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err("not a checkpoint".into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or("truncated")?;
        if body.len() < hlen {
            return Err("truncated header".into());
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..hlen]).map_err(|e| format!("bad header: {e}"))?;
        let payload = &body[hlen..];
        let total: usize = header.tensors.iter().map(|t| t.len).sum();
        if payload.len() != total * 4 {
            return Err(format!("expected {} payload bytes, found {}", total * 4, payload.len()));
        }
        let mut params = ParamStore::new();
        let mut velocities = Vec::new();
        for r in &header.tensors {
            if r.shape.iter().product::<usize>() != r.len || r.offset + r.len > total {
                return Err(format!("tensor {} has an inconsistent extent", r.name));
            }
            let data: Vec<f32> = payload[r.offset * 4..(r.offset + r.len) * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&r.shape, data).map_err(|e| e.to_string())?;
            match r.kind {
                TensorKind::Param => params.add(&r.name, t, ParamKind::Param),
                TensorKind::Buffer => params.add(&r.name, t, ParamKind::Buffer),
                TensorKind::Velocity => {
                    velocities.push((r.name.clone(), t));
                    continue;
                }
            }
            .map_err(|e| e.to_string())?;
        }
        if header.config_hash != header.config.hash() {
            return Err("config hash does not match the stored config".into());
        }
        Ok(Checkpoint {
            header,
            params,
            velocities,
        })
    }

    /// Builds the stream this checkpoint was taken from and loads its
    /// weights, checking names, kinds and shapes.
    pub fn stream(&self) -> std::result::Result<Stream, String> {
        let mut stream = build_stream(&self.header.config.model, self.header.part).map_err(|e| e.to_string())?;
        if stream.params.len() != self.params.len() {
            return Err(format!(
                "{} tensors stored, the architecture has {}",
                self.params.len(),
                stream.params.len()
            ));
        }
        for e in self.params.entries() {
            let id = stream
                .params
                .id(&e.name)
                .ok_or_else(|| format!("unexpected tensor {}", e.name))?;
            if stream.params.entry(id).kind != e.kind {
                return Err(format!("tensor {} changed kind", e.name));
            }
            stream.params.assign(&e.name, e.value.clone()).map_err(|err| err.to_string())?;
        }
        Ok(stream)
    }

    /// Trainer state with velocities, when this checkpoint is resumable.
    pub fn train_state(&self) -> Option<TrainState> {
        self.header.state.as_ref().map(|s| TrainState {
            next_epoch: s.next_epoch,
            log: s.log.clone(),
            best_epoch: s.best_epoch,
            best_val_acc: s.best_val_acc,
            stopped: s.stopped,
            velocities: self.velocities.clone(),
        })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    // Write then rename so an interrupted run never leaves half a file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.encode()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes).map_err(|m| Error::format(path, m))
}

/// Reads a checkpoint and rebuilds its stream.
pub fn load_stream(path: &Path) -> Result<(Checkpoint, Stream)> {
    let ckpt = read_checkpoint(path)?;
    let stream = ckpt.stream().map_err(|m| Error::format(path, m))?;
    Ok((ckpt, stream))
}

#[cfg(test)]
mod tests {
    use super::*;
    use psumnet_core::model::ModelConfig;
    use psumnet_core::train::TrainConfig;

    fn config() -> EffectiveConfig {
        EffectiveConfig {
            model: ModelConfig::with_width("ntu25", 4, 8).unwrap(),
            train: TrainConfig::default(),
        }
    }

    #[test]
    fn round_trip_restores_the_stream() {
        let cfg = config();
        let stream = build_stream(&cfg.model, Part::Legs).unwrap();
        let state = TrainState {
            next_epoch: 3,
            log: vec![],
            best_epoch: Some(2),
            best_val_acc: Some(0.5),
            stopped: false,
            velocities: vec![("legs.fc.weight".into(), Tensor::full(&[2, 2], 0.25))],
        };
        let ckpt = Checkpoint::new(Part::Legs, &cfg, 2, Some(0.5), &stream.params, Some(&state));
        let bytes = ckpt.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.stream().unwrap(), stream);
        assert_eq!(back.train_state().unwrap(), state);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn corruption_is_reported() {
        let cfg = config();
        let stream = build_stream(&cfg.model, Part::Legs).unwrap();
        let bytes = Checkpoint::new(Part::Legs, &cfg, 0, None, &stream.params, None).encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::decode(b"NOTACKPT").is_err());
    }

    #[test]
    fn foreign_architecture_rejected() {
        let cfg = config();
        let stream = build_stream(&cfg.model, Part::Legs).unwrap();
        let mut ckpt = Checkpoint::new(Part::Hands, &cfg, 0, None, &stream.params, None);
        ckpt.header.part = Part::Hands;
        assert!(ckpt.stream().is_err());
    }
}
