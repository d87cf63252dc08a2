//! `VCKPT1` checkpoints: JSON metadata followed by named tensors encoded as vvol blobs.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::{OptimizerState, PlateauState};
use super::runner::{BestModel, EpochRecord, TrainState};
use crate::arch::{NetworkSpec, Preset};
use crate::data::{decode_volume, encode_volume, DatasetSplit, Task};
use crate::error::{Error, Result};
use crate::model::{Network, ParamStore};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8] = b"VCKPT1\n";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub version: u32,
    pub preset: Preset,
    pub task: Task,
    pub width: Option<usize>,
    pub classes: usize,
    pub keep_prob: f64,
    /// Completed epochs.
    pub epoch: usize,
    pub config_digest: String,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub scheduler: Option<PlateauState>,
    pub split: Option<DatasetSplit>,
    pub best_epoch: Option<usize>,
    pub best_loss: Option<f64>,
}

/// Parameters plus, for resumable checkpoints, optimizer and best-model state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState>,
    pub best: Option<ParamStore<f32>>,
}

impl Checkpoint {
    /// Final-model checkpoint: parameters only.
    pub fn model(config: &TrainConfig, params: ParamStore<f32>, history: &[EpochRecord], best_epoch: Option<usize>) -> Self {
        Checkpoint {
            meta: meta(config, history.len(), history.to_vec(), None, None, best_epoch, None),
            params,
            optimizer: None,
            best: None,
        }
    }

    /// Resumable checkpoint of a training state.
    pub fn resumable(config: &TrainConfig, state: &TrainState) -> Self {
        Checkpoint {
            meta: meta(
                config,
                state.epoch,
                state.history.clone(),
                Some(state.scheduler),
                Some(state.split.clone()),
                state.best.as_ref().map(|b| b.epoch),
                state.best.as_ref().map(|b| b.loss),
            ),
            params: state.params.clone(),
            optimizer: Some(state.optimizer.clone()),
            best: state.best.as_ref().map(|b| b.params.clone()),
        }
    }

    pub fn spec(&self) -> Result<NetworkSpec> {
        self.meta
            .preset
            .build(self.meta.classes, self.meta.width, self.meta.keep_prob)
    }

    /// A network of the checkpoint's preset carrying its parameters.
    pub fn network(&self) -> Result<Network> {
        let mut net = Network::new(self.spec()?)?;
        net.set_params(self.params.clone())?;
        Ok(net)
    }

    /// Rebuild the training state; fails for parameter-only checkpoints.
    pub fn train_state(&self) -> Result<TrainState> {
        let missing = || Error::Format("checkpoint holds no resumable training state".into());
        let best = match (&self.best, self.meta.best_epoch, self.meta.best_loss) {
            (Some(params), Some(epoch), Some(loss)) => Some(BestModel {
                epoch,
                loss,
                params: params.clone(),
            }),
            _ => None,
        };
        Ok(TrainState {
            epoch: self.meta.epoch,
            params: self.params.clone(),
            optimizer: self.optimizer.clone().ok_or_else(missing)?,
            scheduler: self.meta.scheduler.ok_or_else(missing)?,
            split: self.meta.split.clone().ok_or_else(missing)?,
            history: self.meta.history.clone(),
            best,
        })
    }
}

fn meta(
    config: &TrainConfig,
    epoch: usize,
    history: Vec<EpochRecord>,
    scheduler: Option<PlateauState>,
    split: Option<DatasetSplit>,
    best_epoch: Option<usize>,
    best_loss: Option<f64>,
) -> CheckpointMeta {
    CheckpointMeta {
        version: CKPT_VERSION,
        preset: config.preset,
        task: config.task,
        width: config.width,
        classes: config.task.classes().len(),
        keep_prob: config.keep_prob,
        epoch,
        config_digest: config.digest(),
        config: config.clone(),
        history,
        scheduler,
        split,
        best_epoch,
        best_loss,
    }
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    let blob = encode_volume(t);
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(&blob);
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let json = serde_json::to_vec(&ckpt.meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for p in ckpt.params.iter() {
        tensors.push((format!("param/{}", p.name), &p.value));
    }
    if let Some(opt) = &ckpt.optimizer {
        for (p, s) in ckpt.params.iter().zip(&opt.accum) {
            tensors.push((format!("accum/{}", p.name), s));
        }
    }
    if let Some(best) = &ckpt.best {
        for p in best.iter() {
            tensors.push((format!("best/{}", p.name), &p.value));
        }
    }
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        push_tensor(&mut out, &name, t);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format("length overflows".into()))
    }
}

/// Copy tensors named `prefix + param name` into a store shaped like `template`.
fn fill(template: &ParamStore<f32>, tensors: &mut HashMap<String, Tensor>, prefix: &str) -> Result<ParamStore<f32>> {
    let mut store = template.clone();
    for p in store.iter_mut() {
        let key = format!("{prefix}{}", p.name);
        let t = tensors
            .remove(&key)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {key}")))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Format(format!(
                "tensor {key} has shape {:?}, network expects {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    Ok(store)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader {
        bytes: bytes
            .strip_prefix(CKPT_MAGIC)
            .ok_or_else(|| Error::Format("missing VCKPT1 magic".into()))?,
    };
    let len = r.u64()?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format(format!("bad checkpoint metadata: {e}")))?;
    if meta.version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", meta.version)));
    }
    let count = r.u32()?;
    let mut tensors = HashMap::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let blob_len = r.u64()?;
        let t = decode_volume(r.take(blob_len)?)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    if !r.bytes.is_empty() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let spec = meta
        .preset
        .build(meta.classes, meta.width, meta.keep_prob)
        .map_err(|e| Error::Format(format!("checkpoint preset: {e}")))?;
    let template = Network::<f32>::new(spec)?.params;
    let params = fill(&template, &mut tensors, "param/")?;
    let optimizer = if tensors.keys().any(|k| k.starts_with("accum/")) {
        let accum = fill(&template, &mut tensors, "accum/")?;
        let lr = meta.scheduler.map(|s| s.lr).unwrap_or(0.0);
        Some(OptimizerState {
            lr,
            accum: accum.iter().map(|p| p.value.clone()).collect(),
        })
    } else {
        None
    };
    let best = if tensors.keys().any(|k| k.starts_with("best/")) {
        Some(fill(&template, &mut tensors, "best/")?)
    } else {
        None
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        meta,
        params,
        optimizer,
        best,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, encode_checkpoint(ckpt)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
