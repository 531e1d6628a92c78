//! Checkpoint directories: `manifest.json` describing every tensor plus
//! `tensors.bin`, a concatenation of little-endian `f32` payloads.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{self, IonNormalizer};
use crate::error::{Error, Result};
use crate::model::{ConditionerConfig, DenoiserConfig, StainModel};
use crate::nn::Parameters;
use crate::rng::Seed;
use crate::schedule::ScheduleConfig;
use crate::training::{OptimizerState, TrainConfig};

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "tensors.bin";
const FORMAT: &str = "ionstain-checkpoint/1";

/// Everything except the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Completed optimizer steps.
    pub step: u64,
    pub seed: Seed,
    pub schedule: ScheduleConfig,
    pub conditioner: ConditionerConfig,
    pub denoiser: DenoiserConfig,
    pub training: TrainConfig,
    /// Channel subset and standardization applied to the ion stacks.
    pub normalizer: IonNormalizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the blob.
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    meta: CheckpointMeta,
    tensors: Vec<TensorRecord>,
    blob_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub meta: CheckpointMeta,
    pub params: Parameters,
    pub optimizer: OptimizerState,
}

impl ModelCheckpoint {
    pub fn model(&self) -> Result<StainModel> {
        let m = StainModel::new(&self.meta.conditioner, &self.meta.denoiser)?;
        m.check_params(&self.params)?;
        Ok(m)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        dataio::ensure_dir(dir)?;
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        let groups = [("", &self.params), ("opt.m/", &self.optimizer.m), ("opt.v/", &self.optimizer.v)];
        for (prefix, set) in groups {
            for e in set.entries() {
                tensors.push(TensorRecord {
                    name: format!("{prefix}{}", e.name),
                    shape: e.shape.clone(),
                    dtype: "f32".into(),
                    offset: blob.len() as u64,
                });
                e.data.iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes()));
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            meta: CheckpointMeta {
                step: self.optimizer.step,
                ..self.meta.clone()
            },
            tensors,
            blob_bytes: blob.len() as u64,
        };
        let blob_path = dir.join(BLOB);
        fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
        dataio::write_json(dir.join(MANIFEST), &manifest)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = dataio::read_json(dir.join(MANIFEST))?;
        if manifest.format != FORMAT {
            return Err(Error::invalid(format!("unknown checkpoint format {}", manifest.format)));
        }
        let blob_path = dir.join(BLOB);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        if blob.len() as u64 != manifest.blob_bytes {
            return Err(Error::parse(blob.len(), "checkpoint blob has the wrong length"));
        }
        let (mut params, mut m, mut v) = (Parameters::new(), Parameters::new(), Parameters::new());
        for rec in &manifest.tensors {
            if rec.dtype != "f32" {
                return Err(Error::invalid(format!("tensor {} has dtype {}", rec.name, rec.dtype)));
            }
            let n: usize = rec.shape.iter().product();
            let start = rec.offset as usize;
            let bytes = blob
                .get(start..start + 4 * n)
                .ok_or_else(|| Error::parse(start, format!("tensor {} overruns the blob", rec.name)))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let (set, name) = if let Some(n) = rec.name.strip_prefix("opt.m/") {
                (&mut m, n)
            } else if let Some(n) = rec.name.strip_prefix("opt.v/") {
                (&mut v, n)
            } else {
                (&mut params, rec.name.as_str())
            };
            set.push(name, rec.shape.clone(), data)?;
        }
        if !params.same_layout(&m) || !params.same_layout(&v) {
            return Err(Error::invalid("optimizer moments do not mirror the parameters"));
        }
        let ckpt = Self {
            optimizer: OptimizerState {
                step: manifest.meta.step,
                m,
                v,
            },
            meta: manifest.meta,
            params,
        };
        ckpt.model()?;
        Ok(ckpt)
    }
}
