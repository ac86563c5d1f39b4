use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{KvpFormer, ModelConfig, ModelError};
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 5] = b"KVPF1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("checkpoint config: {0}")]
    Config(String),
    #[error("tensor {name}: {message}")]
    Tensor { name: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Model and training configuration, as stored in checkpoints and read
/// from `--config` files. Every field is optional in JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Container layout, all integers little-endian:
///
/// ```text
/// "KVPF1" | u32 len | config JSON | u32 count |
///   count x (u32 len | name | u32 rank | rank x u32 dim | f32 values)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &KvpFormer, train: &TrainConfig) -> Self {
        Checkpoint {
            config: RunConfig {
                model: model.config().clone(),
                train: train.clone(),
            },
            tensors: model
                .params()
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    values: p.tensor.values().iter().map(|&v| v as f32).collect(),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<KvpFormer, CheckpointError> {
        let mut model = KvpFormer::new(self.config.model, 0.0, 0)?;
        model.load_tensors(
            self.tensors
                .into_iter()
                .map(|t| (t.name, t.shape, t.values.into_iter().map(f64::from).collect())),
        )?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        let mut out = Vec::with_capacity(config.len() + 64);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, config.len());
        out.extend_from_slice(&config);
        put_u32(&mut out, self.tensors.len());
        for t in &self.tensors {
            put_u32(&mut out, t.name.len());
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.shape.len());
            for &d in &t.shape {
                put_u32(&mut out, d);
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let len = r.u32("config length")?;
        let config: RunConfig =
            serde_json::from_slice(r.take(len, "config")?).map_err(|e| CheckpointError::Config(e.to_string()))?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32("tensor name length")?;
            let name =
                String::from_utf8(r.take(len, "tensor name")?.to_vec()).map_err(|_| CheckpointError::Tensor {
                    name: "?".into(),
                    message: "name is not UTF-8".into(),
                })?;
            let rank = r.u32("tensor rank")?;
            let shape = (0..rank)
                .map(|_| r.u32("tensor shape"))
                .collect::<Result<Vec<_>, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| CheckpointError::Tensor {
                    name: name.clone(),
                    message: format!("shape {shape:?} overflows"),
                })?;
            let values = r
                .take(numel * 4, "tensor values")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field fits in u32");
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}
