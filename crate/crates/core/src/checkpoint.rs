//! Single-file checkpoints.
//!
//! Layout: `b"LVF1"`, a little-endian `u64` header length, the UTF-8 JSON
//! header, then raw little-endian `f64` payloads in manifest order. Offsets in
//! the manifest are bytes from the start of the payload section.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bottleneck::InjectorConfig;
use crate::corpus::Tokenizer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::{Adam, TrainConfig, Trainer};
use crate::vae::{LmVae, ModelConfig};

pub const MAGIC: &[u8; 4] = b"LVF1";
pub const FORMAT_VERSION: u32 = 1;

const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    injector: InjectorConfig,
    train: Option<TrainConfig>,
    tokenizer: Tokenizer,
    step: usize,
    epoch: usize,
    n_train: usize,
    pretrained: bool,
    rng: Option<ChaCha8Rng>,
    adam: Option<Adam>,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to rebuild a model and, optionally, resume training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub tokenizer: Tokenizer,
    pub step: usize,
    pub epoch: usize,
    pub n_train: usize,
    pub pretrained: bool,
    pub rng: Option<ChaCha8Rng>,
    pub adam: Option<Adam>,
    /// Model parameters in store order.
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot of an untrained or inference-only model.
    pub fn from_model(model: &LmVae) -> Self {
        Checkpoint {
            model: model.config().clone(),
            train: None,
            tokenizer: model.tokenizer().clone(),
            step: 0,
            epoch: 0,
            n_train: 0,
            pretrained: false,
            rng: None,
            adam: None,
            params: params_of(model),
        }
    }

    /// Snapshot of a trainer, including optimiser moments and RNG state.
    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint {
            train: Some(t.config().clone()),
            step: t.step,
            epoch: t.epoch,
            n_train: t.n_train(),
            pretrained: t.pretrained,
            rng: Some(t.rng.clone()),
            adam: Some(t.adam.clone()),
            ..Checkpoint::from_model(&t.model)
        }
    }

    /// Rebuild the model; tensor shapes must agree with the stored configs.
    pub fn to_model(&self) -> Result<LmVae> {
        let mut m = LmVae::new(self.model.clone(), self.tokenizer.clone(), 0)?;
        m.load_params(self.params.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(m)
    }

    /// Rebuild a trainer positioned exactly where the snapshot was taken.
    pub fn to_trainer(&self) -> Result<Trainer> {
        let (Some(cfg), Some(rng), Some(adam)) = (&self.train, &self.rng, &self.adam) else {
            return Err(Error::Config("checkpoint holds no training state".into()));
        };
        Trainer::restore(
            self.to_model()?,
            cfg.clone(),
            self.n_train,
            adam.clone(),
            self.step,
            self.epoch,
            self.pretrained,
            rng.clone(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut push = |name: String, t: &Tensor| {
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            payload.extend(t.to_le_bytes());
        };
        for (name, t) in &self.params {
            push(name.clone(), t);
        }
        if let Some(adam) = &self.adam {
            for (name, (m, v)) in &adam.moments {
                push(format!("{MOMENT_M}{name}"), m);
                push(format!("{MOMENT_V}{name}"), v);
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            injector: self.model.injector(),
            model: self.model.clone(),
            train: self.train.clone(),
            tokenizer: self.tokenizer.clone(),
            step: self.step,
            epoch: self.epoch,
            n_train: self.n_train,
            pretrained: self.pretrained,
            rng: self.rng.clone(),
            adam: self.adam.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing LVF1 magic".into()));
        }
        let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let end = 12u64
            .checked_add(len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| Error::Format("header length runs past end of file".into()))? as usize;
        let raw: serde_json::Value =
            serde_json::from_slice(&bytes[12..end]).map_err(|e| Error::Format(format!("header: {e}")))?;
        let version = raw
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format("header has no format_version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(Error::Version {
                found: version as u32,
                expected: FORMAT_VERSION,
            });
        }
        let header: Header = serde_json::from_value(raw).map_err(|e| Error::Format(format!("header: {e}")))?;
        header.model.validate()?;
        if header.injector != header.model.injector() {
            return Err(Error::Config("injector config disagrees with model config".into()));
        }
        let payload = &bytes[end..];
        let mut expected_offset = 0u64;
        let mut params = Vec::new();
        let mut adam = header.adam.clone();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let size = n as u64 * 8;
            if e.offset != expected_offset || e.offset + size > payload.len() as u64 {
                return Err(Error::Format(format!("tensor {} lies outside the payload", e.name)));
            }
            let data = payload[e.offset as usize..(e.offset + size) as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            expected_offset += size;
            let t = Tensor::new(e.shape.clone(), data)?;
            if let Some(name) = e.name.strip_prefix(MOMENT_M) {
                let a = adam.as_mut().ok_or_else(|| Error::Format("optimiser tensor without optimiser".into()))?;
                a.moments.entry(name.to_string()).or_insert_with(|| (Tensor::zeros(&[0]), Tensor::zeros(&[0]))).0 = t;
            } else if let Some(name) = e.name.strip_prefix(MOMENT_V) {
                let a = adam.as_mut().ok_or_else(|| Error::Format("optimiser tensor without optimiser".into()))?;
                a.moments.entry(name.to_string()).or_insert_with(|| (Tensor::zeros(&[0]), Tensor::zeros(&[0]))).1 = t;
            } else {
                params.push((e.name.clone(), t));
            }
        }
        if expected_offset != payload.len() as u64 {
            return Err(Error::Format("trailing bytes after the last tensor".into()));
        }
        if let Some(a) = &adam {
            if a.moments.values().any(|(m, v)| m.shape() != v.shape()) {
                return Err(Error::Format("optimiser moments are incomplete".into()));
            }
        }
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            tokenizer: header.tokenizer,
            step: header.step,
            epoch: header.epoch,
            n_train: header.n_train,
            pretrained: header.pretrained,
            rng: header.rng,
            adam,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

fn params_of(model: &LmVae) -> Vec<(String, Tensor)> {
    model
        .store
        .iter()
        .map(|(_, p)| (p.name().to_string(), p.value().clone()))
        .collect()
}
