//! Self-describing checkpoint container.
//!
//! Layout: the 8-byte magic `QATKCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then every
//! tensor as little-endian `f64` values at the offsets the header lists.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::model::{Layer, Network};
use super::trainer::{EpochLog, Trainer};
use crate::error::{Error, Result};
use crate::tensor::optim::{EmaState, SgdState};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"QATKCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte seed.
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed RNG state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Optimizer and loop state needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub sgd: SgdState,
    pub ema: EmaState,
    pub rng: RngState,
    pub step: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub quant_lr_scale: f64,
    pub eval_every_epoch: bool,
    pub history: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub trainer: Option<TrainerState>,
    pub run_config: Option<RunConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainerHeader {
    lr: f64,
    momentum: f64,
    sgd_weight_decay: f64,
    ema_decay: f64,
    rng: RngState,
    step: u64,
    batch_size: usize,
    weight_decay: f64,
    quant_lr_scale: f64,
    eval_every_epoch: bool,
    history: Vec<EpochLog>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    network: Network,
    trainer: Option<TrainerHeader>,
    run_config: Option<RunConfig>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn from_network(net: &Network) -> Self {
        Self {
            network: net.clone(),
            trainer: None,
            run_config: None,
        }
    }

    pub fn from_trainer(trainer: &Trainer, run_config: Option<&RunConfig>) -> Self {
        Self {
            network: trainer.net.clone(),
            trainer: Some(TrainerState {
                sgd: trainer.sgd.clone(),
                ema: trainer.ema.clone(),
                rng: RngState::capture(&trainer.rng),
                step: trainer.step,
                batch_size: trainer.batch_size,
                weight_decay: trainer.weight_decay,
                quant_lr_scale: trainer.quant_lr_scale,
                eval_every_epoch: trainer.eval_every_epoch,
                history: trainer.history.clone(),
            }),
            run_config: run_config.cloned(),
        }
    }

    /// Rebuilds a trainer that continues exactly where the saved one stopped
    /// (the distillation teacher is not part of the checkpoint).
    pub fn into_trainer(self) -> Result<Trainer> {
        let t = self
            .trainer
            .ok_or_else(|| Error::Checkpoint("checkpoint holds no training state".into()))?;
        Ok(Trainer {
            net: self.network,
            sgd: t.sgd,
            ema: t.ema,
            rng: t.rng.restore()?,
            step: t.step,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            quant_lr_scale: t.quant_lr_scale,
            eval_every_epoch: t.eval_every_epoch,
            teacher: None,
            history: t.history,
        })
    }

    /// The network to evaluate: live parameters or EMA shadows.
    pub fn eval_network(&self, use_ema: bool) -> Result<Network> {
        if !use_ema {
            return Ok(self.network.clone());
        }
        let t = self
            .trainer
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint holds no EMA shadows".into()))?;
        self.network.with_param_values(&t.ema.shadow)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload: Vec<f64> = Vec::new();
        let mut entries = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f64]| {
            entries.push(TensorEntry {
                name,
                shape,
                offset: payload.len(),
            });
            payload.extend_from_slice(data);
        };
        let net = &self.network;
        for (p, m) in net.params.iter().zip(&net.meta) {
            push(format!("param/{}", m.name), p.shape().to_vec(), p.data());
        }
        for n in net.norm_layers() {
            let c = n.running.mean.len();
            push(format!("running/{}/mean", n.name), vec![c], &n.running.mean);
            push(format!("running/{}/var", n.name), vec![c], &n.running.var);
        }
        if let Some(t) = &self.trainer {
            for (s, m) in t.ema.shadow.iter().zip(&net.meta) {
                push(format!("ema/{}", m.name), s.shape().to_vec(), s.data());
            }
            for (v, m) in t.sgd.velocity.iter().zip(&net.meta) {
                push(format!("velocity/{}", m.name), vec![v.len()], v);
            }
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            network: net.clone(),
            trainer: self.trainer.as_ref().map(|t| TrainerHeader {
                lr: t.sgd.lr,
                momentum: t.sgd.momentum,
                sgd_weight_decay: t.sgd.weight_decay,
                ema_decay: t.ema.decay,
                rng: t.rng.clone(),
                step: t.step,
                batch_size: t.batch_size,
                weight_decay: t.weight_decay,
                quant_lr_scale: t.quant_lr_scale,
                eval_every_epoch: t.eval_every_epoch,
                history: t.history.clone(),
            }),
            run_config: self.run_config.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let raw = &body[hlen..];
        if !raw.len().is_multiple_of(8) {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let payload: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut tensors = std::collections::HashMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset.checked_add(n).filter(|&end| end <= payload.len()).ok_or_else(|| bad("tensor extends past the payload"))?;
            tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), payload[e.offset..end].to_vec())?);
        }
        let mut take = |name: String| tensors.remove(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")));
        let mut network = header.network;
        network.reindex();
        let names: Vec<String> = network.meta.iter().map(|m| m.name.clone()).collect();
        network.params = names.iter().map(|n| take(format!("param/{n}"))).collect::<Result<_>>()?;
        for layer in &mut network.layers {
            if let Layer::Norm(n) = layer {
                n.running.mean = take(format!("running/{}/mean", n.name))?.into_data();
                n.running.var = take(format!("running/{}/var", n.name))?.into_data();
            }
        }
        let trainer = match header.trainer {
            Some(h) => {
                let shadow = names.iter().map(|n| take(format!("ema/{n}"))).collect::<Result<Vec<_>>>()?;
                let velocity = names
                    .iter()
                    .map(|n| take(format!("velocity/{n}")).map(Tensor::into_data))
                    .collect::<Result<Vec<_>>>()?;
                Some(TrainerState {
                    sgd: SgdState {
                        lr: h.lr,
                        momentum: h.momentum,
                        weight_decay: h.sgd_weight_decay,
                        velocity,
                    },
                    ema: EmaState {
                        decay: h.ema_decay,
                        shadow,
                    },
                    rng: h.rng,
                    step: h.step,
                    batch_size: h.batch_size,
                    weight_decay: h.weight_decay,
                    quant_lr_scale: h.quant_lr_scale,
                    eval_every_epoch: h.eval_every_epoch,
                    history: h.history,
                })
            }
            None => None,
        };
        Ok(Self {
            network,
            trainer,
            run_config: header.run_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
