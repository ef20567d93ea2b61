//! Versioned JSON configuration. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profit::{BitPhase, BitSchedule};
use crate::quant::QuantMode;
use crate::tensor::kernels::Activation;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Depthwise,
    Dense,
}

/// One layer of a [`NetConfig`]. Convolutions are followed by batch
/// normalization (unless disabled) and the activation; dense layers pool any
/// spatial input first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDesc {
    pub kind: LayerKind,
    /// Output channels for `conv`; output features for `dense` (defaults to
    /// the class count). Ignored for `depthwise`.
    #[serde(default)]
    pub out_channels: Option<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub activation: Option<Activation>,
    #[serde(default = "yes")]
    pub quantized: bool,
    #[serde(default = "yes")]
    pub batch_norm: bool,
}

fn default_kernel() -> usize {
    3
}
fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}

impl LayerDesc {
    pub fn conv(out: usize, kernel: usize, stride: usize, act: Activation) -> Self {
        Self {
            kind: LayerKind::Conv,
            out_channels: Some(out),
            kernel,
            stride,
            activation: Some(act),
            quantized: true,
            batch_norm: true,
        }
    }

    pub fn depthwise(kernel: usize, stride: usize, act: Activation) -> Self {
        Self {
            kind: LayerKind::Depthwise,
            out_channels: None,
            kernel,
            stride,
            activation: Some(act),
            quantized: true,
            batch_norm: true,
        }
    }

    pub fn dense(out: usize) -> Self {
        Self {
            kind: LayerKind::Dense,
            out_channels: Some(out),
            kernel: 1,
            stride: 1,
            activation: None,
            quantized: true,
            batch_norm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// `[channels, height, width]` of one input image.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub blocks: Vec<LayerDesc>,
}

impl NetConfig {
    /// Stem convolution, `blocks` depthwise-separable blocks (depthwise 3×3
    /// then pointwise 1×1), global pooling and a dense classifier.
    pub fn micro_mobilenet(input_shape: [usize; 3], num_classes: usize, stem: usize, blocks: &[(usize, usize)], act: Activation) -> Self {
        let mut layers = vec![LayerDesc::conv(stem, 3, 1, act)];
        for &(out, stride) in blocks {
            layers.push(LayerDesc::depthwise(3, stride, act));
            layers.push(LayerDesc::conv(out, 1, 1, act));
        }
        layers.push(LayerDesc::dense(num_classes));
        Self {
            input_shape,
            num_classes,
            blocks: layers,
        }
    }

    /// The default desk-scale network: 8 quantized layers on 1×16×16 inputs.
    pub fn default_micro(num_classes: usize) -> Self {
        Self::micro_mobilenet([1, 16, 16], num_classes, 8, &[(16, 2), (16, 1), (32, 2)], Activation::HSwish)
    }

    /// Same topology with every channel count multiplied by `factor`.
    pub fn widened(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for b in &mut out.blocks {
            if b.kind == LayerKind::Conv {
                if let Some(c) = b.out_channels.as_mut() {
                    *c = ((*c as f64 * factor).round() as usize).max(1);
                }
            }
        }
        out
    }

    /// Shapes `[C, H, W]` after every block, or an error when the chain is
    /// inconsistent.
    pub fn layer_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shape = self.input_shape;
        let mut out = Vec::with_capacity(self.blocks.len());
        if self.blocks.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let [c, h, w] = shape;
            shape = match b.kind {
                LayerKind::Conv | LayerKind::Depthwise => {
                    if b.kernel == 0 || b.stride == 0 {
                        return Err(Error::Config(format!("block {i}: kernel and stride must be positive")));
                    }
                    let pad = b.kernel / 2;
                    if h + 2 * pad < b.kernel || w + 2 * pad < b.kernel {
                        return Err(Error::Config(format!("block {i}: kernel larger than input {h}x{w}")));
                    }
                    let ho = (h + 2 * pad - b.kernel) / b.stride + 1;
                    let wo = (w + 2 * pad - b.kernel) / b.stride + 1;
                    let co = match b.kind {
                        LayerKind::Depthwise => c,
                        _ => b
                            .out_channels
                            .ok_or_else(|| Error::Config(format!("block {i}: conv needs out_channels")))?,
                    };
                    [co, ho, wo]
                }
                LayerKind::Dense => [b.out_channels.unwrap_or(self.num_classes), 1, 1],
            };
            out.push(shape);
        }
        let last = self.blocks.last().expect("non-empty");
        if last.kind != LayerKind::Dense || shape[0] != self.num_classes {
            return Err(Error::Config(format!(
                "network must end in a dense layer with {} outputs",
                self.num_classes
            )));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.layer_shapes().map(|_| ())
    }

    pub fn quantized_layer_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.quantized).count()
    }
}

/// Which quantizer guards the input of each quantized layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActQuantKind {
    Duq,
    DuqSymmetric,
    DuqNonNegative,
    Pact,
}

impl ActQuantKind {
    pub fn duq_mode(self) -> Option<QuantMode> {
        match self {
            ActQuantKind::Duq => Some(QuantMode::Asymmetric),
            ActQuantKind::DuqSymmetric => Some(QuantMode::Symmetric),
            ActQuantKind::DuqNonNegative => Some(QuantMode::NonNegative),
            ActQuantKind::Pact => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    #[serde(default = "default_act_quant")]
    pub activation: ActQuantKind,
    /// Pad convolutions that consume h-swish with its minimum and pin the
    /// bottom activation level there.
    #[serde(default = "yes")]
    pub negpad: bool,
    /// Learn weight-quantizer parameters (otherwise they are re-derived from
    /// the weight statistics on every forward pass).
    #[serde(default = "yes")]
    pub weight_learned: bool,
    #[serde(default)]
    pub first_layer_input_quantized: bool,
    /// Learning-rate multiplier for quantizer parameters.
    #[serde(default = "unit")]
    pub quant_lr_scale: f64,
}

fn default_act_quant() -> ActQuantKind {
    ActQuantKind::Duq
}
fn unit() -> f64 {
    1.0
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            activation: ActQuantKind::Duq,
            negpad: true,
            weight_learned: true,
            first_layer_input_quantized: false,
            quant_lr_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfitConfig {
    /// When false the same stage structure runs without freezing, giving an
    /// equal-budget control.
    #[serde(default = "yes")]
    pub enabled: bool,
    pub n_profit: usize,
    pub epochs_per_stage: usize,
    pub bn_epochs: usize,
    /// Training iterations over which the AIWQ metric is sampled before the
    /// stages start.
    #[serde(default = "default_aiwq_iters")]
    pub aiwq_iters: usize,
}

fn default_aiwq_iters() -> usize {
    20
}

impl ProfitConfig {
    pub fn total_epochs(&self) -> usize {
        self.n_profit * self.epochs_per_stage + self.bn_epochs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrConfig {
    pub base_lr: f64,
    /// Warmup length in epochs at the start of every phase.
    #[serde(default)]
    pub warmup_epochs: f64,
    /// Base learning rate of the full-precision phase; defaults to `base_lr`.
    #[serde(default)]
    pub fp_base_lr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    /// Full-precision teacher; trained by the harness when absent.
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
    #[serde(default = "two")]
    pub teacher_width: f64,
    #[serde(default = "default_teacher_epochs")]
    pub teacher_epochs: usize,
    pub temperature: f64,
    pub weight: f64,
}

fn two() -> f64 {
    2.0
}
fn default_teacher_epochs() -> usize {
    6
}

/// Procedural dataset parameters; see [`super::data::synth_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    pub num_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(default = "default_side")]
    pub side: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_shift")]
    pub max_shift: usize,
}

fn default_side() -> usize {
    16
}
fn default_noise() -> f64 {
    0.45
}
fn default_shift() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synth(SynthConfig),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub batch_size: usize,
    pub net: NetConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub fp_epochs: usize,
    /// Start from this checkpoint instead of a fresh initialization.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub bit_schedule: BitSchedule,
    #[serde(default)]
    pub quant: QuantConfig,
    #[serde(default)]
    pub profit: Option<ProfitConfig>,
    pub lr: LrConfig,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default)]
    pub kd: Option<KdConfig>,
    /// Evaluate the test split after every epoch (for the metrics log).
    #[serde(default = "yes")]
    pub eval_every_epoch: bool,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_ema() -> f64 {
    0.9997
}
fn default_bn_momentum() -> f64 {
    0.1
}

impl RunConfig {
    /// A small full-precision-then-quantize run on the synthetic dataset.
    pub fn desk_default(seed: u64) -> Self {
        Self {
            version: CONFIG_VERSION,
            seed,
            batch_size: 32,
            net: NetConfig::default_micro(10),
            data: DataConfig::Synth(SynthConfig {
                seed: None,
                num_classes: 10,
                n_train: 4000,
                n_test: 1000,
                side: default_side(),
                noise: default_noise(),
                max_shift: default_shift(),
            }),
            fp_epochs: 5,
            init_checkpoint: None,
            bit_schedule: BitSchedule {
                phases: vec![BitPhase::new(8, Some(8), 2), BitPhase::new(5, Some(5), 2), BitPhase::new(4, Some(4), 2)],
            },
            quant: QuantConfig::default(),
            profit: Some(ProfitConfig {
                enabled: true,
                n_profit: 3,
                epochs_per_stage: 2,
                bn_epochs: 1,
                aiwq_iters: 20,
            }),
            lr: LrConfig {
                base_lr: 0.05,
                warmup_epochs: 0.5,
                fp_base_lr: Some(0.1),
            },
            momentum: default_momentum(),
            weight_decay: 0.0,
            ema_decay: 0.95,
            bn_momentum: default_bn_momentum(),
            kd: None,
            eval_every_epoch: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.net.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be ≥ 2".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("ema_decay must lie in (0, 1), got {}", self.ema_decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config("bn_momentum must lie in (0, 1]".into()));
        }
        if let Some(kd) = &self.kd {
            if !(0.0..=1.0).contains(&kd.weight) {
                return Err(Error::Config(format!("kd.weight must lie in [0, 1], got {}", kd.weight)));
            }
            if kd.temperature <= 0.0 {
                return Err(Error::Config("kd.temperature must be positive".into()));
            }
        }
        self.bit_schedule.validate()?;
        if let Some(p) = &self.profit {
            let layers = self.net.quantized_layer_count();
            if p.n_profit == 0 || p.n_profit > layers {
                return Err(Error::Config(format!(
                    "profit.n_profit must lie in 1..={layers}, got {}",
                    p.n_profit
                )));
            }
            if self.bit_schedule.phases.is_empty() {
                return Err(Error::Config("PROFIT needs a quantized bit schedule".into()));
            }
        }
        Ok(())
    }

    /// Total epochs that update weights.
    pub fn epoch_budget(&self) -> usize {
        self.fp_epochs
            + self.bit_schedule.total_epochs()
            + self.profit.as_ref().map_or(0, ProfitConfig::total_epochs)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = RunConfig::desk_default(3);
        cfg.validate().unwrap();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::desk_default(0).to_json()).unwrap();
        v["learning_rate"] = 0.1.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::desk_default(0).to_json()).unwrap();
        v["lr"]["base_lr_typo"] = 0.1.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn version_and_ranges_checked() {
        let mut cfg = RunConfig::desk_default(0);
        cfg.version = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk_default(0);
        cfg.ema_decay = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk_default(0);
        cfg.profit.as_mut().unwrap().n_profit = 9;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn micro_shapes() {
        let net = NetConfig::default_micro(10);
        let shapes = net.layer_shapes().unwrap();
        assert_eq!(shapes[0], [8, 16, 16]);
        assert_eq!(shapes[1], [8, 8, 8]);
        assert_eq!(*shapes.last().unwrap(), [10, 1, 1]);
        assert_eq!(net.quantized_layer_count(), 8);
        assert_eq!(net.widened(2.0).layer_shapes().unwrap()[0], [16, 16, 16]);
    }

    #[test]
    fn inconsistent_net_rejected() {
        let mut net = NetConfig::default_micro(10);
        net.blocks.pop();
        assert!(net.validate().is_err());
    }
}
