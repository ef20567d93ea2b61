//! Layer graph of the toy networks: weight layers with optional fake
//! quantizers, batch normalization, activations and pooling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{ActQuantKind, LayerKind, NetConfig, QuantConfig};
use crate::error::{Error, Result};
use crate::quant::{self, PactParams, QuantMode, QuantParams};
use crate::tensor::kernels::{self, Activation, ConvSpec, RunningStats, HSWISH_MIN};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    WeightQuant,
    ActQuant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub kind: ParamKind,
    /// Weight layer this parameter freezes with. Normalization parameters
    /// have no owner.
    pub owner: Option<usize>,
    pub frozen: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightOp {
    Conv(ConvSpec),
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightQuant {
    pub param: usize,
    pub n_lv: u32,
    pub enabled: bool,
    pub calibrated: bool,
    pub learned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputQuant {
    pub param: usize,
    pub kind: ActQuantKind,
    pub n_lv: u32,
    pub enabled: bool,
    pub calibrated: bool,
    /// Bottom output level held fixed (negative padding).
    pub pin_beta: Option<f64>,
}

impl InputQuant {
    fn template(&self) -> Option<QuantParams> {
        let mode = self.kind.duq_mode()?;
        Some(QuantParams {
            a: 0.0,
            b: 0.0,
            alpha: 0.0,
            beta: 0.0,
            n_lv: self.n_lv,
            mode,
            beta_pinned: self.pin_beta.is_some(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightLayer {
    pub id: usize,
    pub name: String,
    pub op: WeightOp,
    pub weight: usize,
    pub bias: Option<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Activation that produced this layer's input; `None` for the image.
    pub input_activation: Option<Activation>,
    pub weight_quant: Option<WeightQuant>,
    pub input_quant: Option<InputQuant>,
}

impl WeightLayer {
    pub fn is_quantized(&self) -> bool {
        self.weight_quant.is_some()
    }

    pub fn conv_spec(&self) -> Option<ConvSpec> {
        match self.op {
            WeightOp::Conv(s) => Some(s),
            WeightOp::Dense => None,
        }
    }

    pub fn is_depthwise(&self) -> bool {
        matches!(self.op, WeightOp::Conv(s) if s.groups > 1 && s.groups == self.in_channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormLayer {
    pub name: String,
    pub gamma: usize,
    pub beta: usize,
    pub eps: f64,
    pub momentum: f64,
    #[serde(skip)]
    pub running: RunningStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Weight(WeightLayer),
    Norm(NormLayer),
    Act(Activation),
    Pool,
}

/// Batch statistics observed by a normalization layer during a training
/// forward pass.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Tensors seen by one weight layer during a forward pass.
#[derive(Debug, Clone)]
pub struct LayerCapture {
    pub id: usize,
    /// Input before the activation quantizer.
    pub raw_input: Tensor,
    /// Input actually consumed by the convolution (after quantization).
    pub input: Tensor,
    /// Output before normalization.
    pub output: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOpts {
    /// Batch statistics in normalization layers (training mode).
    pub train: bool,
    pub capture: bool,
}

pub struct Forward {
    pub logits: Var,
    pub bn_stats: Vec<BnBatchStats>,
    pub captures: Vec<LayerCapture>,
}

pub const BN_EPS: f64 = 1e-5;

/// A feed-forward network built from a [`NetConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: NetConfig,
    pub layers: Vec<Layer>,
    pub meta: Vec<ParamMeta>,
    #[serde(skip)]
    pub params: Vec<Tensor>,
    /// Position in `layers` of each weight layer, indexed by layer id.
    weight_positions: Vec<usize>,
}

impl Network {
    /// Builds and He-initializes a network. Quantizers are created for layers
    /// marked `quantized` but start disabled (full precision).
    pub fn new(config: &NetConfig, quant: &QuantConfig, bn_momentum: f64, seed: u64) -> Result<Self> {
        let shapes = config.layer_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network {
            config: config.clone(),
            layers: Vec::new(),
            meta: Vec::new(),
            params: Vec::new(),
            weight_positions: Vec::new(),
        };
        let mut in_shape = config.input_shape;
        let mut in_act: Option<Activation> = None;
        let mut spatial = true;
        let (mut n_conv, mut n_dw, mut n_dense) = (0, 0, 0);
        for (bi, desc) in config.blocks.iter().enumerate() {
            let id = net.weight_positions.len();
            let [cin, _, _] = in_shape;
            let [cout, _, _] = shapes[bi];
            let name = match desc.kind {
                LayerKind::Conv => {
                    n_conv += 1;
                    let after_dw = bi > 0 && config.blocks[bi - 1].kind == LayerKind::Depthwise;
                    if id == 0 {
                        "stem".to_string()
                    } else if after_dw {
                        format!("pw{n_dw}")
                    } else {
                        format!("conv{n_conv}")
                    }
                }
                LayerKind::Depthwise => {
                    n_dw += 1;
                    format!("dw{n_dw}")
                }
                LayerKind::Dense => {
                    n_dense += 1;
                    if n_dense == 1 {
                        "fc".to_string()
                    } else {
                        format!("fc{n_dense}")
                    }
                }
            };
            let (op, wshape, fan_in) = match desc.kind {
                LayerKind::Conv | LayerKind::Depthwise => {
                    let groups = if desc.kind == LayerKind::Depthwise { cin } else { 1 };
                    let mut spec = ConvSpec::new(desc.stride, desc.kernel / 2).groups(groups);
                    if quant.negpad && in_act == Some(Activation::HSwish) && desc.quantized {
                        spec.pad_value = HSWISH_MIN;
                    }
                    let cin_g = cin / groups;
                    (
                        WeightOp::Conv(spec),
                        vec![cout, cin_g, desc.kernel, desc.kernel],
                        cin_g * desc.kernel * desc.kernel,
                    )
                }
                LayerKind::Dense => {
                    if spatial {
                        net.layers.push(Layer::Pool);
                        spatial = false;
                    }
                    (WeightOp::Dense, vec![cout, cin], cin)
                }
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            let n: usize = wshape.iter().product();
            let w = Tensor::new(wshape, (0..n).map(|_| normal.sample(&mut rng)).collect())?;
            let weight = net.add_param(format!("{name}.weight"), w, ParamKind::Weight, Some(id));
            let has_bn = desc.batch_norm && desc.kind != LayerKind::Dense;
            let bias = (!has_bn).then(|| net.add_param(format!("{name}.bias"), Tensor::zeros(&[cout]), ParamKind::Bias, Some(id)));
            let (weight_quant, input_quant) = if desc.quantized {
                let wq = net.add_param(format!("{name}.wq"), Tensor::zeros(&[4]), ParamKind::WeightQuant, Some(id));
                let input_quant = if id > 0 || quant.first_layer_input_quantized {
                    let (len, pin) = match quant.activation {
                        ActQuantKind::Pact => (1, None),
                        ActQuantKind::Duq if quant.negpad && in_act == Some(Activation::HSwish) => (4, Some(HSWISH_MIN)),
                        _ => (4, None),
                    };
                    let p = net.add_param(format!("{name}.aq"), Tensor::zeros(&[len]), ParamKind::ActQuant, Some(id));
                    Some(InputQuant {
                        param: p,
                        kind: quant.activation,
                        n_lv: 256,
                        enabled: false,
                        calibrated: false,
                        pin_beta: pin,
                    })
                } else {
                    None
                };
                (
                    Some(WeightQuant {
                        param: wq,
                        n_lv: 255,
                        enabled: false,
                        calibrated: false,
                        learned: quant.weight_learned,
                    }),
                    input_quant,
                )
            } else {
                (None, None)
            };
            net.weight_positions.push(net.layers.len());
            net.layers.push(Layer::Weight(WeightLayer {
                id,
                name: name.clone(),
                op,
                weight,
                bias,
                in_channels: cin,
                out_channels: cout,
                input_activation: in_act,
                weight_quant,
                input_quant,
            }));
            if has_bn {
                let gamma = net.add_param(format!("{name}.bn.gamma"), Tensor::full(&[cout], 1.0), ParamKind::Norm, None);
                let beta = net.add_param(format!("{name}.bn.beta"), Tensor::zeros(&[cout]), ParamKind::Norm, None);
                net.layers.push(Layer::Norm(NormLayer {
                    name: format!("{name}.bn"),
                    gamma,
                    beta,
                    eps: BN_EPS,
                    momentum: bn_momentum,
                    running: RunningStats::new(cout),
                }));
            }
            let act = desc.activation.unwrap_or(Activation::Identity);
            if act != Activation::Identity {
                net.layers.push(Layer::Act(act));
            }
            in_act = Some(act);
            in_shape = shapes[bi];
        }
        Ok(net)
    }

    fn add_param(&mut self, name: String, value: Tensor, kind: ParamKind, owner: Option<usize>) -> usize {
        self.params.push(value);
        self.meta.push(ParamMeta {
            name,
            kind,
            owner,
            frozen: false,
        });
        self.params.len() - 1
    }

    pub fn weight_layers(&self) -> impl Iterator<Item = &WeightLayer> {
        self.weight_positions.iter().map(|&p| match &self.layers[p] {
            Layer::Weight(w) => w,
            _ => unreachable!("weight position points at a weight layer"),
        })
    }

    pub fn weight_layer(&self, id: usize) -> Result<&WeightLayer> {
        let pos = *self.weight_positions.get(id).ok_or(Error::UnknownLayer(id))?;
        match &self.layers[pos] {
            Layer::Weight(w) => Ok(w),
            _ => unreachable!(),
        }
    }

    fn weight_layer_mut(&mut self, id: usize) -> Result<&mut WeightLayer> {
        let pos = *self.weight_positions.get(id).ok_or(Error::UnknownLayer(id))?;
        match &mut self.layers[pos] {
            Layer::Weight(w) => Ok(w),
            _ => unreachable!(),
        }
    }

    pub fn norm_layers(&self) -> impl Iterator<Item = &NormLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Norm(n) => Some(n),
            _ => None,
        })
    }

    /// Ids of layers carrying a weight quantizer, front to back.
    pub fn quantized_layer_ids(&self) -> Vec<usize> {
        self.weight_layers().filter(|l| l.is_quantized()).map(|l| l.id).collect()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.meta.iter().position(|m| m.name == name)
    }

    /// Replaces every parameter value (e.g. with EMA shadows).
    pub fn with_param_values(&self, values: &[Tensor]) -> Result<Network> {
        if values.len() != self.params.len() || values.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Shape("replacement parameters do not match the network".into()));
        }
        let mut out = self.clone();
        out.params = values.to_vec();
        Ok(out)
    }

    /// Enables quantizers with the given level counts. `None` disables that
    /// side (full precision). Learned quantizer state is kept; only
    /// quantizers never calibrated need [`calibrate`](Self::calibrate).
    pub fn set_levels(&mut self, weight_lv: Option<u32>, act_lv: Option<u32>) {
        for pos in self.weight_positions.clone() {
            if let Layer::Weight(l) = &mut self.layers[pos] {
                if let Some(wq) = &mut l.weight_quant {
                    wq.enabled = weight_lv.is_some();
                    if let Some(n) = weight_lv {
                        wq.n_lv = n;
                    }
                }
                if let Some(aq) = &mut l.input_quant {
                    aq.enabled = act_lv.is_some();
                    if let Some(n) = act_lv {
                        aq.n_lv = n;
                    }
                }
            }
        }
    }

    /// `2^w − 1` weight levels and `2^a` activation levels.
    pub fn set_bits(&mut self, weight_bits: Option<u32>, act_bits: Option<u32>) {
        self.set_levels(weight_bits.map(quant::weight_levels), act_bits.map(quant::activation_levels));
    }

    pub fn needs_calibration(&self) -> bool {
        self.weight_layers().any(|l| {
            l.weight_quant.as_ref().is_some_and(|q| q.enabled && !q.calibrated)
                || l.input_quant.as_ref().is_some_and(|q| q.enabled && !q.calibrated)
        })
    }

    /// Initializes enabled but uncalibrated quantizers: weight quantizers
    /// from the weight statistics, activation quantizers front to back from
    /// the range each one observes on `images`.
    pub fn calibrate(&mut self, images: &Tensor) -> Result<()> {
        for id in 0..self.weight_positions.len() {
            let l = self.weight_layer(id)?;
            if let Some(wq) = l.weight_quant.clone() {
                if wq.enabled && !wq.calibrated {
                    let q = quant::weight_quantizer_for(&self.params[l.weight], wq.n_lv)?;
                    self.params[wq.param] = Tensor::new(vec![4], q.raw().to_vec())?;
                    self.weight_layer_mut(id)?.weight_quant.as_mut().expect("present").calibrated = true;
                }
            }
        }
        loop {
            let next = self
                .weight_layers()
                .find(|l| l.input_quant.as_ref().is_some_and(|q| q.enabled && !q.calibrated))
                .map(|l| l.id);
            let Some(id) = next else { break };
            let mut tape = Tape::new();
            let vars = self.load(&mut tape, false);
            let x = tape.constant(images.clone());
            let fwd = self.forward(&mut tape, &vars, x, ForwardOpts { train: true, capture: true })?;
            let cap = fwd
                .captures
                .iter()
                .find(|c| c.id == id)
                .ok_or(Error::UnknownLayer(id))?;
            let (lo, hi) = (cap.raw_input.min(), cap.raw_input.max());
            let aq = self.weight_layer(id)?.input_quant.clone().expect("present");
            let value = match aq.kind.duq_mode() {
                Some(mode) => {
                    let q = match aq.pin_beta {
                        Some(m) => {
                            let span = (hi - m).max(1e-6);
                            QuantParams::from_scales(span, m, span, m, aq.n_lv, QuantMode::Asymmetric)?.pin_beta(m)
                        }
                        None => QuantParams::calibrated(lo, hi, aq.n_lv, mode)?,
                    };
                    q.raw().to_vec()
                }
                None => vec![PactParams::new(hi.max(1e-3), aq.n_lv)?.p],
            };
            self.params[aq.param] = Tensor::new(vec![value.len()], value)?;
            self.weight_layer_mut(id)?.input_quant.as_mut().expect("present").calibrated = true;
        }
        Ok(())
    }

    /// Effective weight-quantizer state of a layer.
    pub fn weight_quant_params(&self, id: usize) -> Result<Option<QuantParams>> {
        let l = self.weight_layer(id)?;
        let Some(wq) = &l.weight_quant else { return Ok(None) };
        if !wq.enabled {
            return Ok(None);
        }
        if wq.learned {
            let template = QuantParams {
                a: 0.0,
                b: 0.0,
                alpha: 0.0,
                beta: 0.0,
                n_lv: wq.n_lv,
                mode: QuantMode::Symmetric,
                beta_pinned: false,
            };
            Ok(Some(template.with_raw(self.params[wq.param].data())))
        } else {
            Ok(Some(quant::weight_quantizer_for(&self.params[l.weight], wq.n_lv)?))
        }
    }

    /// Activation-quantizer state of a layer's input, when it is DuQ.
    pub fn input_quant_params(&self, id: usize) -> Result<Option<QuantParams>> {
        let l = self.weight_layer(id)?;
        Ok(l.input_quant
            .as_ref()
            .filter(|q| q.enabled)
            .and_then(|q| q.template().map(|t| t.with_raw(self.params[q.param].data()))))
    }

    /// The weight the layer computes with (fake-quantized when enabled).
    pub fn effective_weight(&self, id: usize) -> Result<Tensor> {
        let l = self.weight_layer(id)?;
        let w = &self.params[l.weight];
        Ok(match self.weight_quant_params(id)? {
            Some(q) => quant::duq_forward(w, &q),
            None => w.clone(),
        })
    }

    /// Output of weight layer `id` (before normalization) for the given
    /// already-quantized input and weight.
    pub fn apply_weight_op(&self, id: usize, input: &Tensor, weight: &Tensor) -> Result<Tensor> {
        let l = self.weight_layer(id)?;
        let bias = l.bias.map(|b| &self.params[b]);
        match l.op {
            WeightOp::Conv(spec) => kernels::conv2d(input, weight, bias, &spec),
            WeightOp::Dense => kernels::dense(input, weight, bias),
        }
    }

    /// Puts every parameter on the tape; frozen ones as constants.
    pub fn load(&self, tape: &mut Tape, grads: bool) -> Vec<Var> {
        self.params
            .iter()
            .zip(&self.meta)
            .map(|(p, m)| tape.leaf(p.clone(), grads && !m.frozen))
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], input: Var, opts: ForwardOpts) -> Result<Forward> {
        let mut x = input;
        let mut bn_stats = Vec::new();
        let mut captures = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            x = match layer {
                Layer::Weight(l) => {
                    let raw = x;
                    if let Some(aq) = l.input_quant.as_ref().filter(|q| q.enabled) {
                        x = match aq.template() {
                            Some(t) => tape.duq(x, vars[aq.param], t)?,
                            None => tape.pact(x, vars[aq.param], aq.n_lv)?,
                        };
                    }
                    let mut w = vars[l.weight];
                    if let Some(wq) = l.weight_quant.as_ref().filter(|q| q.enabled) {
                        let q = self.weight_quant_params(l.id)?.expect("enabled");
                        let qv = if wq.learned {
                            vars[wq.param]
                        } else {
                            tape.constant(Tensor::new(vec![4], q.raw().to_vec())?)
                        };
                        w = tape.duq(w, qv, q)?;
                    }
                    let bias = l.bias.map(|b| vars[b]);
                    let out = match l.op {
                        WeightOp::Conv(spec) => tape.conv2d(x, w, bias, spec)?,
                        WeightOp::Dense => tape.dense(x, w, bias)?,
                    };
                    if opts.capture {
                        captures.push(LayerCapture {
                            id: l.id,
                            raw_input: tape.value(raw).clone(),
                            input: tape.value(x).clone(),
                            output: tape.value(out).clone(),
                        });
                    }
                    out
                }
                Layer::Norm(n) => {
                    if opts.train {
                        let (y, mean, var) = tape.batch_norm_train(x, vars[n.gamma], vars[n.beta], n.eps)?;
                        bn_stats.push(BnBatchStats { layer: li, mean, var });
                        y
                    } else {
                        tape.batch_norm_eval(x, vars[n.gamma], vars[n.beta], &n.running.mean, &n.running.var, n.eps)?
                    }
                }
                Layer::Act(a) => tape.activation(x, *a),
                Layer::Pool => tape.global_avg_pool(x)?,
            };
        }
        Ok(Forward {
            logits: x,
            bn_stats,
            captures,
        })
    }

    /// Folds training-mode batch statistics into the running statistics.
    pub fn apply_bn_stats(&mut self, stats: &[BnBatchStats]) {
        for s in stats {
            if let Layer::Norm(n) = &mut self.layers[s.layer] {
                let m = n.momentum;
                n.running.update(&s.mean, &s.var, m);
            }
        }
    }

    /// Evaluation-mode logits, computed in chunks of `chunk` images.
    pub fn predict(&self, images: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = images.shape()[0];
        let k = self.config.num_classes;
        let mut out = Vec::with_capacity(n * k);
        let chunk = chunk.max(1);
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let mut tape = Tape::new();
            let vars = self.load(&mut tape, false);
            let x = tape.constant(images.slice_outer(start, end));
            let fwd = self.forward(&mut tape, &vars, x, ForwardOpts { train: false, capture: false })?;
            out.extend_from_slice(tape.value(fwd.logits).data());
            start = end;
        }
        Tensor::new(vec![n, k], out)
    }

    /// Freezes every parameter owned by weight layer `id`; returns the
    /// indices of the parameters frozen.
    pub fn freeze_layer(&mut self, id: usize) -> Result<Vec<usize>> {
        self.weight_layer(id)?;
        let owned: Vec<usize> = (0..self.meta.len()).filter(|&i| self.meta[i].owner == Some(id)).collect();
        if owned.iter().all(|&i| self.meta[i].frozen) {
            return Err(Error::AlreadyFrozen(id));
        }
        for &i in &owned {
            self.meta[i].frozen = true;
        }
        Ok(owned)
    }

    pub fn is_layer_frozen(&self, id: usize) -> bool {
        self.meta.iter().filter(|m| m.owner == Some(id)).all(|m| m.frozen)
    }

    /// Freezes everything except normalization parameters.
    pub fn freeze_all_but_norm(&mut self) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, m) in self.meta.iter_mut().enumerate() {
            if m.kind != ParamKind::Norm && !m.frozen {
                m.frozen = true;
                out.push(i);
            }
        }
        out
    }

    pub fn unfreeze_all(&mut self) {
        for m in &mut self.meta {
            m.frozen = false;
        }
    }

    /// Total parameter checksum over parameters of the given kinds.
    pub fn checksum(&self, kinds: &[ParamKind]) -> u64 {
        self.params
            .iter()
            .zip(&self.meta)
            .filter(|(_, m)| kinds.contains(&m.kind))
            .fold(0u64, |h, (p, _)| h.rotate_left(7) ^ p.checksum())
    }

    pub fn running_stats_checksum(&self) -> u64 {
        self.norm_layers().fold(0u64, |h, n| {
            let m = Tensor::new(vec![n.running.mean.len()], n.running.mean.clone()).expect("1-D");
            let v = Tensor::new(vec![n.running.var.len()], n.running.var.clone()).expect("1-D");
            h.rotate_left(7) ^ m.checksum() ^ v.checksum().rotate_left(3)
        })
    }

    /// Rebuilds the private index after deserialization.
    pub(crate) fn reindex(&mut self) {
        self.weight_positions = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Weight(_)))
            .map(|(i, _)| i)
            .collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Network {
        Network::new(&NetConfig::default_micro(4), &QuantConfig::default(), 0.1, 1).unwrap()
    }

    #[test]
    fn layout_and_names() {
        let net = tiny();
        let names: Vec<&str> = net.weight_layers().map(|l| l.name.as_str()).collect();
        assert_eq!(names, ["stem", "dw1", "pw1", "dw2", "pw2", "dw3", "pw3", "fc"]);
        assert!(net.weight_layer(1).unwrap().is_depthwise());
        assert!(net.weight_layer(0).unwrap().input_quant.is_none());
        assert!(net.weight_layer(1).unwrap().input_quant.as_ref().unwrap().pin_beta.is_some());
        assert_eq!(net.weight_layer(1).unwrap().conv_spec().unwrap().pad_value, HSWISH_MIN);
        assert_eq!(net.quantized_layer_ids().len(), 8);
    }

    #[test]
    fn same_seed_same_init() {
        assert_eq!(tiny().params, tiny().params);
    }

    #[test]
    fn calibration_covers_observed_range() {
        let mut net = tiny();
        net.set_bits(Some(8), Some(8));
        assert!(net.needs_calibration());
        let images = Tensor::from_fn(&[8, 1, 16, 16], |i| ((i * 7919) % 97) as f64 / 97.0);
        net.calibrate(&images).unwrap();
        assert!(!net.needs_calibration());
        let q = net.input_quant_params(1).unwrap().unwrap();
        assert_eq!(q.resolve().beta, HSWISH_MIN);
        let logits = net.predict(&images, 3).unwrap();
        assert_eq!(logits.shape(), &[8, 4]);
    }

    #[test]
    fn freezing_marks_owned_params() {
        let mut net = tiny();
        let frozen = net.freeze_layer(2).unwrap();
        assert!(frozen.iter().all(|&i| net.meta[i].owner == Some(2)));
        assert!(net.is_layer_frozen(2));
        assert!(matches!(net.freeze_layer(2), Err(Error::AlreadyFrozen(2))));
        assert!(matches!(net.freeze_layer(99), Err(Error::UnknownLayer(99))));
    }
}
