//! Convolution over shifted non-negative activations with negative padding.
//!
//! An activation with constant minimum `m` splits into `m` plus the shifted
//! part `a − m ≥ 0`. Padding the original input with `m` is the same as
//! zero-padding the shifted input, so the constant part of the convolution
//! is one precomputed bias per output channel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::model::{ForwardOpts, Network};
use crate::quant::{duq_forward, QuantParams};
use crate::tensor::kernels::{conv2d, h_swish, ConvSpec};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// `a − m`, elementwise.
pub fn shift_decompose(activations: &Tensor, m: f64) -> Tensor {
    activations.map(|a| a - m)
}

/// `bias[o] = m · Σ weight[o, ..]`.
pub fn negpad_bias(weight: &Tensor, m: f64) -> Result<Tensor> {
    let (cout, cin, kh, kw) = weight.dims4()?;
    let per = cin * kh * kw;
    Ok(Tensor::from_fn(&[cout], |o| m * weight.data()[o * per..(o + 1) * per].iter().sum::<f64>()))
}

/// Zero-padded convolution of the shifted input plus the constant bias.
pub fn negpad_conv(shifted: &Tensor, weight: &Tensor, bias_c: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    conv2d(shifted, weight, Some(bias_c), &spec.pad_value(0.0))
}

/// A convolution paired with its shifted form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegPadRewrite {
    pub shift_m: f64,
    /// Constant-part bias plus the layer's own bias.
    pub bias_c: Tensor,
    pub weight: Tensor,
    pub layer_bias: Option<Tensor>,
    pub spec: ConvSpec,
}

impl NegPadRewrite {
    pub fn new(weight: Tensor, layer_bias: Option<Tensor>, spec: ConvSpec, m: f64) -> Result<Self> {
        let mut bias_c = negpad_bias(&weight, m)?;
        if let Some(b) = &layer_bias {
            if b.shape() != bias_c.shape() {
                return Err(Error::Shape("layer bias length differs from output channels".into()));
            }
            for (c, v) in bias_c.data_mut().iter_mut().zip(b.data()) {
                *c += v;
            }
        }
        Ok(Self {
            shift_m: m,
            bias_c,
            weight,
            layer_bias,
            spec: spec.pad_value(m),
        })
    }

    /// The original layer: input padded with `m`.
    pub fn original(&self, input: &Tensor) -> Result<Tensor> {
        conv2d(input, &self.weight, self.layer_bias.as_ref(), &self.spec)
    }

    pub fn rewritten(&self, input: &Tensor) -> Result<Tensor> {
        negpad_conv(&shift_decompose(input, self.shift_m), &self.weight, &self.bias_c, &self.spec)
    }
}

/// Max |rewritten − original| over `trials` random h-swish inputs of shape
/// `input_shape`, optionally passed through an activation quantizer.
pub fn verify_rewrite(rewrite: &NegPadRewrite, input_shape: &[usize], trials: usize, quantizer: Option<&QuantParams>, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 3.0).expect("valid std");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let pre = Tensor::from_fn(input_shape, |_| normal.sample(&mut rng));
        let mut a = h_swish(&pre);
        if let Some(q) = quantizer {
            a = duq_forward(&a, q);
        }
        let d = rewrite.original(&a)?.max_abs_diff(&rewrite.rewritten(&a)?);
        worst = worst.max(d);
    }
    Ok(worst)
}

/// Fraction of exact zeros among the shifted activations.
pub fn zero_fraction(shifted: &Tensor) -> f64 {
    if shifted.is_empty() {
        return 0.0;
    }
    shifted.data().iter().filter(|&&v| v == 0.0).count() as f64 / shifted.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNegPad {
    pub layer_id: usize,
    pub layer_name: String,
    pub max_abs_error: f64,
    pub zero_fraction: f64,
}

/// Checks every negatively padded convolution of `net` on the activations
/// it actually receives for `images` (evaluation mode).
pub fn verify_network(net: &Network, images: &Tensor) -> Result<Vec<LayerNegPad>> {
    let mut tape = Tape::new();
    let vars = net.load(&mut tape, false);
    let x = tape.constant(images.clone());
    let fwd = net.forward(&mut tape, &vars, x, ForwardOpts { train: false, capture: true })?;
    let mut out = Vec::new();
    for l in net.weight_layers() {
        let Some(spec) = l.conv_spec() else { continue };
        if spec.pad_value == 0.0 {
            continue;
        }
        let cap = fwd.captures.iter().find(|c| c.id == l.id).ok_or(Error::UnknownLayer(l.id))?;
        let rw = NegPadRewrite::new(net.effective_weight(l.id)?, l.bias.map(|b| net.params[b].clone()), spec, spec.pad_value)?;
        let rewritten = rw.rewritten(&cap.input)?;
        out.push(LayerNegPad {
            layer_id: l.id,
            layer_name: l.name.clone(),
            max_abs_error: rewritten.max_abs_diff(&cap.output),
            zero_fraction: zero_fraction(&shift_decompose(&cap.input, spec.pad_value)),
        });
    }
    Ok(out)
}

pub fn report_csv(rows: &[LayerNegPad]) -> String {
    let mut s = String::from("layer_id,layer_name,max_abs_error,zero_fraction\n");
    for r in rows {
        s.push_str(&format!("{},{},{:e},{}\n", r.layer_id, r.layer_name, r.max_abs_error, r.zero_fraction));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels::HSWISH_MIN;

    #[test]
    fn shift_examples() {
        let a = Tensor::full(&[1, 1, 3, 3], HSWISH_MIN);
        assert!(shift_decompose(&a, HSWISH_MIN).data().iter().all(|&v| v == 0.0));
        let r = Tensor::from_fn(&[5], |i| i as f64 - 2.0);
        assert_eq!(shift_decompose(&r, 0.0), r);
    }

    #[test]
    fn bias_examples() {
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        assert_eq!(negpad_bias(&w, HSWISH_MIN).unwrap().data(), &[-3.375]);
        assert_eq!(negpad_bias(&w, 0.0).unwrap().data(), &[0.0]);
    }

    #[test]
    fn constant_input_gives_uniform_output() {
        let w = Tensor::from_fn(&[1, 1, 3, 3], |i| (i as f64 * 0.37).sin());
        let rw = NegPadRewrite::new(w, None, ConvSpec::new(1, 1), HSWISH_MIN).unwrap();
        let a = Tensor::full(&[1, 1, 3, 3], HSWISH_MIN);
        let out = rw.rewritten(&a).unwrap();
        assert!(out.data().iter().all(|&v| v == out.data()[0]));
        assert!(rw.original(&a).unwrap().max_abs_diff(&out) <= 1e-12);
    }

    #[test]
    fn zero_shift_is_plain_conv() {
        let w = Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64 * 0.1 - 0.5);
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| (i as f64).cos());
        let rw = NegPadRewrite::new(w.clone(), None, ConvSpec::new(1, 1), 0.0).unwrap();
        assert_eq!(rw.rewritten(&x).unwrap(), conv2d(&x, &w, None, &ConvSpec::new(1, 1)).unwrap());
    }
}
