//! Bit-operation (BOPS) and model-size estimates.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{LayerKind, NetConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBits {
    pub act_bits: u32,
    pub weight_bits: u32,
}

/// How bit-widths are assigned to the layers of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitsPolicy {
    pub act_bits: u32,
    pub weight_bits: u32,
    /// Bit-width of the first layer's input (the image) when it differs.
    pub first_input_bits: Option<u32>,
    /// Bit-width for layers not marked `quantized`; `None` treats them like
    /// every other layer.
    pub unquantized_bits: Option<u32>,
}

impl BitsPolicy {
    pub fn uniform(act_bits: u32, weight_bits: u32) -> Self {
        Self {
            act_bits,
            weight_bits,
            first_input_bits: None,
            unquantized_bits: None,
        }
    }

    pub fn assign(&self, net: &NetConfig) -> Vec<LayerBits> {
        net.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let mut bits = LayerBits {
                    act_bits: self.act_bits,
                    weight_bits: self.weight_bits,
                };
                if let (false, Some(fp)) = (b.quantized, self.unquantized_bits) {
                    bits = LayerBits {
                        act_bits: fp,
                        weight_bits: fp,
                    };
                }
                if let (0, Some(a)) = (i, self.first_input_bits) {
                    bits.act_bits = a;
                }
                bits
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub index: usize,
    pub kind: LayerKind,
    pub macs: u64,
    pub weights: u64,
    pub bits: LayerBits,
    pub bops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_macs: u64,
    pub total_bops: u64,
    /// Σ weights · weight_bits / 8.
    pub model_size_bytes: f64,
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,macs,weights,act_bits,weight_bits,bops\n");
        for l in &self.layers {
            let kind = match l.kind {
                LayerKind::Conv => "conv",
                LayerKind::Depthwise => "depthwise",
                LayerKind::Dense => "dense",
            };
            let _ = writeln!(
                s,
                "{},{kind},{},{},{},{},{}",
                l.index, l.macs, l.weights, l.bits.act_bits, l.bits.weight_bits, l.bops
            );
        }
        let _ = writeln!(s, "total,,{},,,,{}", self.total_macs, self.total_bops);
        let _ = writeln!(s, "model_size_bytes,,,,,,{}", self.model_size_bytes);
        s
    }
}

/// Multiply-accumulates and weight count of every layer.
pub fn layer_macs(net: &NetConfig) -> Result<Vec<(u64, u64)>> {
    let shapes = net.layer_shapes()?;
    let mut cin = net.input_shape[0];
    let mut out = Vec::with_capacity(shapes.len());
    for (b, &[co, ho, wo]) in net.blocks.iter().zip(&shapes) {
        let (macs, weights) = match b.kind {
            LayerKind::Conv | LayerKind::Depthwise => {
                let cin_g = if b.kind == LayerKind::Depthwise { 1 } else { cin };
                let w = co * cin_g * b.kernel * b.kernel;
                (ho * wo * w, w)
            }
            LayerKind::Dense => (co * cin, co * cin),
        };
        out.push((macs as u64, weights as u64));
        cin = co;
    }
    Ok(out)
}

pub fn bops_report(net: &NetConfig, bits: &[LayerBits]) -> Result<CostReport> {
    let counts = layer_macs(net)?;
    if bits.len() != counts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} bit assignments for {} layers",
            bits.len(),
            counts.len()
        )));
    }
    let layers: Vec<LayerCost> = counts
        .iter()
        .zip(bits)
        .enumerate()
        .map(|(i, (&(macs, weights), &b))| LayerCost {
            index: i,
            kind: net.blocks[i].kind,
            macs,
            weights,
            bits: b,
            bops: macs * u64::from(b.act_bits) * u64::from(b.weight_bits),
        })
        .collect();
    let size_bits: u64 = layers.iter().map(|l| l.weights * u64::from(l.bits.weight_bits)).sum();
    Ok(CostReport {
        total_macs: layers.iter().map(|l| l.macs).sum(),
        total_bops: layers.iter().map(|l| l.bops).sum(),
        model_size_bytes: size_bits as f64 / 8.0,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::LayerDesc;
    use crate::tensor::kernels::Activation;

    #[test]
    fn conv_example() {
        let net = NetConfig {
            input_shape: [16, 8, 8],
            num_classes: 10,
            blocks: vec![LayerDesc::conv(32, 3, 1, Activation::Relu), LayerDesc::dense(10)],
        };
        let r = bops_report(&net, &BitsPolicy::uniform(4, 4).assign(&net)).unwrap();
        assert_eq!(r.layers[0].macs, 294_912);
        assert_eq!(r.layers[0].bops, 4_718_592);
    }

    #[test]
    fn ratio_and_size() {
        let net = NetConfig::default_micro(10);
        let r4 = bops_report(&net, &BitsPolicy::uniform(4, 4).assign(&net)).unwrap();
        let r8 = bops_report(&net, &BitsPolicy::uniform(8, 8).assign(&net)).unwrap();
        assert_eq!(r4.total_bops * 4, r8.total_bops);
        let dense = NetConfig {
            input_shape: [100, 1, 1],
            num_classes: 10,
            blocks: vec![LayerDesc::dense(10)],
        };
        let r = bops_report(&dense, &BitsPolicy::uniform(8, 4).assign(&dense)).unwrap();
        assert_eq!(r.model_size_bytes, 500.0);
    }
}
