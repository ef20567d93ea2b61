//! Activation instability induced by weight quantization (AIWQ).
//!
//! For every quantized layer the metric compares the per-channel output
//! distribution produced by the quantized weights before and after one
//! training update, modelling each channel as a Gaussian and averaging the
//! KL divergence over output channels and sampling iterations.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::harness::model::ForwardOpts;
use crate::harness::trainer::Trainer;
use crate::tensor::kernels;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Variance regularizer added to both distributions.
pub const AIWQ_EPS: f64 = 1e-5;

/// Per-output-channel statistics of a layer before and after an update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStatsPair {
    pub mean_before: Vec<f64>,
    pub var_before: Vec<f64>,
    pub mean_after: Vec<f64>,
    pub var_after: Vec<f64>,
}

impl ChannelStatsPair {
    pub fn new(mean_before: Vec<f64>, var_before: Vec<f64>, mean_after: Vec<f64>, var_after: Vec<f64>) -> Result<Self> {
        let c = mean_before.len();
        if var_before.len() != c || mean_after.len() != c || var_after.len() != c {
            return Err(Error::Shape("channel statistics have mismatched lengths".into()));
        }
        let all = mean_before.iter().chain(&var_before).chain(&mean_after).chain(&var_after);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("channel statistics"));
        }
        if var_before.iter().chain(&var_after).any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("negative variance".into()));
        }
        Ok(Self {
            mean_before,
            var_before,
            mean_after,
            var_after,
        })
    }

    /// Statistics of two activation tensors of identical shape.
    pub fn from_outputs(before: &Tensor, after: &Tensor) -> Result<Self> {
        if before.shape() != after.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", before.shape(), after.shape())));
        }
        let (mb, vb) = channel_stats(before)?;
        let (ma, va) = channel_stats(after)?;
        Self::new(mb, vb, ma, va)
    }

    pub fn channels(&self) -> usize {
        self.mean_before.len()
    }
}

/// Per-channel mean and population variance over every non-channel axis.
/// Accepts `[N, C, H, W]` or `[N, C]` (treated as `H = W = 1`).
pub fn channel_stats(activations: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let t;
    let x = match activations.ndim() {
        4 => activations,
        2 => {
            let (n, c) = activations.dims2()?;
            t = activations.reshape(&[n, c, 1, 1])?;
            &t
        }
        _ => return Err(Error::Shape(format!("expected a 2-D or 4-D tensor, got {:?}", activations.shape()))),
    };
    let (n, _, h, w) = x.dims4()?;
    if n * h * w < 2 {
        return Err(Error::InvalidArgument("each channel needs at least two elements".into()));
    }
    kernels::channel_mean_var(x)
}

/// KL(N(m1, v1) ‖ N(m2, v2)) with `eps` added to both variances.
pub fn gaussian_kl(m1: f64, v1: f64, m2: f64, v2: f64, eps: f64) -> f64 {
    let (v1, v2) = (v1 + eps, v2 + eps);
    let dm = m1 - m2;
    0.5 * (v2 / v1).ln() + (v1 + dm * dm) / (2.0 * v2) - 0.5
}

/// Mean over output channels of KL(before ‖ after).
pub fn layer_aiwq(stats: &ChannelStatsPair, eps: f64) -> f64 {
    let c = stats.channels();
    if c == 0 {
        return 0.0;
    }
    let total: f64 = (0..c)
        .map(|o| gaussian_kl(stats.mean_before[o], stats.var_before[o], stats.mean_after[o], stats.var_after[o], eps))
        .sum();
    total / c as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AiwqEntry {
    pub layer_id: usize,
    pub layer_name: String,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AiwqReport {
    /// Layer id → mean metric in nats.
    pub per_layer: BTreeMap<usize, f64>,
    pub names: BTreeMap<usize, String>,
    pub iterations_sampled: usize,
}

impl AiwqReport {
    /// Entries by descending metric; ties keep front-to-back layer order.
    pub fn sorted(&self) -> Vec<AiwqEntry> {
        let mut out: Vec<AiwqEntry> = self
            .per_layer
            .iter()
            .map(|(&id, &m)| AiwqEntry {
                layer_id: id,
                layer_name: self.names.get(&id).cloned().unwrap_or_default(),
                metric: m,
            })
            .collect();
        out.sort_by(|a, b| b.metric.total_cmp(&a.metric).then(a.layer_id.cmp(&b.layer_id)));
        out
    }

    pub fn mean(&self) -> f64 {
        if self.per_layer.is_empty() {
            return 0.0;
        }
        self.per_layer.values().sum::<f64>() / self.per_layer.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer_id,layer_name,metric\n");
        for e in self.sorted() {
            let _ = writeln!(s, "{},{},{}", e.layer_id, e.layer_name, e.metric);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut per_layer = BTreeMap::new();
        let mut names = BTreeMap::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            let bad = || Error::InvalidArgument(format!("malformed AIWQ CSV line {}", i + 1));
            if parts.len() != 3 {
                return Err(bad());
            }
            let id: usize = parts[0].parse().map_err(|_| bad())?;
            let metric: f64 = parts[2].parse().map_err(|_| bad())?;
            per_layer.insert(id, metric);
            names.insert(id, parts[1].to_string());
        }
        Ok(Self {
            per_layer,
            names,
            iterations_sampled: 0,
        })
    }
}

/// One sampling iteration: trains on the batch, then measures each quantized
/// layer's output on that same batch with the previous and the updated
/// quantized weights. Returns `(layer id, metric)` front to back.
pub fn sample_step(trainer: &mut Trainer, images: &Tensor, labels: &[usize], lr: f64) -> Result<Vec<(usize, f64)>> {
    let ids = trainer.net.quantized_layer_ids();
    let before: Vec<Tensor> = ids
        .iter()
        .map(|&id| trainer.net.effective_weight(id))
        .collect::<Result<_>>()?;
    trainer.step(images, labels, lr)?;
    let net = &trainer.net;
    let mut tape = Tape::new();
    let vars = net.load(&mut tape, false);
    let x = tape.constant(images.clone());
    let fwd = net.forward(&mut tape, &vars, x, ForwardOpts { train: true, capture: true })?;
    let mut out = Vec::with_capacity(ids.len());
    for (&id, w_prev) in ids.iter().zip(&before) {
        let cap = fwd.captures.iter().find(|c| c.id == id).ok_or(Error::UnknownLayer(id))?;
        let prev_out = net.apply_weight_op(id, &cap.input, w_prev)?;
        let stats = ChannelStatsPair::from_outputs(&prev_out, &cap.output)?;
        out.push((id, layer_aiwq(&stats, AIWQ_EPS)));
    }
    Ok(out)
}

/// Samples the metric over `iterations` training updates drawn from
/// shuffled batches of `data`, each taken at learning rate `lr`.
pub fn sample_aiwq(trainer: &mut Trainer, data: &Dataset, iterations: usize, lr: f64) -> Result<AiwqReport> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("AIWQ sampling needs at least one iteration".into()));
    }
    if data.len() < 2 {
        return Err(Error::InvalidArgument("AIWQ sampling needs a non-empty data source".into()));
    }
    let active: Vec<usize> = trainer
        .net
        .weight_layers()
        .filter(|l| l.weight_quant.as_ref().is_some_and(|q| q.enabled))
        .map(|l| l.id)
        .collect();
    if active.is_empty() {
        return Err(Error::InvalidArgument("network has no quantized layers".into()));
    }
    let mut sums: BTreeMap<usize, f64> = active.iter().map(|&id| (id, 0.0)).collect();
    let mut done = 0;
    let mut batches = Vec::new();
    while done < iterations {
        if batches.is_empty() {
            batches = trainer.epoch_batches(data.len());
            batches.reverse();
        }
        let rows = batches.pop().expect("non-empty epoch");
        let b = data.subset(&rows);
        for (id, m) in sample_step(trainer, &b.images, &b.labels, lr)? {
            if let Some(s) = sums.get_mut(&id) {
                *s += m;
            }
        }
        done += 1;
    }
    let names = active
        .iter()
        .map(|&id| Ok((id, trainer.net.weight_layer(id)?.name.clone())))
        .collect::<Result<_>>()?;
    Ok(AiwqReport {
        per_layer: sums.into_iter().map(|(id, s)| (id, s / iterations as f64)).collect(),
        names,
        iterations_sampled: iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_examples() {
        assert_eq!(gaussian_kl(0.3, 2.0, 0.3, 2.0, AIWQ_EPS), 0.0);
        assert!((gaussian_kl(1.0, 1.0, 0.0, 1.0, 0.0) - 0.5).abs() < 1e-15);
        let expect = (0.5f64).ln() + 2.0 - 0.5;
        assert!((gaussian_kl(0.0, 4.0, 0.0, 1.0, 0.0) - expect).abs() < 1e-12);
        assert!((expect - 0.80685).abs() < 1e-5);
    }

    #[test]
    fn stats_examples() {
        let c = Tensor::full(&[2, 3, 2, 2], 1.5);
        let (m, v) = channel_stats(&c).unwrap();
        assert_eq!(m, vec![1.5; 3]);
        assert_eq!(v, vec![0.0; 3]);
        let t = Tensor::new(vec![2, 1], vec![-1.0, 1.0]).unwrap();
        let (m, v) = channel_stats(&t).unwrap();
        assert_eq!((m[0], v[0]), (0.0, 1.0));
        assert!(channel_stats(&Tensor::zeros(&[1, 2, 1, 1])).is_err());
    }

    #[test]
    fn layer_mean_of_two_channels() {
        let s = ChannelStatsPair::new(vec![0.0, 1.0], vec![1.0, 1.0], vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!((layer_aiwq(&s, 0.0) - 0.25).abs() < 1e-15);
        let s = ChannelStatsPair::new(vec![0.0, 2f64.sqrt()], vec![1.0, 1.0], vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!((layer_aiwq(&s, 0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn csv_sorted_descending() {
        let r = AiwqReport {
            per_layer: [(0, 0.5), (1, 0.9), (2, 0.1), (3, 0.5)].into_iter().collect(),
            names: [(0, "a"), (1, "b"), (2, "c"), (3, "d")].into_iter().map(|(i, n)| (i, n.to_string())).collect(),
            iterations_sampled: 1,
        };
        let ids: Vec<usize> = r.sorted().iter().map(|e| e.layer_id).collect();
        assert_eq!(ids, [1, 0, 3, 2]);
        let back = AiwqReport::from_csv(&r.to_csv()).unwrap();
        assert_eq!(back.per_layer, r.per_layer);
    }
}
