//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! the operation's output. [`Tape::backward`] walks the nodes in reverse
//! creation order, so gradients are accumulated in a fixed order and the
//! result is bitwise reproducible.

use super::kernels::{self, Activation, ConvSpec};
use super::Tensor;
use crate::error::{Error, Result};
use crate::quant::{self, PactParams, QuantParams};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Act {
        input: Var,
        kind: Activation,
    },
    GlobalAvgPool {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    WeightedSum {
        input: Var,
        weights: Tensor,
    },
    /// Scalar loss whose gradient with respect to `logits` was computed in
    /// the forward pass.
    Loss {
        logits: Var,
        dlogits: Tensor,
    },
    Duq {
        input: Var,
        params: Var,
        template: QuantParams,
    },
    Pact {
        input: Var,
        threshold: Var,
        n_lv: u32,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Gradients are only collected for leaves created
    /// with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the last [`backward`](Self::backward) root
    /// with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let n = &self.nodes[v.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &spec,
        )?;
        let rg = self.rg(&[Some(input), Some(weight), bias]);
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
        ))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = kernels::dense(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let rg = self.rg(&[Some(input), Some(weight), bias]);
        Ok(self.push(out, rg, Op::Dense { input, weight, bias }))
    }

    /// Training-mode batch normalization. Returns the output together with the
    /// batch mean and population variance used to normalize it.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let x = self.value(input);
        let (mean, var) = kernels::channel_mean_var(x)?;
        let out = self.batch_norm_with(input, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed statistics (evaluation mode).
    pub fn batch_norm_eval(&mut self, input: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        self.batch_norm_with(input, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_with(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        batch_stats: bool,
    ) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("batchnorm eps must be positive".into()));
        }
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        if g.len() != c || b.len() != c || mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!("batchnorm parameters must have {c} channels")));
        }
        let hw = h * w;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = x.data().to_vec();
        let mut out = vec![0.0; xhat.len()];
        for bi in 0..n {
            for ch in 0..c {
                let r = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                for (xh, o) in xhat[r.clone()].iter_mut().zip(&mut out[r]) {
                    *xh = (*xh - mean[ch]) * inv_std[ch];
                    *o = g[ch] * *xh + b[ch];
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?.ensure_finite("batchnorm")?;
        let rg = self.rg(&[Some(input), Some(gamma), Some(beta)]);
        Ok(self.push(
            out,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let out = self.value(input).map(|x| kind.apply(x));
        let rg = self.rg(&[Some(input)]);
        self.push(out, rg, Op::Act { input, kind })
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = kernels::global_avg_pool(self.value(input))?;
        let rg = self.rg(&[Some(input)]);
        Ok(self.push(out, rg, Op::GlobalAvgPool { input }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).reshape(shape)?;
        let rg = self.rg(&[Some(input)]);
        Ok(self.push(out, rg, Op::Reshape { input }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!("add of {:?} and {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[Some(a), Some(b)]);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).map(|x| x * factor);
        let rg = self.rg(&[Some(input)]);
        self.push(out, rg, Op::Scale { input, factor })
    }

    /// `Σᵢ wᵢ·xᵢ` as a scalar.
    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor) -> Result<Var> {
        let x = self.value(input);
        if x.len() != weights.len() {
            return Err(Error::Shape("weighted_sum weight count mismatch".into()));
        }
        let s = x.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[Some(input)]);
        Ok(self.push(
            Tensor::scalar(s),
            rg,
            Op::WeightedSum {
                input,
                weights: weights.clone(),
            },
        ))
    }

    /// Batch-mean softmax cross-entropy of `[N, K]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, mut probs) = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        let (n, k) = probs.dims2()?;
        for (i, &l) in labels.iter().enumerate() {
            probs.data_mut()[i * k + l] -= 1.0;
        }
        for g in probs.data_mut() {
            *g /= n as f64;
        }
        self.loss(logits, loss, probs, "softmax_cross_entropy")
    }

    /// Knowledge-distillation loss against fixed teacher logits:
    /// `w·T²·CE(softmax(t/T), softmax(s/T)) + (1 − w)·CE(labels, s)`,
    /// averaged over the batch.
    pub fn kd_loss(
        &mut self,
        student: Var,
        teacher_logits: &Tensor,
        labels: &[usize],
        temperature: f64,
        weight: f64,
    ) -> Result<Var> {
        if temperature <= 0.0 {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::InvalidArgument("distillation weight must lie in [0, 1]".into()));
        }
        let s = self.value(student);
        if s.shape() != teacher_logits.shape() {
            return Err(Error::Shape(format!(
                "student logits {:?} vs teacher logits {:?}",
                s.shape(),
                teacher_logits.shape()
            )));
        }
        let (n, k) = s.dims2()?;
        let (hard, hard_probs) = kernels::softmax_cross_entropy(s, labels)?;
        let p_t = kernels::softmax(teacher_logits, temperature)?;
        let q_s = kernels::softmax(s, temperature)?;
        let t2 = temperature * temperature;
        let mut soft = 0.0;
        let mut grad = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                let idx = i * k + j;
                let (p, q) = (p_t.data()[idx], q_s.data()[idx]);
                if p > 0.0 {
                    soft -= p * q.max(f64::MIN_POSITIVE).ln();
                }
                let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                grad[idx] = (weight * temperature * (q - p) + (1.0 - weight) * (hard_probs.data()[idx] - onehot)) / n as f64;
            }
        }
        let loss = weight * t2 * soft / n as f64 + (1.0 - weight) * hard;
        let dlogits = Tensor::new(vec![n, k], grad)?;
        self.loss(student, loss, dlogits, "kd_loss")
    }

    fn loss(&mut self, logits: Var, loss: f64, dlogits: Tensor, name: &'static str) -> Result<Var> {
        let value = Tensor::scalar(loss).ensure_finite(name)?;
        let rg = self.rg(&[Some(logits)]);
        Ok(self.push(value, rg, Op::Loss { logits, dlogits }))
    }

    /// DuQ fake quantization; `params` holds the raw `[a, b, α, β]` and
    /// `template` supplies the level count and mode.
    pub fn duq(&mut self, input: Var, params: Var, template: QuantParams) -> Result<Var> {
        let raw = self.value(params);
        if raw.len() != 4 {
            return Err(Error::Shape("DuQ parameters must hold [a, b, alpha, beta]".into()));
        }
        let q = template.with_raw(raw.data());
        let out = quant::duq_forward(self.value(input), &q).ensure_finite("duq")?;
        let rg = self.rg(&[Some(input), Some(params)]);
        Ok(self.push(out, rg, Op::Duq { input, params, template }))
    }

    pub fn pact(&mut self, input: Var, threshold: Var, n_lv: u32) -> Result<Var> {
        let p = self.value(threshold);
        if p.len() != 1 {
            return Err(Error::Shape("PACT threshold must be a scalar".into()));
        }
        let q = PactParams { p: p.data()[0], n_lv };
        let out = quant::pact_forward(self.value(input), &q).ensure_finite("pact")?;
        let rg = self.rg(&[Some(input), Some(threshold)]);
        Ok(self.push(out, rg, Op::Pact { input, threshold, n_lv }))
    }

    fn accumulate(&mut self, v: Var, g: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => node.grad = Some(g.to_vec()),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Back-propagates from the scalar `root`. Previously accumulated
    /// gradients are cleared first.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape("backward root must be a scalar".into()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let res = self.backprop(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
            res?;
        }
        Ok(())
    }

    fn backprop(&mut self, i: usize, op: &Op, g: &[f64]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let need = (self.needs(*input), self.needs(*weight), bias.is_some_and(|b| self.needs(b)));
                let go = Tensor::new(self.nodes[i].value.shape().to_vec(), g.to_vec())?;
                let grads = kernels::conv2d_backward(self.value(*input), self.value(*weight), spec, &go, need)?;
                if let Some(gi) = grads.input {
                    self.accumulate(*input, gi.data());
                }
                if let Some(gw) = grads.weight {
                    self.accumulate(*weight, gw.data());
                }
                if let (Some(b), Some(gb)) = (bias, grads.bias) {
                    self.accumulate(*b, gb.data());
                }
            }
            Op::Dense { input, weight, bias } => {
                let (n, din) = self.value(*input).dims2()?;
                let dout = self.value(*weight).shape()[0];
                if self.needs(*input) {
                    let w = self.value(*weight).data();
                    let mut gi = vec![0.0; n * din];
                    for r in 0..n {
                        for o in 0..dout {
                            let d = g[r * dout + o];
                            for (acc, wv) in gi[r * din..(r + 1) * din].iter_mut().zip(&w[o * din..(o + 1) * din]) {
                                *acc += d * wv;
                            }
                        }
                    }
                    self.accumulate(*input, &gi);
                }
                if self.needs(*weight) {
                    let x = self.value(*input).data();
                    let mut gw = vec![0.0; dout * din];
                    for r in 0..n {
                        for o in 0..dout {
                            let d = g[r * dout + o];
                            for (acc, xv) in gw[o * din..(o + 1) * din].iter_mut().zip(&x[r * din..(r + 1) * din]) {
                                *acc += d * xv;
                            }
                        }
                    }
                    self.accumulate(*weight, &gw);
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let mut gb = vec![0.0; dout];
                        for r in 0..n {
                            for o in 0..dout {
                                gb[o] += g[r * dout + o];
                            }
                        }
                        self.accumulate(*b, &gb);
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let hw = h * w;
                let m = (n * hw) as f64;
                let gam = self.value(*gamma).data().to_vec();
                let mut g_gamma = vec![0.0; c];
                let mut g_beta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                        for (&d, &xh) in g[r.clone()].iter().zip(&xhat[r]) {
                            g_gamma[ch] += d * xh;
                            g_beta[ch] += d;
                        }
                    }
                }
                if self.needs(*input) {
                    let mut gi = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                            for ((o, &d), &xh) in gi[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                                *o = if *batch_stats {
                                    gam[ch] * inv_std[ch] / m * (m * d - g_beta[ch] - xh * g_gamma[ch])
                                } else {
                                    gam[ch] * inv_std[ch] * d
                                };
                            }
                        }
                    }
                    self.accumulate(*input, &gi);
                }
                self.accumulate(*gamma, &g_gamma);
                self.accumulate(*beta, &g_beta);
            }
            Op::Act { input, kind } => {
                let gi: Vec<f64> = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &d)| d * kind.derivative(x))
                    .collect();
                self.accumulate(*input, &gi);
            }
            Op::GlobalAvgPool { input } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let hw = h * w;
                let mut gi = vec![0.0; n * c * hw];
                for p in 0..n * c {
                    gi[p * hw..(p + 1) * hw].fill(g[p] / hw as f64);
                }
                self.accumulate(*input, &gi);
            }
            Op::Reshape { input } => self.accumulate(*input, g),
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Scale { input, factor } => {
                let gi: Vec<f64> = g.iter().map(|d| d * factor).collect();
                self.accumulate(*input, &gi);
            }
            Op::WeightedSum { input, weights } => {
                let gi: Vec<f64> = weights.data().iter().map(|w| w * g[0]).collect();
                self.accumulate(*input, &gi);
            }
            Op::Loss { logits, dlogits } => {
                let gi: Vec<f64> = dlogits.data().iter().map(|d| d * g[0]).collect();
                self.accumulate(*logits, &gi);
            }
            Op::Duq { input, params, template } => {
                let q = template.with_raw(self.value(*params).data());
                let up = Tensor::new(self.nodes[i].value.shape().to_vec(), g.to_vec())?;
                let grads = quant::duq_backward(self.value(*input), &q, &up);
                self.accumulate(*input, grads.x.data());
                self.accumulate(*params, &grads.params());
            }
            Op::Pact { input, threshold, n_lv } => {
                let q = PactParams {
                    p: self.value(*threshold).data()[0],
                    n_lv: *n_lv,
                };
                let up = Tensor::new(self.nodes[i].value.shape().to_vec(), g.to_vec())?;
                let (gx, gp) = quant::pact_backward(self.value(*input), &q, &up);
                self.accumulate(*input, gx.data());
                self.accumulate(*threshold, &[gp]);
            }
        }
        Ok(())
    }
}
