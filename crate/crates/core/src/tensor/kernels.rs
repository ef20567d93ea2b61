//! Forward and backward numeric kernels shared by the tape and by the
//! pure-function APIs (negative padding, AIWQ probing).

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution. The kernel extent comes from the weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    /// Constant written into the padded border. `0.0` is ordinary zero padding.
    pub pad_value: f64,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            pad: 0,
            groups: 1,
            pad_value: 0.0,
        }
    }
}

impl ConvSpec {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self {
            stride,
            pad,
            ..Self::default()
        }
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn pad_value(mut self, value: f64) -> Self {
        self.pad_value = value;
        self
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    hp: usize,
    wp: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
}

fn conv_geom(input: &[usize], weight: &[usize], spec: &ConvSpec) -> Result<ConvGeom> {
    let (n, cin, h, w) = match *input {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::Shape(format!("conv input must be 4-D, got {input:?}"))),
    };
    let (cout, cin_g, kh, kw) = match *weight {
        [o, i, kh, kw] => (o, i, kh, kw),
        _ => return Err(Error::Shape(format!("conv weight must be 4-D, got {weight:?}"))),
    };
    let g = spec.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 {
        return Err(Error::Shape(format!(
            "groups={g} must divide Cin={cin} and Cout={cout}"
        )));
    }
    if cin / g != cin_g {
        return Err(Error::Shape(format!(
            "weight expects {cin_g} input channels per group, input provides {}",
            cin / g
        )));
    }
    if spec.stride == 0 {
        return Err(Error::InvalidArgument("conv stride must be positive".into()));
    }
    let hp = h + 2 * spec.pad;
    let wp = w + 2 * spec.pad;
    if hp < kh || wp < kw {
        return Err(Error::Shape(format!(
            "kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )));
    }
    Ok(ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        hp,
        wp,
        ho: (hp - kh) / spec.stride + 1,
        wo: (wp - kw) / spec.stride + 1,
        cin_g,
        cout_g: cout / g,
    })
}

fn pad_input(x: &[f64], g: &ConvGeom, pad: usize, value: f64) -> Vec<f64> {
    if pad == 0 {
        return x.to_vec();
    }
    let mut out = vec![value; g.n * g.cin * g.hp * g.wp];
    for plane in 0..g.n * g.cin {
        let src = &x[plane * g.h * g.w..(plane + 1) * g.h * g.w];
        let dst = &mut out[plane * g.hp * g.wp..(plane + 1) * g.hp * g.wp];
        for y in 0..g.h {
            let d = (y + pad) * g.wp + pad;
            dst[d..d + g.w].copy_from_slice(&src[y * g.w..(y + 1) * g.w]);
        }
    }
    out
}

/// Grouped 2-D cross-correlation with constant-valued padding.
///
/// `weight` is `[Cout, Cin/groups, kh, kw]`; `groups == Cin` is a depthwise
/// convolution.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let g = conv_geom(input.shape(), weight.shape(), spec)?;
    if let Some(b) = bias {
        if b.len() != g.cout {
            return Err(Error::Shape(format!(
                "bias has {} entries for {} output channels",
                b.len(),
                g.cout
            )));
        }
    }
    let padded = pad_input(input.data(), &g, spec.pad, spec.pad_value);
    let out = conv2d_padded(&padded, weight.data(), bias.map(|b| b.data()), &g, spec.stride);
    Tensor::new(vec![g.n, g.cout, g.ho, g.wo], out)?.ensure_finite("conv2d")
}

fn conv2d_padded(padded: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom, s: usize) -> Vec<f64> {
    let plane_out = g.ho * g.wo;
    let plane_in = g.hp * g.wp;
    let ksz = g.kh * g.kw;
    let mut out = vec![0.0; g.n * g.cout * plane_out];
    for b in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / g.cout_g;
            let dst = &mut out[(b * g.cout + oc) * plane_out..(b * g.cout + oc + 1) * plane_out];
            if let Some(bias) = bias {
                dst.fill(bias[oc]);
            }
            for icl in 0..g.cin_g {
                let ic = grp * g.cin_g + icl;
                let src = &padded[(b * g.cin + ic) * plane_in..(b * g.cin + ic + 1) * plane_in];
                let wk = &weight[(oc * g.cin_g + icl) * ksz..(oc * g.cin_g + icl + 1) * ksz];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wk[ky * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..g.ho {
                            let row = &src[(oy * s + ky) * g.wp + kx..];
                            let orow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                            if s == 1 {
                                for (o, &x) in orow.iter_mut().zip(row) {
                                    *o += wv * x;
                                }
                            } else {
                                for (ox, o) in orow.iter_mut().enumerate() {
                                    *o += wv * row[ox * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
    need: (bool, bool, bool),
) -> Result<ConvGrads> {
    let g = conv_geom(input.shape(), weight.shape(), spec)?;
    let (need_in, need_w, need_b) = need;
    let s = spec.stride;
    let plane_out = g.ho * g.wo;
    let plane_in = g.hp * g.wp;
    let ksz = g.kh * g.kw;
    let go = grad_out.data();

    let bias = need_b.then(|| {
        let mut gb = vec![0.0; g.cout];
        for b in 0..g.n {
            for (oc, acc) in gb.iter_mut().enumerate() {
                *acc += go[(b * g.cout + oc) * plane_out..(b * g.cout + oc + 1) * plane_out]
                    .iter()
                    .sum::<f64>();
            }
        }
        Tensor::new(vec![g.cout], gb).expect("bias grad shape")
    });

    let weight_grad = if need_w {
        let padded = pad_input(input.data(), &g, spec.pad, spec.pad_value);
        let mut gw = vec![0.0; weight.len()];
        for b in 0..g.n {
            for oc in 0..g.cout {
                let grp = oc / g.cout_g;
                let gplane = &go[(b * g.cout + oc) * plane_out..(b * g.cout + oc + 1) * plane_out];
                for icl in 0..g.cin_g {
                    let ic = grp * g.cin_g + icl;
                    let src = &padded[(b * g.cin + ic) * plane_in..(b * g.cin + ic + 1) * plane_in];
                    let wk = &mut gw[(oc * g.cin_g + icl) * ksz..(oc * g.cin_g + icl + 1) * ksz];
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let mut acc = 0.0;
                            for oy in 0..g.ho {
                                let row = &src[(oy * s + ky) * g.wp + kx..];
                                let grow = &gplane[oy * g.wo..(oy + 1) * g.wo];
                                if s == 1 {
                                    for (d, &x) in grow.iter().zip(row) {
                                        acc += d * x;
                                    }
                                } else {
                                    for (ox, d) in grow.iter().enumerate() {
                                        acc += d * row[ox * s];
                                    }
                                }
                            }
                            wk[ky * g.kw + kx] += acc;
                        }
                    }
                }
            }
        }
        Some(Tensor::new(weight.shape().to_vec(), gw)?)
    } else {
        None
    };

    let input_grad = if need_in {
        let wd = weight.data();
        let mut gp = vec![0.0; g.n * g.cin * plane_in];
        for b in 0..g.n {
            for oc in 0..g.cout {
                let grp = oc / g.cout_g;
                let gplane = &go[(b * g.cout + oc) * plane_out..(b * g.cout + oc + 1) * plane_out];
                for icl in 0..g.cin_g {
                    let ic = grp * g.cin_g + icl;
                    let dst = &mut gp[(b * g.cin + ic) * plane_in..(b * g.cin + ic + 1) * plane_in];
                    let wk = &wd[(oc * g.cin_g + icl) * ksz..(oc * g.cin_g + icl + 1) * ksz];
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let wv = wk[ky * g.kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for oy in 0..g.ho {
                                let row = &mut dst[(oy * s + ky) * g.wp + kx..];
                                let grow = &gplane[oy * g.wo..(oy + 1) * g.wo];
                                if s == 1 {
                                    for (r, &d) in row.iter_mut().zip(grow) {
                                        *r += wv * d;
                                    }
                                } else {
                                    for (ox, &d) in grow.iter().enumerate() {
                                        row[ox * s] += wv * d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let p = spec.pad;
        let gi = if p == 0 {
            gp
        } else {
            let mut gi = vec![0.0; g.n * g.cin * g.h * g.w];
            for plane in 0..g.n * g.cin {
                for y in 0..g.h {
                    let srow = plane * plane_in + (y + p) * g.wp + p;
                    let drow = (plane * g.h + y) * g.w;
                    gi[drow..drow + g.w].copy_from_slice(&gp[srow..srow + g.w]);
                }
            }
            gi
        };
        Some(Tensor::new(input.shape().to_vec(), gi)?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias,
    })
}

/// Fully connected layer: `x [N, Din] · Wᵀ [Dout, Din] + b`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, din) = input.dims2()?;
    let (dout, wdin) = weight.dims2()?;
    if din != wdin {
        return Err(Error::Shape(format!(
            "dense input has {din} features, weight expects {wdin}"
        )));
    }
    if let Some(b) = bias {
        if b.len() != dout {
            return Err(Error::Shape(format!("dense bias length {} != {dout}", b.len())));
        }
    }
    let (x, w) = (input.data(), weight.data());
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        let xi = &x[i * din..(i + 1) * din];
        for o in 0..dout {
            let wo = &w[o * din..(o + 1) * din];
            let mut acc = bias.map_or(0.0, |b| b.data()[o]);
            for (a, b) in xi.iter().zip(wo) {
                acc += a * b;
            }
            out[i * dout + o] = acc;
        }
    }
    Tensor::new(vec![n, dout], out)?.ensure_finite("dense")
}

/// Per-channel population mean and variance over the N, H, W axes.
pub fn channel_mean_var(input: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let count = (n * hw) as f64;
    let x = input.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for b in 0..n {
            for &xv in &x[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                v += (xv - m) * (xv - m);
            }
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    Ok((mean, var))
}

/// Running statistics of a batch normalization layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `run ← (1 − m)·run + m·batch`.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Normalizes with the given per-channel statistics, then applies the affine
/// transform.
pub fn normalize(input: &Tensor, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if gamma.len() != c || beta.len() != c || mean.len() != c || var.len() != c {
        return Err(Error::Shape(format!("batchnorm parameters must have {c} channels")));
    }
    let hw = h * w;
    let mut out = input.data().to_vec();
    for b in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + eps).sqrt();
            for v in &mut out[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                *v = gamma[ch] * (*v - mean[ch]) * inv + beta[ch];
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)?.ensure_finite("batchnorm")
}

/// Batch normalization as a single call. In training mode the batch
/// statistics normalize the input and are folded into `running`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm(
    input: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running: &mut RunningStats,
    momentum: f64,
    training: bool,
    eps: f64,
) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("batchnorm eps must be positive".into()));
    }
    if training {
        let (mean, var) = channel_mean_var(input)?;
        let out = normalize(input, gamma, beta, &mean, &var, eps)?;
        running.update(&mean, &var, momentum);
        Ok(out)
    } else {
        normalize(input, gamma, beta, &running.mean, &running.var, eps)
    }
}

/// Pointwise activation functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Relu6,
    HSwish,
}

/// Global minimum of h-swish, attained at `x = -1.5`.
pub const HSWISH_MIN: f64 = -0.375;

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Relu6 => x.clamp(0.0, 6.0),
            Activation::HSwish => x * (x + 3.0).clamp(0.0, 6.0) / 6.0,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Relu6 => {
                if x > 0.0 && x < 6.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::HSwish => {
                if x <= -3.0 {
                    0.0
                } else if x >= 3.0 {
                    1.0
                } else {
                    (2.0 * x + 3.0) / 6.0
                }
            }
        }
    }

    /// Points where the derivative is discontinuous.
    pub fn kinks(self) -> &'static [f64] {
        match self {
            Activation::Identity => &[],
            Activation::Relu => &[0.0],
            Activation::Relu6 => &[0.0, 6.0],
            Activation::HSwish => &[-3.0, 3.0],
        }
    }

    /// Lower bound of the function's range, if it has one.
    pub fn minimum(self) -> Option<f64> {
        match self {
            Activation::Identity => None,
            Activation::Relu | Activation::Relu6 => Some(0.0),
            Activation::HSwish => Some(HSWISH_MIN),
        }
    }
}

pub fn h_swish(input: &Tensor) -> Tensor {
    input.map(|x| Activation::HSwish.apply(x))
}

pub fn relu6(input: &Tensor) -> Tensor {
    input.map(|x| Activation::Relu6.apply(x))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| Activation::Relu.apply(x))
}

/// `[N, C, H, W] → [N, C]` spatial mean.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let x = input.data();
    let data = (0..n * c)
        .map(|p| x[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::new(vec![n, c], data)
}

/// Row-wise softmax of `[N, K]` logits scaled by `1/temperature`.
pub fn softmax(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
        let mut z = 0.0;
        for j in 0..k {
            let e = (row[j] / temperature - m).exp();
            out[i * k + j] = e;
            z += e;
        }
        for v in &mut out[i * k..(i + 1) * k] {
            *v /= z;
        }
    }
    Tensor::new(vec![n, k], out)
}

/// Batch-mean softmax cross-entropy; returns the loss and the row softmax.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    let probs = softmax(logits, 1.0)?;
    let loss = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs.data()[i * k + l].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / n as f64;
    Ok((loss, probs))
}
