//! Learnable fake quantizers.
//!
//! DuQ maps an input through a learnable affine pre-transform and clip,
//! rounds onto `n_lv` uniform levels, then maps the levels to an arbitrary
//! output range through a learnable scale and offset:
//!
//! ```text
//! x̂ = clip((x − b) / a′, 0, 1)          a′ = softplus(a)
//! x̄ = round((n_lv − 1)·x̂) / (n_lv − 1)
//! x̃ = α′·x̄ + β                          α′ = softplus(α)
//! ```
//!
//! Rounding is half-away-from-zero and the backward pass treats it as the
//! identity (straight-through estimator). Because the offset `β` receives the
//! gradient of every element and `α` that of every element at or above the
//! clip range, every element of the input contributes to some parameter
//! gradient, including saturated ones.
//!
//! PACT is provided as a baseline: a clip to `[0, p]` followed by uniform
//! quantization, whose threshold only learns from clipped elements.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Numerically stable `ln(1 + eˣ)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Derivative of [`softplus`], the logistic sigmoid.
#[inline]
pub fn softplus_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// How DuQ ties its offsets together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// `b` and `β` are free.
    Asymmetric,
    /// `b = −a′/2` and `β = −α′/2`: the grid is centred on zero, and zero is a
    /// level whenever `n_lv` is odd.
    Symmetric,
    /// `β = 0`: every output level is non-negative.
    NonNegative,
}

/// State of one DuQ quantizer. `a` and `alpha` are stored before the
/// softplus, so any real value is a valid state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
    pub beta: f64,
    pub n_lv: u32,
    pub mode: QuantMode,
    /// Holds `β` at its current value; its gradient is discarded.
    #[serde(default)]
    pub beta_pinned: bool,
}

/// Mode-resolved quantizer constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolved {
    pub a_p: f64,
    pub b: f64,
    pub alpha_p: f64,
    pub beta: f64,
    pub steps: f64,
}

/// Gradients of a DuQ application. Parameter gradients are with respect to
/// the stored (pre-softplus) parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DuqGrads {
    pub x: Tensor,
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl DuqGrads {
    pub fn params(&self) -> [f64; 4] {
        [self.a, self.b, self.alpha, self.beta]
    }
}

impl QuantParams {
    /// Builds a quantizer from the positive scales `a′` and `α′`.
    pub fn from_scales(a_p: f64, b: f64, alpha_p: f64, beta: f64, n_lv: u32, mode: QuantMode) -> Result<Self> {
        if !(a_p > 0.0 && alpha_p > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "quantizer scales must be positive (a′={a_p}, α′={alpha_p})"
            )));
        }
        if n_lv < 2 {
            return Err(Error::InvalidArgument(format!("n_lv must be ≥ 2, got {n_lv}")));
        }
        let (b, beta) = match mode {
            QuantMode::Asymmetric => (b, beta),
            QuantMode::Symmetric => (-a_p / 2.0, -alpha_p / 2.0),
            QuantMode::NonNegative => (b, 0.0),
        };
        Ok(Self {
            a: softplus_inv(a_p),
            b,
            alpha: softplus_inv(alpha_p),
            beta,
            n_lv,
            mode,
            beta_pinned: false,
        })
    }

    /// Symmetric quantizer whose input and output ranges are both
    /// `[−range, range]`.
    pub fn symmetric(range: f64, n_lv: u32) -> Result<Self> {
        Self::from_scales(2.0 * range, 0.0, 2.0 * range, 0.0, n_lv, QuantMode::Symmetric)
    }

    /// Activation quantizer initialized from one calibration batch so that
    /// the observed `[min, max]` is reproduced near-losslessly.
    pub fn calibrated(min: f64, max: f64, n_lv: u32, mode: QuantMode) -> Result<Self> {
        let span = |lo: f64, hi: f64| (hi - lo).max(1e-6);
        match mode {
            QuantMode::Asymmetric => Self::from_scales(span(min, max), min, span(min, max), min, n_lv, mode),
            QuantMode::Symmetric => Self::symmetric(min.abs().max(max.abs()).max(1e-6), n_lv),
            QuantMode::NonNegative => {
                let hi = max.max(1e-6);
                Self::from_scales(hi, 0.0, hi, 0.0, n_lv, mode)
            }
        }
    }

    pub fn pin_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self.beta_pinned = true;
        self
    }

    pub fn raw(&self) -> [f64; 4] {
        [self.a, self.b, self.alpha, self.beta]
    }

    pub fn with_raw(&self, raw: &[f64]) -> Self {
        Self {
            a: raw[0],
            b: raw[1],
            alpha: raw[2],
            beta: raw[3],
            ..*self
        }
    }

    pub fn resolve(&self) -> Resolved {
        let a_p = softplus(self.a);
        let alpha_p = softplus(self.alpha);
        let (b, beta) = match self.mode {
            QuantMode::Asymmetric => (self.b, self.beta),
            QuantMode::Symmetric => (-a_p / 2.0, -alpha_p / 2.0),
            QuantMode::NonNegative => (self.b, 0.0),
        };
        Resolved {
            a_p,
            b,
            alpha_p,
            beta,
            steps: (self.n_lv - 1) as f64,
        }
    }

    /// The output grid `{α′·k/(n_lv − 1) + β}` in ascending order.
    pub fn levels(&self) -> Vec<f64> {
        let r = self.resolve();
        (0..self.n_lv).map(|k| r.alpha_p * (k as f64 / r.steps) + r.beta).collect()
    }

    /// Level index selected for `x`.
    #[inline]
    pub fn level_index(&self, x: f64) -> u32 {
        let r = self.resolve();
        level_of(x, &r) as u32
    }

    /// Keeps the level grid (scales and offsets) but changes its resolution.
    pub fn with_levels(mut self, n_lv: u32) -> Self {
        self.n_lv = n_lv;
        self
    }
}

#[inline]
fn level_of(x: f64, r: &Resolved) -> f64 {
    let s = ((x - r.b) / r.a_p).clamp(0.0, 1.0);
    (r.steps * s).round()
}

#[inline]
fn duq_scalar(x: f64, r: &Resolved) -> f64 {
    r.alpha_p * (level_of(x, r) / r.steps) + r.beta
}

/// DuQ fake quantization.
pub fn duq_forward(x: &Tensor, q: &QuantParams) -> Tensor {
    let r = q.resolve();
    x.map(|v| duq_scalar(v, &r))
}

/// DuQ backward pass with a straight-through round.
pub fn duq_backward(x: &Tensor, q: &QuantParams, upstream: &Tensor) -> DuqGrads {
    let r = q.resolve();
    let mut gx = vec![0.0; x.len()];
    let (mut g_ap, mut g_b, mut g_alphap, mut g_beta) = (0.0, 0.0, 0.0, 0.0);
    for (i, (&xv, &u)) in x.data().iter().zip(upstream.data()).enumerate() {
        let s = (xv - r.b) / r.a_p;
        g_beta += u;
        if s <= 0.0 {
            continue;
        }
        let xbar = if s >= 1.0 { 1.0 } else { (r.steps * s).round() / r.steps };
        g_alphap += u * xbar;
        if s < 1.0 {
            let d = u * r.alpha_p / r.a_p;
            gx[i] = d;
            g_b -= d;
            g_ap -= d * s;
        }
    }
    match q.mode {
        QuantMode::Symmetric => {
            g_ap -= 0.5 * g_b;
            g_alphap -= 0.5 * g_beta;
            g_b = 0.0;
            g_beta = 0.0;
        }
        QuantMode::NonNegative => g_beta = 0.0,
        QuantMode::Asymmetric => {}
    }
    if q.beta_pinned {
        g_beta = 0.0;
    }
    DuqGrads {
        x: Tensor::new(x.shape().to_vec(), gx).expect("same shape"),
        a: g_ap * softplus_grad(q.a),
        b: g_b,
        alpha: g_alphap * softplus_grad(q.alpha),
        beta: g_beta,
    }
}

/// Lowest and highest supported weight bit-widths.
pub const WEIGHT_BITS: std::ops::RangeInclusive<u32> = 2..=8;

/// Odd, zero-centred level count for weights.
pub fn weight_levels(bits: u32) -> u32 {
    (1 << bits) - 1
}

/// Level count for activations.
pub fn activation_levels(bits: u32) -> u32 {
    1 << bits
}

/// Symmetric weight quantizer with `2^bit − 1` levels covering `±3σ` of the
/// weight tensor.
pub fn make_weight_quantizer(bit: u32, weight: &Tensor) -> Result<QuantParams> {
    if !WEIGHT_BITS.contains(&bit) {
        return Err(Error::InvalidArgument(format!(
            "weight bit-width must lie in {WEIGHT_BITS:?}, got {bit}"
        )));
    }
    weight_quantizer_for(weight, weight_levels(bit))
}

/// Symmetric `±3σ` quantizer with an arbitrary level count.
pub fn weight_quantizer_for(weight: &Tensor, n_lv: u32) -> Result<QuantParams> {
    let std = weight.std();
    let range = if std > 0.0 { 3.0 * std } else { weight.max().abs().max(1e-3) };
    QuantParams::symmetric(range, n_lv)
}

/// PACT quantizer state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PactParams {
    pub p: f64,
    pub n_lv: u32,
}

/// Smallest clipping threshold PACT will use; keeps the grid well defined
/// when SGD pushes `p` through zero.
pub const PACT_MIN_P: f64 = 1e-6;

impl PactParams {
    pub fn new(p: f64, n_lv: u32) -> Result<Self> {
        if !(p > 0.0) {
            return Err(Error::InvalidArgument(format!("PACT threshold must be positive, got {p}")));
        }
        if n_lv < 2 {
            return Err(Error::InvalidArgument(format!("n_lv must be ≥ 2, got {n_lv}")));
        }
        Ok(Self { p, n_lv })
    }

    fn threshold(&self) -> f64 {
        self.p.max(PACT_MIN_P)
    }
}

pub fn pact_forward(x: &Tensor, q: &PactParams) -> Tensor {
    let p = q.threshold();
    let steps = (q.n_lv - 1) as f64;
    x.map(|v| {
        let y = v.clamp(0.0, p);
        p * ((y * steps / p).round() / steps)
    })
}

/// Returns `(grad_x, grad_p)`. `grad_p` only collects elements at or above
/// the threshold; `grad_x` passes straight through inside `[0, p)`.
pub fn pact_backward(x: &Tensor, q: &PactParams, upstream: &Tensor) -> (Tensor, f64) {
    let p = q.threshold();
    let mut gp = 0.0;
    let gx = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &u)| {
            if v >= p {
                gp += u;
                0.0
            } else if v >= 0.0 {
                u
            } else {
                0.0
            }
        })
        .collect();
    (Tensor::new(x.shape().to_vec(), gx).expect("same shape"), gp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(n_lv: u32) -> QuantParams {
        QuantParams::from_scales(1.0, 0.0, 1.0, 0.0, n_lv, QuantMode::Asymmetric).unwrap()
    }

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn softplus_round_trip() {
        for y in [1e-4, 0.3, 1.0, 3.375, 40.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn duq_direct_arithmetic() {
        let q = unit(5);
        assert!((duq_forward(&t(&[0.3]), &q).data()[0] - 0.25).abs() < 1e-12);
        assert!((duq_forward(&t(&[2.0]), &q).data()[0] - 1.0).abs() < 1e-12);
        assert_eq!(duq_forward(&t(&[-0.5]), &q).data()[0], 0.0);
    }

    #[test]
    fn hswish_shaped_grid() {
        let q = QuantParams::from_scales(3.375, -0.375, 3.375, -0.375, 16, QuantMode::Asymmetric).unwrap();
        let levels = q.levels();
        assert!((levels[0] + 0.375).abs() < 1e-12);
        assert!((levels[15] - 3.0).abs() < 1e-12);
        // Nearest-level oracle on pseudo-random inputs.
        let mut s = 12345u64;
        let xs: Vec<f64> = (0..10_000)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                (s >> 11) as f64 / (1u64 << 53) as f64 * 5.0 - 1.0
            })
            .collect();
        let y = duq_forward(&t(&xs), &q);
        for (&x, &yv) in xs.iter().zip(y.data()) {
            let xc = x.clamp(-0.375, 3.0);
            let nearest = levels
                .iter()
                .copied()
                .min_by(|a, b| (a - xc).abs().partial_cmp(&(b - xc).abs()).unwrap())
                .unwrap();
            assert!((yv - nearest).abs() < 1e-12, "x={x} y={yv} nearest={nearest}");
        }
    }

    #[test]
    fn saturated_gradients() {
        let q = QuantParams::from_scales(1.0, 0.0, 1.3, 0.2, 5, QuantMode::Asymmetric).unwrap();
        let g = duq_backward(&t(&[3.0]), &q, &t(&[1.0]));
        assert_eq!(g.x.data()[0], 0.0);
        assert_eq!(g.beta, 1.0);
        assert!((g.alpha - softplus_grad(q.alpha)).abs() < 1e-15);
        assert_eq!((g.a, g.b), (0.0, 0.0));

        let g = duq_backward(&t(&[-3.0]), &q, &t(&[1.0]));
        assert_eq!((g.x.data()[0], g.a, g.b, g.alpha, g.beta), (0.0, 0.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn pinned_and_constrained_offsets_get_no_gradient() {
        let x = t(&[-0.2, 0.3, 0.9, 2.0]);
        let u = t(&[1.0, -0.5, 0.25, 2.0]);
        let q = QuantParams::from_scales(1.0, -0.375, 1.0, -0.375, 8, QuantMode::Asymmetric)
            .unwrap()
            .pin_beta(-0.375);
        assert_eq!(duq_backward(&x, &q, &u).beta, 0.0);
        let q = QuantParams::from_scales(1.0, 0.0, 1.0, 0.0, 8, QuantMode::NonNegative).unwrap();
        assert_eq!(duq_backward(&x, &q, &u).beta, 0.0);
        let q = QuantParams::symmetric(1.0, 7).unwrap();
        let g = duq_backward(&x, &q, &u);
        assert_eq!((g.b, g.beta), (0.0, 0.0));
    }

    #[test]
    fn weight_quantizer_levels() {
        let w = Tensor::from_fn(&[64], |i| (i as f64 * 0.37).sin() * 0.1);
        assert_eq!(make_weight_quantizer(8, &w).unwrap().n_lv, 255);
        assert_eq!(make_weight_quantizer(3, &w).unwrap().n_lv, 7);
        assert!(make_weight_quantizer(1, &w).is_err());
        assert!(make_weight_quantizer(9, &w).is_err());
    }

    #[test]
    fn on_grid_weights_are_fixed_point() {
        let q = QuantParams::symmetric(0.3, 7).unwrap();
        let levels = q.levels();
        let w = Tensor::from_fn(&[4, 7], |i| levels[(i * 5) % 7]);
        let y = duq_forward(&w, &q);
        assert!(y.max_abs_diff(&w) < 1e-15);
    }

    #[test]
    fn random_weights_four_bit_symmetric_set() {
        let mut s = 99u64;
        let w = Tensor::from_fn(&[500], |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.4
        });
        let q = make_weight_quantizer(4, &w).unwrap();
        let y = duq_forward(&w, &q);
        let mut distinct: Vec<f64> = y.data().to_vec();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        assert!(distinct.len() <= 15);
        let grid = q.levels();
        assert!(grid.iter().any(|v| v.abs() < 1e-15));
        for (lo, hi) in grid.iter().zip(grid.iter().rev()) {
            assert!((lo + hi).abs() < 1e-12);
        }
    }

    #[test]
    fn pact_examples() {
        let q = PactParams::new(6.0, 4).unwrap();
        let y = pact_forward(&t(&[-1.0, 0.0, 6.0, 2.5, 9.0]), &q);
        assert_eq!(y.data(), &[0.0, 0.0, 6.0, 2.0, 6.0]);
        let q = PactParams::new(0.7, 5).unwrap();
        assert_eq!(pact_forward(&t(&[0.7]), &q).data()[0], 0.7);
        assert!(PactParams::new(0.0, 4).is_err());
    }

    proptest! {
        #[test]
        fn duq_level_count_and_monotone(
            a in -2.0f64..2.0, b in -1.0f64..1.0, alpha in -2.0f64..2.0, beta in -1.0f64..1.0,
            n_lv in 2u32..20, mut xs in proptest::collection::vec(-5.0f64..5.0, 1..200),
        ) {
            let q = QuantParams { a, b, alpha, beta, n_lv, mode: QuantMode::Asymmetric, beta_pinned: false };
            xs.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let y = duq_forward(&t(&xs), &q);
            for w in y.data().windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            let r = q.resolve();
            let mut ks: Vec<i64> = y.data().iter().map(|v| {
                let k = (v - r.beta) / r.alpha_p * r.steps;
                prop_assert!((k - k.round()).abs() < 1e-9);
                prop_assert!(k.round() >= 0.0 && k.round() <= r.steps);
                Ok(k.round() as i64)
            }).collect::<std::result::Result<_, _>>()?;
            ks.dedup();
            prop_assert!(ks.len() <= n_lv as usize);
        }

        #[test]
        fn pact_grad_p_only_above_threshold(p in 0.1f64..5.0, xs in proptest::collection::vec(-2.0f64..8.0, 1..50)) {
            let q = PactParams::new(p, 8).unwrap();
            let ones = Tensor::full(&[xs.len()], 1.0);
            for &x in &xs {
                let (_, gp) = pact_backward(&t(&[x]), &q, &Tensor::full(&[1], 1.0));
                prop_assert_eq!(gp != 0.0, x >= p);
            }
            let (_, total) = pact_backward(&t(&xs), &q, &ones);
            prop_assert_eq!(total, xs.iter().filter(|&&x| x >= p).count() as f64);
        }
    }
}
