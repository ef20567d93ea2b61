//! SGD with momentum, parameter EMA and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Classic (non-Nesterov) momentum SGD: `v ← m·v + g + λ·p`, `p ← p − lr·v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, params: &[Tensor]) -> Result<Self> {
        if lr < 0.0 {
            return Err(Error::InvalidArgument(format!("learning rate must be ≥ 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        })
    }

    /// Applies one update. `lr_scale[i]` multiplies the learning rate of
    /// parameter `i`; parameters without a gradient are left untouched.
    /// A zero effective learning rate never writes the parameter.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>], lr_scale: &[f64]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() || lr_scale.len() != params.len() {
            return Err(Error::Shape("optimizer state does not match parameter list".into()));
        }
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if g.len() != p.len() || self.velocity[i].len() != p.len() {
                return Err(Error::Shape(format!("gradient {i} does not match its parameter")));
            }
            let v = &mut self.velocity[i];
            for ((vj, gj), pj) in v.iter_mut().zip(g.data()).zip(p.data()) {
                *vj = self.momentum * *vj + gj + self.weight_decay * pj;
            }
            let lr = self.lr * lr_scale[i];
            if lr == 0.0 {
                continue;
            }
            for (pj, vj) in p.data_mut().iter_mut().zip(v.iter()) {
                *pj -= lr * vj;
            }
        }
        Ok(())
    }

    pub fn clear_velocity(&mut self, index: usize) {
        self.velocity[index].fill(0.0);
    }
}

/// One plain SGD step with a shared learning rate.
pub fn sgd_step(params: &mut [Tensor], grads: &[Option<Tensor>], state: &mut SgdState) -> Result<()> {
    let ones = vec![1.0; params.len()];
    state.step(params, grads, &ones)
}

/// Exponential moving average of parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: Vec<Tensor>,
}

impl EmaState {
    pub fn new(decay: f64, params: &[Tensor]) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::InvalidArgument(format!("EMA decay must lie in (0, 1), got {decay}")));
        }
        Ok(Self {
            decay,
            shadow: params.to_vec(),
        })
    }

    /// `shadow ← d·shadow + (1 − d)·param`.
    pub fn update(&mut self, params: &[Tensor]) {
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            for (sv, pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = d * *sv + (1.0 - d) * pv;
            }
        }
    }
}

/// Linear warmup from 0 to `base_lr`, then half-cosine decay to 0 at
/// `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let t = (step - warmup_steps) as f64 / span as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_lr_leaves_params_bitwise() {
        let mut p = vec![t(&[-0.0, 1.5, -3.25])];
        let mut st = SgdState::new(0.0, 0.9, 0.0, &p).unwrap();
        st.velocity[0] = vec![-1.0, 2.0, 0.5];
        let before: Vec<u64> = p[0].data().iter().map(|x| x.to_bits()).collect();
        sgd_step(&mut p, &[Some(t(&[1.0, 1.0, 1.0]))], &mut st).unwrap();
        let after: Vec<u64> = p[0].data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn plain_step() {
        let mut p = vec![t(&[1.0])];
        let mut st = SgdState::new(0.1, 0.0, 0.0, &p).unwrap();
        sgd_step(&mut p, &[Some(t(&[1.0]))], &mut st).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let mut p = vec![t(&[0.0])];
        let mut st = SgdState::new(1.0, 0.9, 0.0, &p).unwrap();
        for _ in 0..2 {
            sgd_step(&mut p, &[Some(t(&[1.0]))], &mut st).unwrap();
        }
        assert!((p[0].data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn ema_examples() {
        let mut e = EmaState::new(0.9997, &[t(&[0.0])]).unwrap();
        e.update(&[t(&[1.0])]);
        assert!((e.shadow[0].data()[0] - 0.0003).abs() < 1e-15);

        let mut e = EmaState::new(0.9, &[t(&[0.25])]).unwrap();
        e.update(&[t(&[0.25])]);
        assert_eq!(e.shadow[0].data()[0], 0.25);

        let d: f64 = 0.97;
        let mut e = EmaState::new(d, &[t(&[0.0])]).unwrap();
        for k in 1..=50 {
            e.update(&[t(&[1.0])]);
            assert!((e.shadow[0].data()[0] - (1.0 - d.powi(k))).abs() < 1e-12);
        }
        assert!(EmaState::new(1.0, &[]).is_err());
    }

    #[test]
    fn cosine_schedule_points() {
        let (total, warm, base) = (110, 10, 0.4);
        assert_eq!(cosine_lr(0, total, warm, base), 0.0);
        assert_eq!(cosine_lr(warm, total, warm, base), base);
        assert!(cosine_lr(total, total, warm, base).abs() < 1e-15);
        assert!((cosine_lr(60, total, warm, base) - 0.2).abs() < 1e-12);
    }
}
