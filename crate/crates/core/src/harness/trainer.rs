//! Mini-batch training loop over a [`Network`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::Dataset;
use super::eval::{accuracy, Accuracy};
use super::model::{ForwardOpts, Network, ParamKind};
use crate::error::{Error, Result};
use crate::tensor::optim::{cosine_lr, EmaState, SgdState};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// A fixed full-precision network whose logits supervise the student.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub net: Network,
    pub temperature: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

/// One row of the per-epoch metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

/// Cosine learning-rate schedule with warmup over one training phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, epochs: usize, steps_per_epoch: usize, warmup_epochs: f64) -> Self {
        let total = epochs * steps_per_epoch;
        let warmup = ((warmup_epochs * steps_per_epoch as f64).round() as usize).min(total.saturating_sub(1));
        Self {
            base_lr,
            total_steps: total,
            warmup_steps: warmup,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        cosine_lr(step, self.total_steps, self.warmup_steps, self.base_lr)
    }
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: Network,
    pub sgd: SgdState,
    pub ema: EmaState,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub quant_lr_scale: f64,
    pub eval_every_epoch: bool,
    pub teacher: Option<Teacher>,
    pub history: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(net: Network, run: &RunConfig) -> Result<Self> {
        let sgd = SgdState::new(run.lr.base_lr, run.momentum, 0.0, &net.params)?;
        let ema = EmaState::new(run.ema_decay, &net.params)?;
        Ok(Self {
            net,
            sgd,
            ema,
            rng: ChaCha8Rng::seed_from_u64(run.seed.wrapping_add(0x7EA1)),
            step: 0,
            batch_size: run.batch_size,
            weight_decay: run.weight_decay,
            quant_lr_scale: run.quant.quant_lr_scale,
            eval_every_epoch: run.eval_every_epoch,
            teacher: None,
            history: Vec::new(),
        })
    }

    /// Learning-rate multiplier per parameter: 0 when frozen.
    pub fn lr_scales(&self) -> Vec<f64> {
        self.net
            .meta
            .iter()
            .map(|m| {
                if m.frozen {
                    0.0
                } else if matches!(m.kind, ParamKind::WeightQuant | ParamKind::ActQuant) {
                    self.quant_lr_scale
                } else {
                    1.0
                }
            })
            .collect()
    }

    /// One SGD step on a batch.
    pub fn step(&mut self, images: &Tensor, labels: &[usize], lr: f64) -> Result<StepStats> {
        let teacher_logits = match &self.teacher {
            Some(t) => Some(t.net.predict(images, images.shape()[0])?),
            None => None,
        };
        let mut tape = Tape::new();
        let vars = self.net.load(&mut tape, true);
        let x = tape.constant(images.clone());
        let fwd = self
            .net
            .forward(&mut tape, &vars, x, ForwardOpts { train: true, capture: false })
            .map_err(|e| self.diverged(e))?;
        let loss = match (&self.teacher, &teacher_logits) {
            (Some(t), Some(tl)) => tape.kd_loss(fwd.logits, tl, labels, t.temperature, t.weight),
            _ => tape.softmax_cross_entropy(fwd.logits, labels),
        }
        .map_err(|e| self.diverged(e))?;
        let loss_value = tape.value(loss).data()[0];
        let correct = super::eval::count_correct(tape.value(fwd.logits), labels, 1);
        tape.backward(loss)?;
        let mut grads: Vec<Option<Tensor>> = vars.iter().map(|&v| tape.grad(v)).collect();
        for (i, g) in grads.iter_mut().enumerate() {
            let Some(g) = g else { continue };
            if self.weight_decay != 0.0 && self.net.meta[i].kind == ParamKind::Weight {
                for (gv, pv) in g.data_mut().iter_mut().zip(self.net.params[i].data()) {
                    *gv += self.weight_decay * pv;
                }
            }
            if !g.is_finite() {
                return Err(Error::Diverged {
                    step: self.step,
                    loss: f64::NAN,
                });
            }
        }
        self.sgd.lr = lr;
        let scales = self.lr_scales();
        self.sgd.step(&mut self.net.params, &grads, &scales)?;
        self.net.apply_bn_stats(&fwd.bn_stats);
        self.ema.update(&self.net.params);
        self.step += 1;
        Ok(StepStats {
            loss: loss_value,
            correct,
            count: labels.len(),
        })
    }

    fn diverged(&self, e: Error) -> Error {
        match e {
            Error::NonFinite(_) => Error::Diverged {
                step: self.step,
                loss: f64::NAN,
            },
            other => other,
        }
    }

    /// Shuffled mini-batch index lists for one epoch. A trailing batch with
    /// fewer than two samples is dropped (batch statistics need two).
    pub fn epoch_batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.rng);
        idx.chunks(self.batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect()
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n / self.batch_size + usize::from(n % self.batch_size >= 2)
    }

    /// Trains one epoch; `phase_step` is advanced once per batch and indexes
    /// the learning-rate schedule.
    pub fn train_epoch(&mut self, data: &Dataset, sched: &LrSchedule, phase_step: &mut usize) -> Result<(StepStats, f64)> {
        if data.len() < 2 {
            return Err(Error::InvalidArgument("training set needs at least two samples".into()));
        }
        let mut total = StepStats::default();
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in self.epoch_batches(data.len()) {
            let b = data.subset(&batch);
            lr = sched.at(*phase_step);
            let s = self.step(&b.images, &b.labels, lr)?;
            if !s.loss.is_finite() {
                return Err(Error::Diverged {
                    step: self.step,
                    loss: s.loss,
                });
            }
            *phase_step += 1;
            loss_sum += s.loss * s.count as f64;
            total.correct += s.correct;
            total.count += s.count;
        }
        total.loss = loss_sum / total.count.max(1) as f64;
        Ok((total, lr))
    }

    /// Runs `epochs` epochs under one cosine schedule and appends them to
    /// the history. `before_epoch` runs ahead of each epoch (used to freeze
    /// layers between stages).
    pub fn run_phase(&mut self, phase: &str, train: &Dataset, test: Option<&Dataset>, epochs: usize, sched: &LrSchedule) -> Result<Vec<EpochLog>> {
        let mut phase_step = 0;
        let mut logs = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let (stats, lr) = self.train_epoch(train, sched, &mut phase_step)?;
            let test_acc = match (self.eval_every_epoch, test) {
                (true, Some(t)) => Some(self.evaluate(t, true)?.top1),
                _ => None,
            };
            let log = EpochLog {
                phase: phase.to_string(),
                epoch: self.history.len(),
                lr,
                train_loss: stats.loss,
                train_acc: stats.correct as f64 / stats.count.max(1) as f64,
                test_acc,
            };
            self.history.push(log.clone());
            logs.push(log);
        }
        Ok(logs)
    }

    /// Calibrates new quantizers and starts their EMA shadows at the
    /// calibrated values.
    pub fn calibrate(&mut self, images: &Tensor) -> Result<()> {
        let before = self.net.params.clone();
        self.net.calibrate(images)?;
        for (i, (old, new)) in before.iter().zip(&self.net.params).enumerate() {
            if old != new {
                self.ema.shadow[i] = new.clone();
            }
        }
        Ok(())
    }

    /// Freezes the given layers: zero learning rate and cleared momentum for
    /// every parameter they own.
    pub fn freeze_layers(&mut self, ids: &[usize]) -> Result<()> {
        for &id in ids {
            let l = self.net.weight_layer(id)?;
            if !l.is_quantized() {
                return Err(Error::InvalidArgument(format!("layer {id} is not quantized")));
            }
            if self.net.is_layer_frozen(id) {
                return Err(Error::AlreadyFrozen(id));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for &id in ids {
            if !seen.insert(id) {
                return Err(Error::AlreadyFrozen(id));
            }
        }
        for &id in ids {
            for p in self.net.freeze_layer(id)? {
                self.sgd.clear_velocity(p);
            }
        }
        Ok(())
    }

    /// Freezes every non-normalization parameter.
    pub fn freeze_all_but_norm(&mut self) {
        for p in self.net.freeze_all_but_norm() {
            self.sgd.clear_velocity(p);
        }
    }

    /// Network with EMA shadows substituted for the live parameters.
    pub fn ema_network(&self) -> Result<Network> {
        self.net.with_param_values(&self.ema.shadow)
    }

    pub fn evaluate(&self, data: &Dataset, use_ema: bool) -> Result<Accuracy> {
        if use_ema {
            accuracy(&self.ema_network()?, data)
        } else {
            accuracy(&self.net, data)
        }
    }
}
