//! Progressive freezing (PROFIT) and progressive bit-width reduction.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::aiwq::AiwqReport;
use crate::error::{Error, Result};
use crate::harness::config::LrConfig;
use crate::harness::data::Dataset;
use crate::harness::trainer::{EpochLog, LrSchedule, Trainer};
use crate::quant::{activation_levels, weight_levels, WEIGHT_BITS};

/// Activation bit-widths accepted by a schedule.
pub const ACT_BITS: std::ops::RangeInclusive<u32> = 2..=16;

/// Number of leading training images used to calibrate new quantizers.
pub const CALIBRATION_IMAGES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BitPhase {
    pub weight_bits: u32,
    /// `None` keeps activations in full precision.
    #[serde(default)]
    pub activation_bits: Option<u32>,
    pub epochs: usize,
}

impl BitPhase {
    pub fn new(weight_bits: u32, activation_bits: Option<u32>, epochs: usize) -> Self {
        Self {
            weight_bits,
            activation_bits,
            epochs,
        }
    }

    pub fn levels(&self) -> (u32, Option<u32>) {
        (weight_levels(self.weight_bits), self.activation_bits.map(activation_levels))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BitSchedule {
    pub phases: Vec<BitPhase>,
}

impl BitSchedule {
    pub fn validate(&self) -> Result<()> {
        for p in &self.phases {
            if !WEIGHT_BITS.contains(&p.weight_bits) {
                return Err(Error::Config(format!(
                    "weight bits must lie in {WEIGHT_BITS:?}, got {}",
                    p.weight_bits
                )));
            }
            if let Some(a) = p.activation_bits {
                if !ACT_BITS.contains(&a) {
                    return Err(Error::Config(format!("activation bits must lie in {ACT_BITS:?}, got {a}")));
                }
            }
        }
        for (i, w) in self.phases.windows(2).enumerate() {
            let act_up = match (w[0].activation_bits, w[1].activation_bits) {
                (Some(a), Some(b)) => b > a,
                (Some(_), None) => true,
                _ => false,
            };
            if w[1].weight_bits > w[0].weight_bits || act_up {
                return Err(Error::Config(format!("bit-width increases at phase {}", i + 1)));
            }
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeSchedule {
    pub stages: Vec<Vec<usize>>,
    pub epochs_per_stage: usize,
    pub bn_epochs: usize,
}

impl FreezeSchedule {
    pub fn order(&self) -> Vec<usize> {
        self.stages.concat()
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.len() * self.epochs_per_stage + self.bn_epochs
    }
}

/// Splits the layers, sorted by descending metric, into `n_profit` stages of
/// `⌊N / n_profit⌋` layers; the remainder joins the last stage.
pub fn build_schedule(report: &AiwqReport, n_profit: usize, epochs_per_stage: usize, bn_epochs: usize) -> Result<FreezeSchedule> {
    let order: Vec<usize> = report.sorted().into_iter().map(|e| e.layer_id).collect();
    let n = order.len();
    if n_profit == 0 || n_profit > n {
        return Err(Error::InvalidArgument(format!("n_profit must lie in 1..={n}, got {n_profit}")));
    }
    let size = n / n_profit;
    let stages = (0..n_profit)
        .map(|i| {
            let end = if i + 1 == n_profit { n } else { (i + 1) * size };
            order[i * size..end].to_vec()
        })
        .collect();
    Ok(FreezeSchedule {
        stages,
        epochs_per_stage,
        bn_epochs,
    })
}

/// Sets the learning rate of every parameter owned by the layers (weights,
/// biases and both quantizers) to zero and clears their momentum.
pub fn apply_freeze(trainer: &mut Trainer, layer_ids: &[usize]) -> Result<()> {
    trainer.freeze_layers(layer_ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    /// Stage index; the normalization-only stage comes last.
    pub stage: usize,
    pub bn_only: bool,
    /// Every layer frozen at the end of the stage.
    pub frozen_layers: Vec<usize>,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Mean metric of the layers this stage froze.
    pub mean_aiwq: Option<f64>,
}

pub fn stage_log_csv(logs: &[StageLog]) -> String {
    let mut s = String::from("stage,frozen_layers,train_acc,test_acc,mean_AIWQ\n");
    for l in logs {
        let frozen: Vec<String> = l.frozen_layers.iter().map(usize::to_string).collect();
        let stage = if l.bn_only { "bn".to_string() } else { l.stage.to_string() };
        let aiwq = l.mean_aiwq.map(|m| m.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{stage},{},{},{},{aiwq}", frozen.join(";"), l.train_acc, l.test_acc);
    }
    s
}

/// Train and test splits plus the learning-rate plan shared by the
/// orchestrators.
#[derive(Clone, Copy)]
pub struct TrainContext<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub lr: &'a LrConfig,
}

impl TrainContext<'_> {
    fn schedule(&self, trainer: &Trainer, epochs: usize, base_lr: f64) -> LrSchedule {
        LrSchedule::new(base_lr, epochs, trainer.steps_per_epoch(self.train.len()), self.lr.warmup_epochs)
    }

    /// Trains one phase under its own warmup + cosine schedule.
    pub fn run_phase(&self, trainer: &mut Trainer, name: &str, epochs: usize, base_lr: f64) -> Result<Vec<EpochLog>> {
        let sched = self.schedule(trainer, epochs, base_lr);
        trainer.run_phase(name, self.train, Some(self.test), epochs, &sched)
    }
}

/// Runs the freezing stages followed by the normalization-only stage. With
/// `freeze == false` the identical stage structure trains without freezing
/// (equal-budget control). `on_stage` observes the trainer after each stage.
pub fn run_profit(
    trainer: &mut Trainer,
    ctx: TrainContext<'_>,
    schedule: &FreezeSchedule,
    report: Option<&AiwqReport>,
    freeze: bool,
    on_stage: &mut dyn FnMut(&Trainer, &StageLog) -> Result<()>,
) -> Result<Vec<StageLog>> {
    check_partition(trainer, schedule)?;
    let mut logs = Vec::new();
    let mut frozen: Vec<usize> = Vec::new();
    for (i, stage) in schedule.stages.iter().enumerate() {
        let epochs = ctx.run_phase(trainer, &format!("profit{i}"), schedule.epochs_per_stage, ctx.lr.base_lr)?;
        if freeze {
            apply_freeze(trainer, stage)?;
            frozen.extend_from_slice(stage);
        }
        let mean_aiwq = report.map(|r| {
            let v: Vec<f64> = stage.iter().filter_map(|id| r.per_layer.get(id).copied()).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        });
        let log = StageLog {
            stage: i,
            bn_only: false,
            frozen_layers: frozen.clone(),
            train_acc: epochs.last().map_or(f64::NAN, |e| e.train_acc),
            test_acc: trainer.evaluate(ctx.test, true)?.top1,
            mean_aiwq,
        };
        on_stage(trainer, &log)?;
        logs.push(log);
    }
    if freeze {
        trainer.freeze_all_but_norm();
    }
    let epochs = ctx.run_phase(trainer, "profit_bn", schedule.bn_epochs, ctx.lr.base_lr)?;
    let log = StageLog {
        stage: schedule.stages.len(),
        bn_only: true,
        frozen_layers: frozen,
        train_acc: epochs.last().map_or(f64::NAN, |e| e.train_acc),
        test_acc: trainer.evaluate(ctx.test, true)?.top1,
        mean_aiwq: None,
    };
    on_stage(trainer, &log)?;
    logs.push(log);
    Ok(logs)
}

fn check_partition(trainer: &Trainer, schedule: &FreezeSchedule) -> Result<()> {
    let mut seen = BTreeSet::new();
    for &id in schedule.stages.iter().flatten() {
        trainer.net.weight_layer(id)?;
        if !seen.insert(id) {
            return Err(Error::InvalidArgument(format!("layer {id} appears in two stages")));
        }
    }
    let quantized: BTreeSet<usize> = trainer.net.quantized_layer_ids().into_iter().collect();
    if seen != quantized {
        return Err(Error::InvalidArgument("stages must cover exactly the quantized layers".into()));
    }
    Ok(())
}

/// For each phase: sets the level counts, calibrates quantizers that have
/// never been initialized, and trains the phase's epochs.
pub fn run_progressive(trainer: &mut Trainer, ctx: TrainContext<'_>, bits: &BitSchedule) -> Result<Vec<EpochLog>> {
    bits.validate()?;
    let mut logs = Vec::new();
    let calib = ctx.train.images.slice_outer(0, ctx.train.len().min(CALIBRATION_IMAGES));
    for (i, phase) in bits.phases.iter().enumerate() {
        let (w_lv, a_lv) = phase.levels();
        for l in trainer.net.weight_layers() {
            let w_up = l.weight_quant.as_ref().is_some_and(|q| q.enabled && q.n_lv < w_lv);
            let a_up = l.input_quant.as_ref().is_some_and(|q| q.enabled && a_lv.is_none_or(|a| q.n_lv < a));
            if w_up || a_up {
                return Err(Error::InvalidArgument(format!(
                    "phase {i} would raise the bit-width of layer {}",
                    l.name
                )));
            }
        }
        trainer.net.set_levels(Some(w_lv), a_lv);
        if trainer.net.needs_calibration() {
            trainer.calibrate(&calib)?;
        }
        let name = match phase.activation_bits {
            Some(a) => format!("w{}a{}", phase.weight_bits, a),
            None => format!("w{}", phase.weight_bits),
        };
        logs.extend(ctx.run_phase(trainer, &name, phase.epochs, ctx.lr.base_lr)?);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(metrics: &[f64]) -> AiwqReport {
        AiwqReport {
            per_layer: metrics.iter().copied().enumerate().collect(),
            names: (0..metrics.len()).map(|i| (i, format!("l{i}"))).collect(),
            iterations_sampled: 1,
        }
    }

    #[test]
    fn equal_split_and_remainder() {
        let r = report(&(0..10).map(|i| i as f64).collect::<Vec<_>>());
        let s = build_schedule(&r, 5, 1, 1).unwrap();
        assert!(s.stages.iter().all(|st| st.len() == 2));
        let s = build_schedule(&r, 3, 1, 1).unwrap();
        let sizes: Vec<usize> = s.stages.iter().map(Vec::len).collect();
        assert_eq!(sizes, [3, 3, 4]);
        assert_eq!(s.order(), (0..10).rev().collect::<Vec<_>>());
        assert!(build_schedule(&r, 0, 1, 1).is_err());
        assert!(build_schedule(&r, 11, 1, 1).is_err());
    }

    #[test]
    fn descending_order_with_ties() {
        let s = build_schedule(&report(&[0.5, 0.9, 0.1]), 3, 1, 1).unwrap();
        assert_eq!(s.stages, vec![vec![1], vec![0], vec![2]]);
        let s = build_schedule(&report(&[0.2, 0.7, 0.2, 0.7]), 4, 1, 1).unwrap();
        assert_eq!(s.order(), [1, 3, 0, 2]);
    }

    #[test]
    fn bit_schedule_rules() {
        let ok = BitSchedule {
            phases: vec![BitPhase::new(8, Some(8), 1), BitPhase::new(5, Some(5), 1), BitPhase::new(4, Some(4), 1)],
        };
        ok.validate().unwrap();
        assert_eq!(ok.total_epochs(), 3);
        let levels: Vec<_> = ok.phases.iter().map(BitPhase::levels).collect();
        assert_eq!(levels, [(255, Some(256)), (31, Some(32)), (15, Some(16))]);
        let up = BitSchedule {
            phases: vec![BitPhase::new(4, Some(4), 1), BitPhase::new(5, Some(4), 1)],
        };
        assert!(up.validate().is_err());
        let act_up = BitSchedule {
            phases: vec![BitPhase::new(4, Some(4), 1), BitPhase::new(4, None, 1)],
        };
        assert!(act_up.validate().is_err());
        assert!(BitSchedule { phases: vec![BitPhase::new(9, None, 1)] }.validate().is_err());
    }
}
