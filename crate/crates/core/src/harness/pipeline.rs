//! End-to-end training: full precision, progressive quantization, PROFIT.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::config::{QuantConfig, RunConfig};
use super::data::Dataset;
use super::eval::Accuracy;
use super::model::Network;
use super::trainer::{EpochLog, Teacher, Trainer};
use crate::aiwq::{sample_aiwq, AiwqReport};
use crate::error::{Error, Result};
use crate::profit::{build_schedule, run_profit, run_progressive, stage_log_csv, StageLog, TrainContext};

/// Environment variable naming the directory under which the CLI creates
/// run directories.
pub const RUN_ROOT_ENV: &str = "QATKIT_RUN_ROOT";

#[derive(Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub aiwq: Option<AiwqReport>,
    pub stages: Vec<StageLog>,
    /// Test accuracy of the EMA network.
    pub test: Accuracy,
}

pub fn metrics_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from("epoch,phase,lr,train_loss,train_acc,test_acc\n");
    for l in logs {
        let test = l.test_acc.map(|t| t.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{},{test}", l.epoch, l.phase, l.lr, l.train_loss, l.train_acc);
    }
    s
}

fn write(dir: Option<&Path>, name: &str, contents: &str) -> Result<()> {
    if let Some(d) = dir {
        let p = d.join(name);
        std::fs::write(&p, contents).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

/// Trains the full-precision distillation teacher: the student topology at
/// `kd.teacher_width` times the width.
pub fn train_teacher(run: &RunConfig, train: &Dataset, test: &Dataset) -> Result<Network> {
    let kd = run.kd.as_ref().ok_or_else(|| Error::Config("no distillation settings".into()))?;
    let cfg = run.net.widened(kd.teacher_width);
    let net = Network::new(&cfg, &QuantConfig::default(), run.bn_momentum, run.seed.wrapping_add(1))?;
    let mut t = Trainer::new(net, run)?;
    t.eval_every_epoch = false;
    let ctx = TrainContext {
        train,
        test,
        lr: &run.lr,
    };
    ctx.run_phase(&mut t, "teacher", kd.teacher_epochs, run.lr.fp_base_lr.unwrap_or(run.lr.base_lr))?;
    t.ema_network()
}

/// Builds the initial network: a fresh initialization or `init_checkpoint`.
pub fn initial_network(run: &RunConfig) -> Result<Network> {
    match &run.init_checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.network.config != run.net {
                return Err(Error::Config(format!("{} was trained with a different network", p.display())));
            }
            Ok(ck.network)
        }
        None => Network::new(&run.net, &run.quant, run.bn_momentum, run.seed),
    }
}

/// Runs the configured pipeline. With `out_dir` set, writes the resolved
/// config, the epoch and stage logs, the AIWQ report and checkpoints there.
pub fn train(run: &RunConfig, train: &Dataset, test: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    run.validate()?;
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    write(out_dir, "config.json", &run.to_json())?;
    let mut trainer = Trainer::new(initial_network(run)?, run)?;
    if let Some(kd) = &run.kd {
        let net = match &kd.teacher_checkpoint {
            Some(p) => Checkpoint::load(p)?.eval_network(false)?,
            None => train_teacher(run, train, test)?,
        };
        trainer.teacher = Some(Teacher {
            net,
            temperature: kd.temperature,
            weight: kd.weight,
        });
    }
    let ctx = TrainContext {
        train,
        test,
        lr: &run.lr,
    };
    if run.fp_epochs > 0 {
        ctx.run_phase(&mut trainer, "fp", run.fp_epochs, run.lr.fp_base_lr.unwrap_or(run.lr.base_lr))?;
    }
    run_progressive(&mut trainer, ctx, &run.bit_schedule)?;
    write(out_dir, "metrics.csv", &metrics_csv(&trainer.history))?;
    let mut aiwq = None;
    let mut stages = Vec::new();
    if let Some(p) = &run.profit {
        let report = sample_aiwq(&mut trainer, train, p.aiwq_iters, run.lr.base_lr)?;
        write(out_dir, "aiwq.csv", &report.to_csv())?;
        let schedule = build_schedule(&report, p.n_profit, p.epochs_per_stage, p.bn_epochs)?;
        let mut save_stage = |t: &Trainer, log: &StageLog| -> Result<()> {
            if let Some(d) = out_dir {
                let name = if log.bn_only { "stage_bn.ckpt".to_string() } else { format!("stage{}.ckpt", log.stage) };
                Checkpoint::from_trainer(t, Some(run)).save(&d.join(name))?;
            }
            Ok(())
        };
        stages = run_profit(&mut trainer, ctx, &schedule, Some(&report), p.enabled, &mut save_stage)?;
        write(out_dir, "stages.csv", &stage_log_csv(&stages))?;
        aiwq = Some(report);
    }
    write(out_dir, "metrics.csv", &metrics_csv(&trainer.history))?;
    if let Some(d) = out_dir {
        Checkpoint::from_trainer(&trainer, Some(run)).save(&d.join("final.ckpt"))?;
    }
    let test_acc = trainer.evaluate(test, true)?;
    Ok(TrainOutcome {
        trainer,
        aiwq,
        stages,
        test: test_acc,
    })
}

/// `root/<name>`, where `root` comes from the environment or defaults to
/// `runs`.
pub fn run_dir(name: &str) -> PathBuf {
    let root = std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(name)
}
