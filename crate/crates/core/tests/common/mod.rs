#![allow(dead_code)]

use std::io::Write;

use qatkit::harness::config::{ActQuantKind, RunConfig};
use qatkit::profit::{BitPhase, BitSchedule};

/// Prints one verdict line straight to stdout (bypassing test capture) and
/// fails the test when `pass` is false.
pub fn verdict(id: u32, title: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {id:>2} {}: {title} [{detail}]",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
    assert!(pass, "{line}");
}

pub fn full_precision(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::desk_default(seed);
    cfg.bit_schedule = BitSchedule::default();
    cfg.profit = None;
    cfg
}

pub fn eight_bit(seed: u64) -> RunConfig {
    let mut cfg = full_precision(seed);
    cfg.bit_schedule = BitSchedule {
        phases: vec![BitPhase::new(8, Some(8), 2)],
    };
    cfg
}

/// Progressive 8 → 5 → 4 → 3 bits followed by PROFIT.
pub fn three_bit(seed: u64, profit: bool, activation: ActQuantKind) -> RunConfig {
    let mut cfg = RunConfig::desk_default(seed);
    cfg.bit_schedule = BitSchedule {
        phases: vec![
            BitPhase::new(8, Some(8), 1),
            BitPhase::new(5, Some(5), 1),
            BitPhase::new(4, Some(4), 1),
            BitPhase::new(3, Some(3), 2),
        ],
    };
    cfg.quant.activation = activation;
    cfg.profit.as_mut().expect("desk default runs PROFIT").enabled = profit;
    cfg
}

/// A run small enough for many repetitions.
pub fn tiny(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::desk_default(seed);
    if let qatkit::harness::config::DataConfig::Synth(s) = &mut cfg.data {
        s.n_train = 192;
        s.n_test = 64;
    }
    cfg.fp_epochs = 1;
    cfg.bit_schedule = BitSchedule {
        phases: vec![BitPhase::new(8, Some(8), 1), BitPhase::new(4, Some(4), 1)],
    };
    let p = cfg.profit.as_mut().expect("profit");
    p.epochs_per_stage = 1;
    p.bn_epochs = 1;
    p.aiwq_iters = 3;
    cfg
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
