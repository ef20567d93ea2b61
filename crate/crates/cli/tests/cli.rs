use std::path::Path;
use std::process::{Command, Output};

use qatkit::harness::config::{DataConfig, NetConfig, RunConfig};
use qatkit::harness::data::{load_data, save_idx};
use qatkit::profit::{BitPhase, BitSchedule};

fn qatkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qatkit")).args(args).output().expect("spawn qatkit")
}

fn ok(args: &[&str]) -> String {
    let out = qatkit(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn value<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in {stdout}"))
}

fn small_run(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::desk_default(seed);
    if let DataConfig::Synth(s) = &mut cfg.data {
        s.n_train = 128;
        s.n_test = 64;
    }
    cfg.fp_epochs = 1;
    cfg.bit_schedule = BitSchedule {
        phases: vec![BitPhase::new(4, Some(4), 1)],
    };
    let p = cfg.profit.as_mut().unwrap();
    p.epochs_per_stage = 1;
    p.bn_epochs = 1;
    p.aiwq_iters = 2;
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let path = dir.join("run.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path.display().to_string()
}

#[test]
fn train_then_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(3);
    let config = write_config(dir.path(), &cfg);
    let out = dir.path().join("run");
    let out_s = out.display().to_string();
    let stdout = ok(&["train", "--config", &config, "--out", &out_s]);
    assert_eq!(value(&stdout, "epochs"), cfg.epoch_budget().to_string());
    for f in ["config.json", "metrics.csv", "aiwq.csv", "stages.csv", "final.ckpt", "stage_bn.ckpt"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let ckpt = out.join("final.ckpt").display().to_string();

    let ema = ok(&["eval", "--ckpt", &ckpt, "--data", &config, "--ema"]);
    assert_eq!(value(&ema, "top1"), value(&stdout, "test_top1"));
    assert_eq!(value(&ema, "samples"), "64");

    // The same split written as IDX gives the same accuracy up to 8-bit pixel rounding.
    let (_, test) = load_data(&cfg.data, cfg.seed).unwrap();
    let (img, lab) = (dir.path().join("t-images.idx"), dir.path().join("t-labels.idx"));
    save_idx(&test, &img, &lab).unwrap();
    let idx = ok(&["eval", "--ckpt", &ckpt, "--data", &img.display().to_string(), "--labels", &lab.display().to_string()]);
    assert_eq!(value(&idx, "samples"), "64");
    let top1: f64 = value(&idx, "top1").parse().unwrap();
    assert!((0.0..=1.0).contains(&top1));

    let aiwq = ok(&["aiwq-profile", "--ckpt", &ckpt, "--iters", "2"]);
    let mut lines = aiwq.lines();
    assert_eq!(lines.next(), Some("layer_id,layer_name,metric"));
    let rows: Vec<f64> = lines.map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(rows.len(), cfg.net.quantized_layer_count());
    assert!(rows.windows(2).all(|w| w[0] >= w[1]));

    let negpad = ok(&["negpad-verify", "--ckpt", &ckpt, "--images", "16"]);
    let errors: Vec<f64> = negpad.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!(!errors.is_empty());
    assert!(errors.iter().all(|&e| e <= 1e-12), "{negpad}");
}

#[test]
fn run_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_run(4));
    let out = Command::new(env!("CARGO_BIN_EXE_qatkit"))
        .args(["train", "--config", &config, "--name", "envrun"])
        .env("QATKIT_RUN_ROOT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("envrun").join("final.ckpt").exists());
}

#[test]
fn cost_report_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let net = dir.path().join("net.json");
    std::fs::write(&net, serde_json::to_string(&NetConfig::default_micro(10)).unwrap()).unwrap();
    let net = net.display().to_string();
    let total = |bits: &str| -> u64 {
        let out = ok(&["cost-report", "--config", &net, "--bits", bits]);
        let total = out.lines().find(|l| l.starts_with("total,")).expect("total row");
        total.rsplit(',').next().unwrap().parse().unwrap()
    };
    assert_eq!(total("4,4") * 4, total("8,8"));
}

#[test]
fn rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "typo_key": 3}"#).unwrap();
    let out = qatkit(&["train", "--config", &bad.display().to_string()]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());

    let net = dir.path().join("net.json");
    std::fs::write(&net, serde_json::to_string(&NetConfig::default_micro(10)).unwrap()).unwrap();
    assert!(!qatkit(&["cost-report", "--config", &net.display().to_string(), "--bits", "4"]).status.success());

    let missing = dir.path().join("none.ckpt").display().to_string();
    assert!(!qatkit(&["negpad-verify", "--ckpt", &missing]).status.success());
}
