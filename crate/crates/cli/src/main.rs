use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use qatkit::aiwq::sample_aiwq;
use qatkit::harness::checkpoint::Checkpoint;
use qatkit::harness::config::{NetConfig, RunConfig};
use qatkit::harness::cost::{bops_report, BitsPolicy};
use qatkit::harness::data::{load_data, load_idx, Dataset};
use qatkit::harness::eval::accuracy;
use qatkit::harness::pipeline::{self, run_dir};
use qatkit::negpad::{report_csv, verify_network};

#[derive(Parser)]
#[command(name = "qatkit", version, about = "Quantization-aware training with DuQ, AIWQ and PROFIT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured training pipeline.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to $QATKIT_RUN_ROOT/<name>.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        name: Option<String>,
    },
    /// Top-1/top-5 accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// IDX image file (with --labels) or a run config whose test split is used.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Evaluate the EMA shadow weights.
        #[arg(long)]
        ema: bool,
    },
    /// Sample the per-layer AIWQ metric from a training checkpoint.
    AiwqProfile {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        /// Sampling learning rate; defaults to the run's base rate.
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Check the negative-padding rewrite of every eligible layer.
    NegpadVerify {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 256)]
        images: usize,
    },
    /// BOPS and model size of a network at uniform bit-widths.
    CostReport {
        /// Network or run config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Activation and weight bits, e.g. `4,4`.
        #[arg(long)]
        bits: String,
        #[arg(long)]
        first_input_bits: Option<u32>,
        /// Bit-width of layers not marked quantized.
        #[arg(long)]
        unquantized_bits: Option<u32>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, out, name } => train(&config, out, name),
        Command::Eval { ckpt, data, labels, ema } => eval(&ckpt, &data, labels.as_deref(), ema),
        Command::AiwqProfile { ckpt, iters, lr } => aiwq_profile(&ckpt, iters, lr),
        Command::NegpadVerify { ckpt, images } => negpad_verify(&ckpt, images),
        Command::CostReport {
            config,
            bits,
            first_input_bits,
            unquantized_bits,
        } => cost_report(&config, &bits, first_input_bits, unquantized_bits),
    }
}

fn train(config: &Path, out: Option<PathBuf>, name: Option<String>) -> Result<()> {
    let run = RunConfig::load(config)?;
    let dir = out.unwrap_or_else(|| run_dir(&name.unwrap_or_else(|| format!("run-seed{}", run.seed))));
    let (train, test) = load_data(&run.data, run.seed)?;
    let outcome = pipeline::train(&run, &train, &test, Some(&dir))?;
    println!("run_dir={}", dir.display());
    println!("epochs={}", outcome.trainer.history.len());
    println!("test_top1={:.4}", outcome.test.top1);
    println!("test_top5={:.4}", outcome.test.top5);
    Ok(())
}

fn checkpoint_data(ck: &Checkpoint) -> Result<(Dataset, Dataset)> {
    let run = ck
        .run_config
        .as_ref()
        .context("checkpoint does not record its run config")?;
    Ok(load_data(&run.data, run.seed)?)
}

fn eval(ckpt: &Path, data: &Path, labels: Option<&Path>, ema: bool) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let set = match labels {
        Some(l) => load_idx(data, l)?,
        None if data.extension().is_some_and(|e| e == "json") => {
            let run = RunConfig::load(data)?;
            load_data(&run.data, run.seed)?.1
        }
        None => bail!("--labels is required with an IDX image file"),
    };
    let net = ck.eval_network(ema)?;
    if set.image_shape() != net.config.input_shape {
        bail!("data images are {:?}, network expects {:?}", set.image_shape(), net.config.input_shape);
    }
    let acc = accuracy(&net, &set)?;
    println!("samples={}", set.len());
    println!("top1={:.4}", acc.top1);
    println!("top5={:.4}", acc.top5);
    Ok(())
}

fn aiwq_profile(ckpt: &Path, iters: usize, lr: Option<f64>) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let (train, _) = checkpoint_data(&ck)?;
    let lr = match lr {
        Some(v) => v,
        None => ck.run_config.as_ref().map(|r| r.lr.base_lr).context("no learning rate")?,
    };
    let mut trainer = ck.into_trainer()?;
    trainer.net.unfreeze_all();
    let report = sample_aiwq(&mut trainer, &train, iters, lr)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn negpad_verify(ckpt: &Path, images: usize) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let (_, test) = checkpoint_data(&ck)?;
    let x = test.images.slice_outer(0, test.len().min(images));
    let rows = verify_network(&ck.eval_network(false)?, &x)?;
    if rows.is_empty() {
        bail!("no negatively padded layers in this network");
    }
    print!("{}", report_csv(&rows));
    Ok(())
}

fn cost_report(config: &Path, bits: &str, first_input_bits: Option<u32>, unquantized_bits: Option<u32>) -> Result<()> {
    let text = std::fs::read_to_string(config).with_context(|| config.display().to_string())?;
    let net: NetConfig = match RunConfig::from_json(&text) {
        Ok(run) => run.net,
        Err(_) => serde_json::from_str(&text).context("expected a network or run config")?,
    };
    net.validate()?;
    let (a, w) = bits.split_once(',').context("--bits takes `act,weight`")?;
    let policy = BitsPolicy {
        act_bits: a.trim().parse().context("activation bits")?,
        weight_bits: w.trim().parse().context("weight bits")?,
        first_input_bits,
        unquantized_bits,
    };
    let report = bops_report(&net, &policy.assign(&net))?;
    print!("{}", report.to_csv());
    Ok(())
}
