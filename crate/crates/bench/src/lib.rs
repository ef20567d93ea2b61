//! Fixtures shared by the benchmarks.

use qatkit::harness::config::RunConfig;
use qatkit::harness::data::{load_data, Dataset};
use qatkit::harness::model::Network;
use qatkit::harness::trainer::Trainer;
use qatkit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// A desk-default trainer quantized to (4,4) and calibrated, with its
/// training split.
pub fn quantized_trainer(seed: u64) -> (Trainer, Dataset) {
    let cfg = RunConfig::desk_default(seed);
    let (train, _) = load_data(&cfg.data, cfg.seed).expect("synthetic data");
    let net = Network::new(&cfg.net, &cfg.quant, cfg.bn_momentum, seed).expect("network");
    let mut trainer = Trainer::new(net, &cfg).expect("trainer");
    trainer.net.set_bits(Some(4), Some(4));
    trainer.calibrate(&train.images.slice_outer(0, 256)).expect("calibration");
    (trainer, train)
}
