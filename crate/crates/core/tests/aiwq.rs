mod common;

use qatkit::aiwq::{channel_stats, sample_aiwq, sample_step, AIWQ_EPS};
use qatkit::harness::config::{LayerDesc, LayerKind, NetConfig};
use qatkit::harness::data::load_data;
use qatkit::harness::model::{Layer, Network, ParamKind};
use qatkit::harness::trainer::Trainer;
use qatkit::quant::QuantParams;
use qatkit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn calibrated_trainer(seed: u64, bits: u32) -> (Trainer, qatkit::harness::data::Dataset) {
    let cfg = common::tiny(seed);
    let (train, _) = load_data(&cfg.data, cfg.seed).unwrap();
    let mut t = Trainer::new(Network::new(&cfg.net, &cfg.quant, cfg.bn_momentum, seed).unwrap(), &cfg).unwrap();
    t.net.set_bits(Some(bits), Some(bits));
    t.calibrate(&train.images.slice_outer(0, 64)).unwrap();
    (t, train)
}

#[test]
fn zero_learning_rate_gives_zero_metric() {
    let (mut t, train) = calibrated_trainer(1, 4);
    let report = sample_aiwq(&mut t, &train, 3, 0.0).unwrap();
    assert_eq!(report.per_layer.len(), t.net.quantized_layer_ids().len());
    assert!(report.per_layer.values().all(|&m| m == 0.0), "{:?}", report.per_layer);
}

#[test]
fn channel_stats_match_two_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn(&[5, 4, 3, 2], |_| rng.random_range(-3.0..3.0));
    let (mean, var) = channel_stats(&x).unwrap();
    for c in 0..4 {
        let vals: Vec<f64> = (0..5)
            .flat_map(|n| (0..6).map(move |s| (n, s)))
            .map(|(n, s)| x.data()[(n * 4 + c) * 6 + s])
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        assert!((mean[c] - m).abs() < 1e-12 && (var[c] - v).abs() < 1e-12);
    }
}

/// One 1x1 conv (one channel, no normalization) feeding an unquantized
/// classifier whose weights make a larger feature lower the loss for class 0.
#[test]
fn single_layer_threshold_crossing() {
    let mut conv = LayerDesc::conv(1, 1, 1, qatkit::Activation::HSwish);
    conv.activation = None;
    conv.batch_norm = false;
    let mut dense = LayerDesc::dense(2);
    dense.quantized = false;
    let net_cfg = NetConfig {
        input_shape: [1, 2, 2],
        num_classes: 2,
        blocks: vec![conv, dense],
    };
    let mut cfg = common::tiny(0);
    cfg.net = net_cfg.clone();
    let mut net = Network::new(&net_cfg, &cfg.quant, cfg.bn_momentum, 0).unwrap();
    assert_eq!(net.config.blocks[0].kind, LayerKind::Conv);
    let images = Tensor::new(vec![4, 1, 2, 2], (1..=16).map(|v| v as f64 / 16.0).collect()).unwrap();
    let labels = vec![0; 4];
    net.set_levels(Some(3), None);
    net.calibrate(&images).unwrap();

    // Levels {-1, 0, 1} with thresholds at +-0.5; the weight sits just below 0.5.
    let (wq_param, w_param) = match &net.layers[0] {
        Layer::Weight(l) => (l.weight_quant.as_ref().unwrap().param, l.weight),
        _ => unreachable!(),
    };
    net.params[wq_param] = Tensor::new(vec![4], QuantParams::symmetric(1.0, 3).unwrap().raw().to_vec()).unwrap();
    net.params[w_param] = Tensor::new(vec![1, 1, 1, 1], vec![0.5 - 1e-6]).unwrap();
    for (m, p) in net.meta.iter().zip(net.params.iter_mut()) {
        if m.owner == Some(1) {
            let v = if m.kind == ParamKind::Weight { vec![1.0, -1.0] } else { vec![0.0; p.len()] };
            *p = Tensor::new(p.shape().to_vec(), v).unwrap();
        }
    }
    let mut t = Trainer::new(net, &cfg).unwrap();
    assert_eq!(t.net.effective_weight(0).unwrap().data(), &[0.0]);

    let metrics = sample_step(&mut t, &images, &labels, 0.1).unwrap();
    let q = t.net.weight_quant_params(0).unwrap().unwrap();
    let w_after = t.net.params[w_param].data()[0];
    assert_eq!(q.level_index(w_after), 2, "weight did not cross the threshold");
    let r = q.resolve();
    let level = r.alpha_p + r.beta;
    assert_eq!(t.net.effective_weight(0).unwrap().data(), &[level]);

    // Before: every output is 0. After: level * x.
    let xs = images.data();
    let mean_x = xs.iter().sum::<f64>() / 16.0;
    let var_x = xs.iter().map(|x| (x - mean_x).powi(2)).sum::<f64>() / 16.0;
    let (m1, v1) = (0.0, AIWQ_EPS);
    let (m2, v2) = (level * mean_x, level * level * var_x + AIWQ_EPS);
    let expected = 0.5 * (v2 / v1).ln() + (v1 + (m1 - m2) * (m1 - m2)) / (2.0 * v2) - 0.5;
    assert_eq!(metrics.len(), 1);
    assert!((metrics[0].1 - expected).abs() <= 1e-9 * expected, "{} vs {expected}", metrics[0].1);
}

#[test]
fn coarse_grid_dominates_fine_grid() {
    let cfg = common::tiny(5);
    let (train, test) = load_data(&cfg.data, cfg.seed).unwrap();
    let mut t = Trainer::new(Network::new(&cfg.net, &cfg.quant, cfg.bn_momentum, 5).unwrap(), &cfg).unwrap();
    let sched = qatkit::harness::trainer::LrSchedule::new(0.1, 2, t.steps_per_epoch(train.len()), 0.0);
    t.run_phase("fp", &train, Some(&test), 2, &sched).unwrap();
    let mut runs = Vec::new();
    for n_lv in [(1 << 16) - 1, 7] {
        let mut arm = t.clone();
        arm.net.set_levels(Some(n_lv), None);
        arm.calibrate(&train.images.slice_outer(0, 64)).unwrap();
        runs.push(sample_aiwq(&mut arm, &train, 20, 0.05).unwrap());
    }
    let (fine, coarse) = (&runs[0].per_layer, &runs[1].per_layer);
    let dominated = fine.iter().filter(|(id, f)| coarse[id] >= **f).count();
    assert!(dominated * 10 >= fine.len() * 9, "fine {fine:?} coarse {coarse:?}");
}
