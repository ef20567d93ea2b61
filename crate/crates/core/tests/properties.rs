use proptest::prelude::*;
use qatkit::aiwq::{gaussian_kl, AiwqReport, AIWQ_EPS};
use qatkit::harness::checkpoint::Checkpoint;
use qatkit::harness::config::{NetConfig, QuantConfig};
use qatkit::harness::data::{encode_idx_u8, parse_idx};
use qatkit::harness::model::Network;
use qatkit::negpad::{negpad_bias, shift_decompose, NegPadRewrite};
use qatkit::profit::build_schedule;
use qatkit::tensor::kernels::{conv2d, h_swish, ConvSpec, HSWISH_MIN};
use qatkit::tensor::optim::{cosine_lr, EmaState};
use qatkit::Tensor;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    proptest::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_output_shape(n in 1usize..3, c in 1usize..4, h in 1usize..8, k in 1usize..4, stride in 1usize..3, pad in 0usize..3) {
        prop_assume!(h + 2 * pad >= k);
        let x = Tensor::zeros(&[n, c, h, h]);
        let w = Tensor::zeros(&[2, c, k, k]);
        let y = conv2d(&x, &w, None, &ConvSpec::new(stride, pad)).unwrap();
        let o = (h + 2 * pad - k) / stride + 1;
        prop_assert_eq!(y.shape(), &[n, 2, o, o]);
    }

    #[test]
    fn shifted_hswish_is_non_negative(x in tensor(vec![2, 3, 4, 4])) {
        let s = shift_decompose(&h_swish(&x), HSWISH_MIN);
        prop_assert!(s.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn negpad_bias_is_conv_of_constant(w in tensor(vec![3, 2, 3, 3]), pad in 0usize..3, stride in 1usize..3) {
        let bias = negpad_bias(&w, HSWISH_MIN).unwrap();
        let constant = Tensor::full(&[1, 2, 5, 5], HSWISH_MIN);
        let y = conv2d(&constant, &w, None, &ConvSpec::new(stride, pad).pad_value(HSWISH_MIN)).unwrap();
        let per = y.len() / 3;
        for (i, v) in y.data().iter().enumerate() {
            prop_assert!((v - bias.data()[i / per]).abs() < 1e-12);
        }
    }

    #[test]
    fn negpad_rewrite_is_exact(x in tensor(vec![1, 2, 5, 6]), w in tensor(vec![2, 1, 3, 3]), pad in 0usize..3, stride in 1usize..3) {
        let rw = NegPadRewrite::new(w, None, ConvSpec::new(stride, pad).groups(2), HSWISH_MIN).unwrap();
        let a = h_swish(&x);
        prop_assert!(rw.rewritten(&a).unwrap().max_abs_diff(&rw.original(&a).unwrap()) <= 1e-12);
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_equal(m1 in -3.0f64..3.0, v1 in 0.0f64..4.0, m2 in -3.0f64..3.0, v2 in 0.0f64..4.0) {
        prop_assert!(gaussian_kl(m1, v1, m2, v2, AIWQ_EPS) >= -1e-12);
        prop_assert_eq!(gaussian_kl(m1, v1, m1, v1, AIWQ_EPS), 0.0);
    }

    #[test]
    fn schedule_partitions_layers(metrics in proptest::collection::vec(0.0f64..1.0, 1..30), frac in 0.0f64..1.0) {
        let n = metrics.len();
        let n_profit = 1 + ((n - 1) as f64 * frac) as usize;
        let report = AiwqReport {
            per_layer: metrics.iter().copied().enumerate().collect(),
            names: (0..n).map(|i| (i, format!("l{i}"))).collect(),
            iterations_sampled: 1,
        };
        let s = build_schedule(&report, n_profit, 1, 1).unwrap();
        prop_assert_eq!(s.stages.len(), n_profit);
        let mut order = s.order();
        prop_assert!(order.windows(2).all(|w| metrics[w[0]] >= metrics[w[1]]));
        order.sort_unstable();
        prop_assert_eq!(order, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn cosine_lr_stays_in_range(step in 0usize..500, total in 1usize..500, warm in 0usize..100, base in 0.0f64..1.0) {
        let lr = cosine_lr(step, total, warm.min(total), base);
        prop_assert!((0.0..=base).contains(&lr));
    }

    #[test]
    fn ema_closed_form(decay in 0.5f64..0.999, k in 1usize..50) {
        let params = vec![Tensor::full(&[3], 1.0)];
        let mut ema = EmaState::new(decay, &[Tensor::zeros(&[3])]).unwrap();
        for _ in 0..k {
            ema.update(&params);
        }
        let expected = 1.0 - decay.powi(k as i32);
        prop_assert!(ema.shadow[0].data().iter().all(|&v| (v - expected).abs() < 1e-12));
    }

    #[test]
    fn idx_round_trip(rows in 1usize..6, cols in 1usize..6, seed in any::<u8>()) {
        let data: Vec<u8> = (0..rows * cols).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let bytes = encode_idx_u8(&[rows, cols], &data).unwrap();
        let parsed = parse_idx(&bytes).unwrap();
        prop_assert_eq!(parsed.dims, vec![rows, cols]);
        prop_assert_eq!(parsed.data, data.iter().map(|&v| v as f64).collect::<Vec<_>>());
        prop_assert!(parse_idx(&bytes[..bytes.len() - 1]).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), classes in 2usize..6, bits in 2u32..9) {
        let mut net = Network::new(&NetConfig::default_micro(classes), &QuantConfig::default(), 0.1, seed).unwrap();
        net.set_bits(Some(bits), Some(bits));
        let images = Tensor::from_fn(&[4, 1, 16, 16], |i| ((i as u64 ^ seed) % 17) as f64 / 17.0);
        net.calibrate(&images).unwrap();
        let bytes = Checkpoint::from_network(&net).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.network, &net);
        prop_assert_eq!(back.network.predict(&images, 4).unwrap(), net.predict(&images, 4).unwrap());
    }
}
