//! Engine-versus-oracle checks: the inference engine against the scalar
//! reference implementation, and the MAC counter against loop counting.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use exitq::harvestsim::prepare_bundle;
use exitq::netgraph::{forward_to_exit, ExitPoint};
use exitq::quantizer::BitWidth;

#[test]
fn fp32_forward_matches_oracle_on_random_nets() {
    for seed in 0..40u64 {
        let net = common::random_net(seed);
        let ws = common::random_weights(&net, seed ^ 0xABCD);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let input = common::random_input(&net, &mut rng);
        for exit in ExitPoint::ALL {
            let engine = forward_to_exit(&net, &ws, &input, exit, BitWidth::Fp32).unwrap();
            let oracle = common::oracle_forward_to_exit(&net, &ws, &input, exit, BitWidth::Fp32);
            for (a, b) in engine.data.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-6, "seed {seed} exit {exit}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn quantized_forward_matches_oracle_bit_exactly() {
    for seed in 0..40u64 {
        let net = common::random_net(seed);
        let fp32 = common::random_weights(&net, seed ^ 0xBEEF);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2000);
        let calib: Vec<_> = (0..4).map(|_| common::random_input(&net, &mut rng)).collect();
        let bundle = prepare_bundle(&net, fp32, &calib).unwrap();
        let input = common::random_input(&net, &mut rng);
        for bw in [BitWidth::Q8, BitWidth::Q4] {
            let ws = bundle.get(bw);
            for exit in ExitPoint::ALL {
                let engine = forward_to_exit(&net, ws, &input, exit, bw).unwrap();
                let oracle = common::oracle_forward_to_exit(&net, ws, &input, exit, bw);
                for (a, b) in engine.data.iter().zip(&oracle) {
                    assert_eq!(
                        a.to_bits(),
                        b.to_bits(),
                        "seed {seed} {bw} exit {exit}: {a} vs {b}"
                    );
                }
            }
        }
    }
}

/// With every weight, activation, and quant grid on exactly representable
/// powers of two, the Q8 integer path reproduces the fp32 forward bit for
/// bit: no value ever needs rounding.
#[test]
fn on_grid_q8_equals_fp32_exactly() {
    use exitq::netgraph::{
        ActivationQuant, ExitHead, LayerKind, LayerSpec, MultiExitNetwork, Segment, StoredTensor,
        WeightEntry, WeightSet,
    };
    use exitq::quantizer::{affine_quantize, QuantParams};
    use exitq::tensor::Tensor;

    let conv1x1 = |name: &str| LayerSpec {
        kind: LayerKind::Conv2d {
            name: name.into(),
            in_channels: 1,
            out_channels: 1,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
            bias: false,
        },
        inputs: vec![0],
    };
    let net = MultiExitNetwork::new(
        [
            Segment { layers: vec![conv1x1("a")] },
            Segment { layers: vec![conv1x1("b")] },
            Segment { layers: vec![conv1x1("c")] },
        ],
        [
            ExitHead { fc_name: "h1".into(), in_channels: 1, num_classes: 2 },
            ExitHead { fc_name: "h2".into(), in_channels: 1, num_classes: 2 },
            ExitHead { fc_name: "h3".into(), in_channels: 1, num_classes: 2 },
        ],
        2,
        (1, 2, 2),
    )
    .unwrap();

    // Weights are multiples of 2^-2; activation grids shrink with each
    // multiplication so every intermediate value stays exactly on grid.
    let w_vals: &[(&str, Vec<usize>, Vec<f64>)] = &[
        ("a", vec![1, 1, 1, 1], vec![0.5]),
        ("b", vec![1, 1, 1, 1], vec![-0.25]),
        ("c", vec![1, 1, 1, 1], vec![0.25]),
        ("h1", vec![2, 1], vec![0.5, -0.25]),
        ("h2", vec![2, 1], vec![0.25, 0.5]),
        ("h3", vec![2, 1], vec![-0.5, 0.25]),
    ];
    let pow2 = |e: i32| (2.0f64).powi(e);
    let act = |in_e: i32, out_e: i32| ActivationQuant {
        input: QuantParams::new(pow2(in_e), 0.0, exitq::quantizer::BitWidth::Q8).unwrap(),
        output: QuantParams::new(pow2(out_e), 0.0, exitq::quantizer::BitWidth::Q8).unwrap(),
    };
    let acts: &[(&str, i32, i32)] = &[
        ("a", -2, -4),
        ("b", -4, -6),
        ("c", -6, -8),
        ("h1", -6, -8),
        ("h2", -8, -10),
        ("h3", -10, -12),
    ];

    let mut fp32 = WeightSet::new(exitq::quantizer::BitWidth::Fp32);
    let mut q8 = WeightSet::new(exitq::quantizer::BitWidth::Q8);
    let w_params = QuantParams::new(0.25, 0.0, exitq::quantizer::BitWidth::Q8).unwrap();
    for (name, shape, vals) in w_vals {
        let t = Tensor::new(shape.clone(), vals.clone()).unwrap();
        let bias = (name.starts_with('h')).then(|| Tensor::zeros(vec![2]));
        q8.entries.insert(
            name.to_string(),
            WeightEntry {
                weight: StoredTensor::Quant(affine_quantize(&t, &w_params).unwrap()),
                bias: bias.clone(),
            },
        );
        fp32.entries.insert(
            name.to_string(),
            WeightEntry { weight: StoredTensor::Real(t), bias },
        );
    }
    for (name, in_e, out_e) in acts {
        q8.activations.insert(name.to_string(), act(*in_e, *out_e));
    }

    let input = Tensor::new(vec![1, 2, 2], vec![0.25, -0.5, 0.0, 0.25]).unwrap();
    for exit in ExitPoint::ALL {
        let a = forward_to_exit(&net, &fp32, &input, exit, BitWidth::Fp32).unwrap();
        let b = forward_to_exit(&net, &q8, &input, exit, BitWidth::Q8).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(x.to_bits(), y.to_bits(), "{exit}: fp32 {x} vs q8 {y}");
        }
    }
}

#[test]
fn mac_counter_matches_loop_counting() {
    for seed in 100..140u64 {
        let net = common::random_net(seed);
        for exit in ExitPoint::ALL {
            assert_eq!(
                net.cumulative_macs(exit),
                common::oracle_count_macs(&net, exit),
                "seed {seed} exit {exit}"
            );
        }
    }
}

#[test]
fn mac_counts_decompose_into_stages() {
    for seed in [0u64, 7, 21] {
        let net = common::random_net(seed);
        let [n1, n2, n3] = net.stage_macs();
        // Stage counts telescope back to the cumulative counts, and the
        // cumulative counts decompose into backbone segments plus heads.
        assert_eq!(n1 + n2 + n3, net.cumulative_macs(ExitPoint::Me));
        let s2 = net.segment_backbone_macs(1);
        let h1 = net.exits[0].macs();
        let h2 = net.exits[1].macs();
        assert_eq!(
            net.cumulative_macs(ExitPoint::Ee2),
            net.cumulative_macs(ExitPoint::Ee1) - h1 + s2 + h2
        );
    }
}
