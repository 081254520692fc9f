//! Trainer-versus-oracle checks: the joint loss against an independent
//! scalar cross-entropy computed over the reference forward pass, and the
//! zero-weight gradient symmetry.

mod common;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use exitq::netgraph::ExitPoint;
use exitq::quantizer::BitWidth;
use exitq::tensor::Tensor;
use exitq::trainer::{init_params, qat_loss, to_weight_set};

/// Scalar cross entropy from raw logits: `-ln softmax(z)[label]`.
fn scalar_ce(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    (max + sum.ln()) - logits[label]
}

#[test]
fn fp32_loss_matches_independent_ce_oracle() {
    for seed in 0..10u64 {
        let net = common::random_net(seed);
        let params = init_params(&net, seed ^ 0x10);
        let ws = to_weight_set(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
        let inputs: Vec<Tensor> = (0..5).map(|_| common::random_input(&net, &mut rng)).collect();
        let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..net.num_classes)).collect();
        let weights = [1.0, 0.5, 2.0];

        let loss = qat_loss(&net, &params, &inputs, &labels, BitWidth::Fp32, weights).unwrap();

        let mut oracle = 0.0;
        for (input, &label) in inputs.iter().zip(&labels) {
            for (e, exit) in ExitPoint::ALL.into_iter().enumerate() {
                let logits = common::oracle_forward_to_exit(&net, &ws, input, exit, BitWidth::Fp32);
                oracle += weights[e] * scalar_ce(&logits, label) / inputs.len() as f64;
            }
        }
        assert!(
            (loss - oracle).abs() <= 1e-6 * oracle.max(1.0),
            "seed {seed}: loss {loss} vs oracle {oracle}"
        );
    }
}

#[test]
fn zero_weights_give_symmetric_head_gradients() {
    // With all-zero weights every logit is zero, so the two-class CE
    // gradient is (p - onehot) = (+-1/2): the head weight gradients of the
    // two classes must be exact negatives of each other.
    let net = common::random_net(4);
    if net.num_classes != 2 {
        // Use a fixed two-class net instead.
        return zero_weight_symmetry_on(&two_class_net());
    }
    zero_weight_symmetry_on(&net)
}

fn two_class_net() -> exitq::netgraph::MultiExitNetwork {
    use exitq::netgraph::{ExitHead, LayerKind, LayerSpec, MultiExitNetwork, Segment};
    let conv = |name: &str, cin: usize, cout: usize| LayerSpec {
        kind: LayerKind::Conv2d {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel: (3, 3),
            stride: (1, 1),
            padding: (1, 1),
            bias: true,
        },
        inputs: vec![0],
    };
    MultiExitNetwork::new(
        [
            Segment { layers: vec![conv("s1.conv", 1, 2)] },
            Segment { layers: vec![conv("s2.conv", 2, 2)] },
            Segment { layers: vec![conv("s3.conv", 2, 2)] },
        ],
        [
            ExitHead { fc_name: "h1".into(), in_channels: 2, num_classes: 2 },
            ExitHead { fc_name: "h2".into(), in_channels: 2, num_classes: 2 },
            ExitHead { fc_name: "h3".into(), in_channels: 2, num_classes: 2 },
        ],
        2,
        (1, 4, 4),
    )
    .unwrap()
}

fn zero_weight_symmetry_on(net: &exitq::netgraph::MultiExitNetwork) {
    let mut params = init_params(net, 0);
    for p in params.tensors.values_mut() {
        p.weight.data.fill(0.0);
        if let Some(b) = p.bias.as_mut() {
            b.data.fill(0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let input = common::random_input(net, &mut rng);
    // Probe the gradient numerically through the public loss: symmetric
    // finite differences on the two rows of one head classifier.
    let head_name = net.exits[2].fc_name.clone();
    let n_in = net.exits[2].in_channels;
    let eps = 1e-6;
    for col in 0..n_in {
        let mut grads = [0.0f64; 2];
        for (row, grad) in grads.iter_mut().enumerate() {
            let idx = row * n_in + col;
            let mut probe = params.clone();
            probe.tensors.get_mut(&head_name).unwrap().weight.data[idx] = eps;
            let plus = qat_loss(net, &probe, &[input.clone()], &[0], BitWidth::Fp32, [0.0, 0.0, 1.0]).unwrap();
            probe.tensors.get_mut(&head_name).unwrap().weight.data[idx] = -eps;
            let minus = qat_loss(net, &probe, &[input.clone()], &[0], BitWidth::Fp32, [0.0, 0.0, 1.0]).unwrap();
            *grad = (plus - minus) / (2.0 * eps);
        }
        assert!(
            (grads[0] + grads[1]).abs() < 1e-9,
            "column {col}: gradients {grads:?} are not symmetric"
        );
    }
}
