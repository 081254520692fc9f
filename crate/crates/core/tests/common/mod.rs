//! Shared test support: an independent scalar-loop reference
//! implementation of the forward pass (the oracle the engine is checked
//! against), a per-output-element MAC counter, and random network /
//! weight generators.
//!
//! The oracle is written from the layer definitions alone and must stay
//! independent of the engine's code paths.

#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use exitq::netgraph::{
    ExitHead, ExitPoint, LayerKind, LayerSpec, MultiExitNetwork, Segment, StoredTensor, WeightSet,
};
use exitq::quantizer::{BitWidth, QuantParams};
use exitq::tensor::Tensor;

// Scalar reference forward pass

fn ref_quantize_codes(x: &[f64], p: &QuantParams) -> Vec<i32> {
    let (qmin, qmax) = p.code_range();
    x.iter()
        .map(|&v| {
            let r = ((v - p.zero_point) / p.scale).round();
            if r < qmin as f64 {
                qmin
            } else if r > qmax as f64 {
                qmax
            } else {
                r as i32
            }
        })
        .collect()
}

fn ref_requantize(v: f64, p: &QuantParams) -> f64 {
    let (qmin, qmax) = p.code_range();
    let r = ((v - p.zero_point) / p.scale).round();
    let code = if r < qmin as f64 {
        qmin
    } else if r > qmax as f64 {
        qmax
    } else {
        r as i32
    };
    code as f64 * p.scale + p.zero_point
}

struct RefValue {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl RefValue {
    fn chw(&self) -> (usize, usize, usize) {
        (self.shape[0], self.shape[1], self.shape[2])
    }
    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        let (_, h, w) = self.chw();
        let _ = h;
        self.data[(c * self.shape[1] + y) * w + x]
    }
}

fn ref_conv(
    x: &RefValue,
    kind: &LayerKind,
    weights: &WeightSet,
    precision: BitWidth,
) -> RefValue {
    let (name, cin, cout, (kh, kw), (sh, sw), (ph, pw), has_bias) = match kind {
        LayerKind::Conv2d { name, in_channels, out_channels, kernel, stride, padding, bias } => {
            (name.as_str(), *in_channels, *out_channels, *kernel, *stride, *padding, *bias)
        }
        _ => unreachable!(),
    };
    let (_, h, w) = x.chw();
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    let entry = weights.entries.get(name).expect("oracle weight");
    let bias = entry.bias.as_ref().map(|b| b.data.as_slice());
    assert_eq!(bias.is_some(), has_bias);
    let mut out = vec![0.0f64; cout * oh * ow];

    match (&entry.weight, precision) {
        (StoredTensor::Real(wt), BitWidth::Fp32) => {
            for oc in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.map_or(0.0, |b| b[oc]);
                        for ic in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * sh + ky) as isize - ph as isize;
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += wt.data[((oc * cin + ic) * kh + ky) * kw + kx]
                                            * x.at(ic, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out[(oc * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        (StoredTensor::Quant(qw), bw) if bw.is_quantized() => {
            let act = weights.activations.get(name).expect("oracle activation params");
            let ca = ref_quantize_codes(&x.data, &act.input);
            let dw = qw.params.scale;
            let aw = qw.params.zero_point;
            let da = act.input.scale;
            let aa = act.input.zero_point;
            for oc in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s_wa: i64 = 0;
                        let mut s_w: i64 = 0;
                        let mut s_a: i64 = 0;
                        let mut taps: i64 = 0;
                        for ic in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * sh + ky) as isize - ph as isize;
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        let cw = qw.codes[((oc * cin + ic) * kh + ky) * kw + kx] as i64;
                                        let a = ca[(ic * h + iy as usize) * w + ix as usize] as i64;
                                        s_wa += cw * a;
                                        s_w += cw;
                                        s_a += a;
                                        taps += 1;
                                    }
                                }
                            }
                        }
                        let y = dw * da * s_wa as f64
                            + dw * aa * s_w as f64
                            + aw * da * s_a as f64
                            + taps as f64 * aw * aa
                            + bias.map_or(0.0, |b| b[oc]);
                        out[(oc * oh + oy) * ow + ox] = ref_requantize(y, &act.output);
                    }
                }
            }
        }
        _ => panic!("oracle: weight storage does not match precision"),
    }
    RefValue { shape: vec![cout, oh, ow], data: out }
}

fn ref_fc(x: &[f64], kind: &LayerKind, weights: &WeightSet, precision: BitWidth) -> Vec<f64> {
    let (name, n_in, n_out, has_bias) = match kind {
        LayerKind::FullyConnected { name, in_features, out_features, bias } => {
            (name.as_str(), *in_features, *out_features, *bias)
        }
        _ => unreachable!(),
    };
    assert_eq!(x.len(), n_in);
    let entry = weights.entries.get(name).expect("oracle weight");
    let bias = entry.bias.as_ref().map(|b| b.data.as_slice());
    assert_eq!(bias.is_some(), has_bias);
    let mut out = vec![0.0f64; n_out];
    match (&entry.weight, precision) {
        (StoredTensor::Real(wt), BitWidth::Fp32) => {
            for (o, slot) in out.iter_mut().enumerate() {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for (i, &xi) in x.iter().enumerate() {
                    acc += wt.data[o * n_in + i] * xi;
                }
                *slot = acc;
            }
        }
        (StoredTensor::Quant(qw), bw) if bw.is_quantized() => {
            let act = weights.activations.get(name).expect("oracle activation params");
            let ca = ref_quantize_codes(x, &act.input);
            let dw = qw.params.scale;
            let aw = qw.params.zero_point;
            let da = act.input.scale;
            let aa = act.input.zero_point;
            for (o, slot) in out.iter_mut().enumerate() {
                let mut s_wa: i64 = 0;
                let mut s_w: i64 = 0;
                let mut s_a: i64 = 0;
                for (i, &a) in ca.iter().enumerate() {
                    let cw = qw.codes[o * n_in + i] as i64;
                    s_wa += cw * a as i64;
                    s_w += cw;
                    s_a += a as i64;
                }
                let y = dw * da * s_wa as f64
                    + dw * aa * s_w as f64
                    + aw * da * s_a as f64
                    + n_in as f64 * aw * aa
                    + bias.map_or(0.0, |b| b[o]);
                *slot = ref_requantize(y, &act.output);
            }
        }
        _ => panic!("oracle: weight storage does not match precision"),
    }
    out
}

fn ref_apply(
    kind: &LayerKind,
    inputs: &[usize],
    slots: &[RefValue],
    weights: &WeightSet,
    precision: BitWidth,
) -> RefValue {
    let x = &slots[inputs[0]];
    match kind {
        LayerKind::Conv2d { .. } => ref_conv(x, kind, weights, precision),
        LayerKind::FullyConnected { .. } => {
            let out = ref_fc(&x.data, kind, weights, precision);
            RefValue { shape: vec![out.len()], data: out }
        }
        LayerKind::Relu => RefValue {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        },
        LayerKind::MaxPool { kernel, stride } => {
            let (c, h, w) = x.chw();
            let oh = (h - kernel.0) / stride.0 + 1;
            let ow = (w - kernel.1) / stride.1 + 1;
            let mut data = vec![0.0f64; c * oh * ow];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        for ky in 0..kernel.0 {
                            for kx in 0..kernel.1 {
                                let v = x.at(ch, oy * stride.0 + ky, ox * stride.1 + kx);
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        data[(ch * oh + oy) * ow + ox] = best;
                    }
                }
            }
            RefValue { shape: vec![c, oh, ow], data }
        }
        LayerKind::AdaptiveAvgPool { output } => ref_avg_pool(x, *output),
        LayerKind::ResidualAdd => {
            let y = &slots[inputs[1]];
            RefValue {
                shape: x.shape.clone(),
                data: x.data.iter().zip(&y.data).map(|(&a, &b)| a + b).collect(),
            }
        }
        LayerKind::DenseConcat => {
            let (_, h, w) = x.chw();
            let mut data = Vec::new();
            let mut c_total = 0;
            for &slot in inputs {
                data.extend_from_slice(&slots[slot].data);
                c_total += slots[slot].shape[0];
            }
            RefValue { shape: vec![c_total, h, w], data }
        }
        LayerKind::Flatten => RefValue { shape: vec![x.data.len()], data: x.data.clone() },
        LayerKind::Softmax => {
            let max = x.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = x.data.iter().map(|&v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            RefValue { shape: x.shape.clone(), data: exps.into_iter().map(|e| e / sum).collect() }
        }
    }
}

fn ref_avg_pool(x: &RefValue, output: (usize, usize)) -> RefValue {
    let (c, h, w) = x.chw();
    let (oh, ow) = output;
    let mut data = vec![0.0f64; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let y0 = oy * h / oh;
            let y1 = ((oy + 1) * h).div_ceil(oh);
            for ox in 0..ow {
                let x0 = ox * w / ow;
                let x1 = ((ox + 1) * w).div_ceil(ow);
                let mut acc = 0.0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        acc += x.at(ch, iy, ix);
                    }
                }
                data[(ch * oh + oy) * ow + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    RefValue { shape: vec![c, oh, ow], data }
}

/// Reference forward through segments `1..=exit` plus the exit head.
pub fn oracle_forward_to_exit(
    net: &MultiExitNetwork,
    weights: &WeightSet,
    input: &Tensor,
    exit: ExitPoint,
    precision: BitWidth,
) -> Vec<f64> {
    let mut cur = RefValue { shape: input.shape.clone(), data: input.data.clone() };
    for seg in &net.segments[..exit.index()] {
        let mut slots = vec![cur];
        for layer in &seg.layers {
            let out = ref_apply(&layer.kind, &layer.inputs, &slots, weights, precision);
            slots.push(out);
        }
        cur = slots.pop().unwrap();
    }
    let head = &net.exits[exit.index() - 1];
    let pooled = ref_avg_pool(&cur, (1, 1));
    ref_fc(&pooled.data, &head.classifier(), weights, precision)
}

/// Per-output-element MAC counting: one count per (output element, kernel
/// tap) pair for convs (padded taps included, matching the closed form),
/// one per (row, column) pair for fully connected layers.
pub fn oracle_count_macs(net: &MultiExitNetwork, exit: ExitPoint) -> u64 {
    use exitq::netgraph::Shape;
    let mut total: u64 = 0;
    let mut shape = net.input_shape_chw();
    for seg in &net.segments[..exit.index()] {
        let shapes = seg.propagate(shape).expect("valid graph");
        for (i, layer) in seg.layers.iter().enumerate() {
            match &layer.kind {
                LayerKind::Conv2d { in_channels, kernel, .. } => {
                    if let Shape::Chw(cout, oh, ow) = shapes[i + 1] {
                        for _oc in 0..cout {
                            for _oy in 0..oh {
                                for _ox in 0..ow {
                                    total += (in_channels * kernel.0 * kernel.1) as u64;
                                }
                            }
                        }
                    }
                }
                LayerKind::FullyConnected { in_features, out_features, .. } => {
                    for _o in 0..*out_features {
                        total += *in_features as u64;
                    }
                }
                _ => {}
            }
        }
        shape = *shapes.last().unwrap();
    }
    let head = &net.exits[exit.index() - 1];
    for _o in 0..head.num_classes {
        total += head.in_channels as u64;
    }
    total
}

// Random generators

pub fn random_input(net: &MultiExitNetwork, rng: &mut ChaCha8Rng) -> Tensor {
    let (c, h, w) = net.input_shape;
    let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor { shape: vec![c, h, w], data }
}

/// Random fp32 weights (and biases) matching a network's parametric layers.
pub fn random_weights(net: &MultiExitNetwork, seed: u64) -> WeightSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ws = WeightSet::new(BitWidth::Fp32);
    for kind in net.param_layers() {
        let name = kind.param_name().unwrap().to_string();
        let shape = match &kind {
            LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => {
                vec![*out_channels, *in_channels, kernel.0, kernel.1]
            }
            LayerKind::FullyConnected { in_features, out_features, .. } => {
                vec![*out_features, *in_features]
            }
            _ => unreachable!(),
        };
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let bias = (kind.bias_count() > 0).then(|| Tensor {
            shape: vec![kind.bias_count()],
            data: (0..kind.bias_count()).map(|_| rng.gen_range(-0.3..0.3)).collect(),
        });
        ws.entries.insert(
            name,
            exitq::netgraph::WeightEntry {
                weight: StoredTensor::Real(Tensor { shape, data }),
                bias,
            },
        );
    }
    ws
}

/// Random small multi-exit network: each segment draws one of several
/// block shapes (plain conv chain, residual block, concat block, pooled
/// conv), with random channel counts. Regenerates until validation
/// passes.
pub fn random_net(seed: u64) -> MultiExitNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..64 {
        if let Ok(net) = try_random_net(&mut rng) {
            return net;
        }
    }
    panic!("random net generation failed for seed {seed}");
}

fn try_random_net(rng: &mut ChaCha8Rng) -> Result<MultiExitNetwork, exitq::Error> {
    use exitq::netgraph::Shape;
    let num_classes = rng.gen_range(2..=4usize);
    let c_in = rng.gen_range(1..=3usize);
    let h_in = rng.gen_range(6..=8usize);
    let mut shape = Shape::Chw(c_in, h_in, h_in);
    let mut segments = Vec::with_capacity(3);
    let mut heads = Vec::with_capacity(3);
    for seg_idx in 0..3 {
        let channels = match shape {
            Shape::Chw(c, _, _) => c,
            _ => unreachable!(),
        };
        let cout = rng.gen_range(2..=4usize);
        let mut layers = Vec::new();
        match rng.gen_range(0..4u8) {
            // conv + relu
            0 => {
                layers.push(conv_spec(format!("s{seg_idx}.conv"), channels, cout, 3, 1, 1, 0));
                layers.push(LayerSpec::unary(LayerKind::Relu, 1));
            }
            // residual block: conv(c->c) + relu + add back to input
            1 => {
                layers.push(conv_spec(format!("s{seg_idx}.conv"), channels, channels, 3, 1, 1, 0));
                layers.push(LayerSpec::unary(LayerKind::Relu, 1));
                layers.push(LayerSpec { kind: LayerKind::ResidualAdd, inputs: vec![2, 0] });
            }
            // concat block: input ++ conv output
            2 => {
                layers.push(conv_spec(format!("s{seg_idx}.conv"), channels, cout, 3, 1, 1, 0));
                layers.push(LayerSpec { kind: LayerKind::DenseConcat, inputs: vec![0, 1] });
            }
            // conv + max pool
            _ => {
                layers.push(conv_spec(format!("s{seg_idx}.conv"), channels, cout, 3, 1, 1, 0));
                layers.push(LayerSpec {
                    kind: LayerKind::MaxPool { kernel: (2, 2), stride: (2, 2) },
                    inputs: vec![1],
                });
            }
        }
        let segment = Segment { layers };
        shape = segment.output_shape(shape)?;
        let out_channels = match shape {
            Shape::Chw(c, _, _) => c,
            _ => return Err(exitq::Error::Invalid("bad random segment".into())),
        };
        heads.push(ExitHead {
            fc_name: format!("s{seg_idx}.head"),
            in_channels: out_channels,
            num_classes,
        });
        segments.push(segment);
    }
    let segments: [Segment; 3] = segments.try_into().unwrap();
    let heads: [ExitHead; 3] = heads.try_into().unwrap();
    MultiExitNetwork::new(segments, heads, num_classes, (c_in, h_in, h_in))
}

fn conv_spec(name: String, cin: usize, cout: usize, k: usize, s: usize, p: usize, input: usize) -> LayerSpec {
    LayerSpec {
        kind: LayerKind::Conv2d {
            name,
            in_channels: cin,
            out_channels: cout,
            kernel: (k, k),
            stride: (s, s),
            padding: (p, p),
            bias: true,
        },
        inputs: vec![input],
    }
}

// Simulation fixture

use exitq::eats::{derive_thresholds, HardwareProfile, PerPrecision, SchedulerThresholds};
use exitq::exitpolicy::ExitThresholds;
use exitq::harvestsim::{prepare_bundle, SimConfig, WeightBundle, DEFAULT_DT};

pub struct SimFixture {
    pub net: MultiExitNetwork,
    pub bundle: WeightBundle,
    pub profile: HardwareProfile,
    pub thresholds: SchedulerThresholds,
}

/// Cheap three-conv network plus a hardware profile scaled so a full run
/// lasts a few dozen ticks at fp32 and a couple of ticks at Q4.
pub fn sim_fixture() -> SimFixture {
    let conv = |name: &str, cin: usize, cout: usize| conv_spec(name.into(), cin, cout, 3, 1, 1, 0);
    let relu = |i: usize| LayerSpec::unary(LayerKind::Relu, i);
    let net = MultiExitNetwork::new(
        [
            Segment { layers: vec![conv("s1.conv", 1, 4), relu(1)] },
            Segment { layers: vec![conv("s2.conv", 4, 4), relu(1)] },
            Segment { layers: vec![conv("s3.conv", 4, 4), relu(1)] },
        ],
        [
            ExitHead { fc_name: "ee1.fc".into(), in_channels: 4, num_classes: 2 },
            ExitHead { fc_name: "ee2.fc".into(), in_channels: 4, num_classes: 2 },
            ExitHead { fc_name: "me.fc".into(), in_channels: 4, num_classes: 2 },
        ],
        2,
        (1, 6, 6),
    )
    .unwrap();
    let fp32 = random_weights(&net, 0x5EED);
    let mut rng = ChaCha8Rng::seed_from_u64(0xCA11);
    let calib: Vec<_> = (0..4).map(|_| random_input(&net, &mut rng)).collect();
    let bundle = prepare_bundle(&net, fp32, &calib).unwrap();
    let profile = HardwareProfile {
        e_mac: PerPrecision { fp32: 2e-6, q8: 5e-7, q4: 2.5e-7 },
        delay_mac: PerPrecision { fp32: 2e-6, q8: 2e-6 / 6.0, q4: 2e-6 / 12.0 },
        f_max: 1.0,
        kappa_rate: 1.2,
        kappa_energy: 1.2,
    };
    let thresholds = derive_thresholds(&profile, &net).unwrap();
    SimFixture { net, bundle, profile, thresholds }
}

impl SimFixture {
    pub fn config(&self, e_cap: f64, e_init: f64, confidence: ExitThresholds) -> SimConfig {
        SimConfig {
            dt: DEFAULT_DT,
            e_cap,
            e_init,
            seed: 99,
            profile: self.profile,
            thresholds: self.thresholds,
            confidence,
        }
    }
}
