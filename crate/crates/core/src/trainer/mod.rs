//! Toy-scale quantization-aware training of multi-exit networks.
//!
//! Training keeps real-valued master weights. At quantized bit widths the
//! forward pass fake-quantizes weights per step (min/max scales) and, once
//! activation observers freeze after the first epoch, activations too;
//! gradients flow through every fake-quant node with the clipped
//! straight-through estimator. The exported weight set re-quantizes the
//! final weights with the observer mode the target bit width calls for.

pub mod dataset;
pub mod ops;

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{
    quantize_weight_set, LayerKind, MultiExitNetwork, StoredTensor, WeightEntry,
    WeightSet,
};
use crate::quantizer::{
    fake_quantize, ste_gradient, ActivationObserverPair, BitWidth, ObserverMode, QuantParams,
    RangeObserver,
};
use crate::tensor::Tensor;

use dataset::LabeledDataset;
use ops::{
    adaptive_avg_pool_backward, concat_backward, conv_backward, conv_forward, fc_backward,
    fc_forward, max_pool_backward, relu_backward, softmax_backward, ConvGeometry,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub bit_width: BitWidth,
    pub exit_loss_weights: [f64; 3],
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Invalid(format!(
                "learning_rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if self.exit_loss_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Invalid("exit loss weights must be nonnegative".into()));
        }
        if self.exit_loss_weights.iter().all(|&w| w == 0.0) {
            return Err(Error::Invalid("exit loss weights must not all be zero".into()));
        }
        Ok(())
    }
}

/// Real-valued master parameters, keyed by parametric layer name.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableParams {
    pub tensors: BTreeMap<String, ParamTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Per-layer weight shapes for a network, heads included.
fn param_shapes(net: &MultiExitNetwork) -> Vec<(String, Vec<usize>, usize, usize)> {
    net.param_layers()
        .into_iter()
        .map(|kind| {
            let name = kind.param_name().unwrap().to_string();
            let (shape, fan_in) = match &kind {
                LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => (
                    vec![*out_channels, *in_channels, kernel.0, kernel.1],
                    in_channels * kernel.0 * kernel.1,
                ),
                LayerKind::FullyConnected { in_features, out_features, .. } => {
                    (vec![*out_features, *in_features], *in_features)
                }
                _ => unreachable!(),
            };
            (name, shape, fan_in, kind.bias_count())
        })
        .collect()
}

/// Seeded uniform init, bound `sqrt(6 / fan_in)`; biases start at zero.
pub fn init_params(net: &MultiExitNetwork, seed: u64) -> TrainableParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape, fan_in, bias_count) in param_shapes(net) {
        let bound = (6.0 / fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
        let bias = (bias_count > 0).then(|| Tensor::zeros(vec![bias_count]));
        tensors.insert(name, ParamTensor { weight: Tensor { shape, data }, bias });
    }
    TrainableParams { tensors }
}

/// Forward-pass quantization behavior.
enum Phase<'a> {
    Fp32,
    /// Fake-quantized weights, raw activations.
    WeightsOnly { bw: BitWidth },
    /// Fake-quantized weights and activations with frozen params.
    Frozen { bw: BitWidth, activations: &'a BTreeMap<String, crate::netgraph::ActivationQuant> },
}

impl Phase<'_> {
    fn weight_bw(&self) -> Option<BitWidth> {
        match self {
            Phase::Fp32 => None,
            Phase::WeightsOnly { bw } | Phase::Frozen { bw, .. } => Some(*bw),
        }
    }
}

/// Min/max-derived quant params for a tensor's current values.
fn minmax_params_of(t: &Tensor, bw: BitWidth) -> Result<QuantParams> {
    RangeObserver::new(ObserverMode::MinMax).observe(t)?.compute_qparams(bw, t)
}

struct LayerRecord {
    name: String,
    x_used: Tensor,
    w_hat: Tensor,
    y_raw: Tensor,
    w_params: Option<QuantParams>,
    act: Option<crate::netgraph::ActivationQuant>,
}

struct SegmentTape {
    slots: Vec<Tensor>,
    records: Vec<Option<LayerRecord>>,
}

struct HeadTape {
    pooled: Tensor,
    record: LayerRecord,
}

struct FullTape {
    segments: Vec<SegmentTape>,
    heads: Vec<HeadTape>,
    logits: [Tensor; 3],
}

/// Observations gathered during the first quantized epoch: activation
/// ranges plus a stashed calibration sample per parametric layer.
#[derive(Debug, Clone, Default)]
pub struct ObserverBank {
    pub layers: BTreeMap<String, ActivationObservation>,
}

#[derive(Debug, Clone)]
pub struct ActivationObservation {
    pub input: RangeObserver,
    pub output: RangeObserver,
    pub input_sample: Tensor,
    pub output_sample: Tensor,
}

impl ObserverBank {
    fn record(&mut self, name: &str, x: &Tensor, y: &Tensor) -> Result<()> {
        match self.layers.get_mut(name) {
            Some(obs) => {
                obs.input = obs.input.observe(x)?;
                obs.output = obs.output.observe(y)?;
            }
            None => {
                self.layers.insert(
                    name.to_string(),
                    ActivationObservation {
                        input: RangeObserver::new(ObserverMode::MinMax).observe(x)?,
                        output: RangeObserver::new(ObserverMode::MinMax).observe(y)?,
                        input_sample: x.clone(),
                        output_sample: y.clone(),
                    },
                );
            }
        }
        Ok(())
    }

    /// Freeze into per-layer activation params at `bw`, using the MSE
    /// observer for Q4 and min/max otherwise.
    pub fn freeze(&self, bw: BitWidth) -> Result<BTreeMap<String, crate::netgraph::ActivationQuant>> {
        let mode = if bw == BitWidth::Q4 { ObserverMode::MseSearch } else { ObserverMode::MinMax };
        let mut out = BTreeMap::new();
        for (name, obs) in &self.layers {
            let mut in_obs = obs.input;
            let mut out_obs = obs.output;
            in_obs.mode = mode;
            out_obs.mode = mode;
            out.insert(
                name.clone(),
                crate::netgraph::ActivationQuant {
                    input: in_obs.compute_qparams(bw, &obs.input_sample)?,
                    output: out_obs.compute_qparams(bw, &obs.output_sample)?,
                },
            );
        }
        Ok(out)
    }

    pub fn ranges(&self) -> BTreeMap<String, ActivationObserverPair> {
        self.layers
            .iter()
            .map(|(k, v)| (k.clone(), (v.input, v.output)))
            .collect()
    }

    pub fn samples(&self) -> BTreeMap<String, (Tensor, Tensor)> {
        self.layers
            .iter()
            .map(|(k, v)| (k.clone(), (v.input_sample.clone(), v.output_sample.clone())))
            .collect()
    }
}

fn conv_geometry(kind: &LayerKind) -> ConvGeometry {
    match kind {
        LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding, .. } => ConvGeometry {
            in_channels: *in_channels,
            out_channels: *out_channels,
            kernel: *kernel,
            stride: *stride,
            padding: *padding,
        },
        _ => unreachable!(),
    }
}

/// Apply a parametric layer under the active phase, producing the output
/// and the record backward needs.
fn apply_parametric(
    kind: &LayerKind,
    x_raw: &Tensor,
    params: &TrainableParams,
    phase: &Phase<'_>,
    bank: Option<&mut ObserverBank>,
) -> Result<(Tensor, LayerRecord)> {
    let name = kind.param_name().unwrap();
    let p = params
        .tensors
        .get(name)
        .ok_or_else(|| Error::MissingWeight(name.to_string()))?;

    let (w_hat, w_params) = match phase.weight_bw() {
        Some(bw) => {
            let qp = minmax_params_of(&p.weight, bw)?;
            (fake_quantize(&p.weight, &qp)?, Some(qp))
        }
        None => (p.weight.clone(), None),
    };
    let act = match phase {
        Phase::Frozen { activations, .. } => Some(
            *activations
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("no frozen activation params for '{name}'")))?,
        ),
        _ => None,
    };
    let x_used = match &act {
        Some(a) => fake_quantize(x_raw, &a.input)?,
        None => x_raw.clone(),
    };
    let y_raw = match kind {
        LayerKind::Conv2d { .. } => conv_forward(&x_used, &w_hat, p.bias.as_ref(), &conv_geometry(kind))?,
        LayerKind::FullyConnected { in_features, out_features, .. } => {
            fc_forward(&x_used, &w_hat, p.bias.as_ref(), *in_features, *out_features)?
        }
        _ => unreachable!(),
    };
    if let Some(bank) = bank {
        bank.record(name, x_raw, &y_raw)?;
    }
    let out = match &act {
        Some(a) => fake_quantize(&y_raw, &a.output)?,
        None => y_raw.clone(),
    };
    let record = LayerRecord { name: name.to_string(), x_used, w_hat, y_raw, w_params, act };
    Ok((out, record))
}

fn forward_full(
    net: &MultiExitNetwork,
    params: &TrainableParams,
    input: &Tensor,
    phase: &Phase<'_>,
    mut bank: Option<&mut ObserverBank>,
) -> Result<FullTape> {
    let mut segments = Vec::with_capacity(3);
    let mut heads = Vec::with_capacity(3);
    let mut logits: Vec<Tensor> = Vec::with_capacity(3);
    let mut cur = input.clone();
    for (seg_idx, segment) in net.segments.iter().enumerate() {
        let mut slots = vec![cur.clone()];
        let mut records: Vec<Option<LayerRecord>> = Vec::with_capacity(segment.layers.len());
        for layer in &segment.layers {
            let out = match &layer.kind {
                LayerKind::Conv2d { .. } | LayerKind::FullyConnected { .. } => {
                    let x = &slots[layer.inputs[0]];
                    let (out, rec) = apply_parametric(&layer.kind, x, params, phase, bank.as_deref_mut())?;
                    records.push(Some(rec));
                    out
                }
                other => {
                    records.push(None);
                    apply_plain(other, &layer.inputs, &slots)?
                }
            };
            slots.push(out);
        }
        cur = slots.last().unwrap().clone();

        // Exit head: pool to 1x1, flatten, classify.
        let head = &net.exits[seg_idx];
        let pooled3 = crate::netgraph::forward::adaptive_avg_pool(&cur, (1, 1))?;
        let pooled = Tensor { shape: vec![pooled3.numel()], data: pooled3.data };
        let (head_logits, record) =
            apply_parametric(&head.classifier(), &pooled, params, phase, bank.as_deref_mut())?;
        logits.push(head_logits);
        heads.push(HeadTape { pooled, record });
        segments.push(SegmentTape { slots, records });
    }
    let logits: [Tensor; 3] = logits.try_into().expect("three exits");
    Ok(FullTape { segments, heads, logits })
}

fn apply_plain(kind: &LayerKind, inputs: &[usize], slots: &[Tensor]) -> Result<Tensor> {
    use crate::netgraph::forward as f;
    let arg = |i: usize| -> &Tensor { &slots[inputs[i]] };
    match kind {
        LayerKind::Relu => Ok(f::relu(arg(0))),
        LayerKind::MaxPool { kernel, stride } => f::max_pool(arg(0), *kernel, *stride),
        LayerKind::AdaptiveAvgPool { output } => f::adaptive_avg_pool(arg(0), *output),
        LayerKind::ResidualAdd => f::residual_add(arg(0), arg(1)),
        LayerKind::DenseConcat => {
            let tensors: Vec<&Tensor> = inputs.iter().map(|&i| &slots[i]).collect();
            f::dense_concat(&tensors)
        }
        LayerKind::Flatten => Ok(Tensor { shape: vec![arg(0).numel()], data: arg(0).data.clone() }),
        LayerKind::Softmax => {
            let p = f::softmax(&arg(0).data)?;
            Ok(Tensor { shape: arg(0).shape.clone(), data: p })
        }
        LayerKind::Conv2d { .. } | LayerKind::FullyConnected { .. } => unreachable!(),
    }
}

/// Accumulated parameter gradients.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    pub tensors: BTreeMap<String, (Tensor, Option<Tensor>)>,
}

impl Grads {
    fn accumulate(&mut self, name: &str, dw: Tensor, db: Option<Tensor>) {
        match self.tensors.get_mut(name) {
            Some((w, b)) => {
                add_into(w, &dw);
                if let (Some(b), Some(db)) = (b.as_mut(), db) {
                    add_into(b, &db);
                }
            }
            None => {
                self.tensors.insert(name.to_string(), (dw, db));
            }
        }
    }
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}

fn scale_tensor(t: &Tensor, k: f64) -> Tensor {
    Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&v| v * k).collect() }
}

/// Backward through one parametric layer's record; returns the gradient at
/// the layer's (raw) input.
fn backward_parametric(
    kind: &LayerKind,
    record: &LayerRecord,
    x_raw: &Tensor,
    params: &TrainableParams,
    d_out: &Tensor,
    grads: &mut Grads,
) -> Result<Tensor> {
    let master = &params.tensors[&record.name];
    let d_y_raw = match &record.act {
        Some(a) => ste_gradient(d_out, &record.y_raw, &a.output)?,
        None => d_out.clone(),
    };
    let want_bias = master.bias.is_some();
    let (d_x_used, d_w_hat, d_b) = match kind {
        LayerKind::Conv2d { .. } => {
            conv_backward(&record.x_used, &record.w_hat, &d_y_raw, &conv_geometry(kind), want_bias)
        }
        LayerKind::FullyConnected { in_features, out_features, .. } => {
            fc_backward(&record.x_used, &record.w_hat, &d_y_raw, *in_features, *out_features, want_bias)
        }
        _ => unreachable!(),
    };
    let d_w = match &record.w_params {
        Some(p) => ste_gradient(&d_w_hat, &master.weight, p)?,
        None => d_w_hat,
    };
    grads.accumulate(&record.name, d_w, d_b);
    match &record.act {
        Some(a) => ste_gradient(&d_x_used, x_raw, &a.input),
        None => Ok(d_x_used),
    }
}

fn backward_full(
    net: &MultiExitNetwork,
    params: &TrainableParams,
    tape: &FullTape,
    d_logits: [Tensor; 3],
    grads: &mut Grads,
) -> Result<()> {
    // Head gradients first: each contributes to its segment's output.
    let mut d_seg_out: Vec<Option<Tensor>> = vec![None; 3];
    for (i, (head_tape, d_l)) in tape.heads.iter().zip(d_logits.into_iter()).enumerate() {
        let head = &net.exits[i];
        let d_pooled = backward_parametric(
            &head.classifier(),
            &head_tape.record,
            &head_tape.pooled,
            params,
            &d_l,
            grads,
        )?;
        let seg_out = tape.segments[i].slots.last().unwrap();
        let d_pooled3 = Tensor { shape: vec![d_pooled.numel(), 1, 1], data: d_pooled.data };
        let d_out = adaptive_avg_pool_backward(&seg_out.shape, &d_pooled3, (1, 1));
        accumulate_opt(&mut d_seg_out[i], d_out);
    }

    // Segments in reverse; each yields the gradient at its input, which is
    // the previous segment's output.
    for seg_idx in (0..3).rev() {
        let Some(d_output) = d_seg_out[seg_idx].take() else { continue };
        let d_input = backward_segment(net, seg_idx, params, tape, d_output, grads)?;
        if seg_idx > 0 {
            accumulate_opt(&mut d_seg_out[seg_idx - 1], d_input);
        }
    }
    Ok(())
}

fn accumulate_opt(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(existing) => add_into(existing, &t),
        None => *slot = Some(t),
    }
}

fn backward_segment(
    net: &MultiExitNetwork,
    seg_idx: usize,
    params: &TrainableParams,
    tape: &FullTape,
    d_output: Tensor,
    grads: &mut Grads,
) -> Result<Tensor> {
    let segment = &net.segments[seg_idx];
    let seg_tape = &tape.segments[seg_idx];
    let n = segment.layers.len();
    let mut d_slots: Vec<Option<Tensor>> = vec![None; n + 1];
    d_slots[n] = Some(d_output);
    for (i, layer) in segment.layers.iter().enumerate().rev() {
        let Some(d_out) = d_slots[i + 1].take() else { continue };
        match &layer.kind {
            LayerKind::Conv2d { .. } | LayerKind::FullyConnected { .. } => {
                let record = seg_tape.records[i].as_ref().expect("parametric record");
                let x_raw = &seg_tape.slots[layer.inputs[0]];
                let d_x = backward_parametric(&layer.kind, record, x_raw, params, &d_out, grads)?;
                accumulate_opt(&mut d_slots[layer.inputs[0]], d_x);
            }
            LayerKind::Relu => {
                let d_x = relu_backward(&seg_tape.slots[layer.inputs[0]], &d_out);
                accumulate_opt(&mut d_slots[layer.inputs[0]], d_x);
            }
            LayerKind::MaxPool { kernel, stride } => {
                let d_x = max_pool_backward(&seg_tape.slots[layer.inputs[0]], &d_out, *kernel, *stride);
                accumulate_opt(&mut d_slots[layer.inputs[0]], d_x);
            }
            LayerKind::AdaptiveAvgPool { output } => {
                let d_x = adaptive_avg_pool_backward(&seg_tape.slots[layer.inputs[0]].shape, &d_out, *output);
                accumulate_opt(&mut d_slots[layer.inputs[0]], d_x);
            }
            LayerKind::ResidualAdd => {
                accumulate_opt(&mut d_slots[layer.inputs[0]], d_out.clone());
                accumulate_opt(&mut d_slots[layer.inputs[1]], d_out);
            }
            LayerKind::DenseConcat => {
                let channels: Vec<usize> =
                    layer.inputs.iter().map(|&s| seg_tape.slots[s].shape[0]).collect();
                for (slot, d) in layer.inputs.iter().zip(concat_backward(&d_out, &channels)) {
                    accumulate_opt(&mut d_slots[*slot], d);
                }
            }
            LayerKind::Flatten => {
                let src_shape = seg_tape.slots[layer.inputs[0]].shape.clone();
                accumulate_opt(
                    &mut d_slots[layer.inputs[0]],
                    Tensor { shape: src_shape, data: d_out.data },
                );
            }
            LayerKind::Softmax => {
                let probs = &seg_tape.slots[i + 1];
                let d_x = softmax_backward(probs, &d_out);
                accumulate_opt(&mut d_slots[layer.inputs[0]], d_x);
            }
        }
    }
    Ok(d_slots[0].take().unwrap_or_else(|| Tensor::zeros(seg_tape.slots[0].shape.clone())))
}

/// Stable cross entropy of one logit vector against a class index;
/// returns the loss and its gradient at the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - max).exp() / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

fn loss_and_grads(
    net: &MultiExitNetwork,
    params: &TrainableParams,
    inputs: &[Tensor],
    labels: &[usize],
    phase: &Phase<'_>,
    exit_weights: [f64; 3],
    mut bank: Option<&mut ObserverBank>,
) -> Result<(f64, Grads)> {
    if inputs.is_empty() {
        return Err(Error::Invalid("batch is empty".into()));
    }
    let n = inputs.len() as f64;
    let mut total = 0.0;
    let mut grads = Grads::default();
    for (input, &label) in inputs.iter().zip(labels) {
        let tape = forward_full(net, params, input, phase, bank.as_deref_mut())?;
        let mut d_logits: Vec<Tensor> = Vec::with_capacity(3);
        for (e, logit) in tape.logits.iter().enumerate() {
            let (loss, grad) = cross_entropy(&logit.data, label)?;
            total += exit_weights[e] * loss / n;
            d_logits.push(scale_tensor(
                &Tensor { shape: logit.shape.clone(), data: grad },
                exit_weights[e] / n,
            ));
        }
        backward_full(net, params, &tape, d_logits.try_into().expect("three exits"), &mut grads)?;
    }
    Ok((total, grads))
}

/// The joint multi-exit loss: per-exit mean cross entropy under
/// fake-quantized weights, combined with the exit weights.
pub fn qat_loss(
    net: &MultiExitNetwork,
    params: &TrainableParams,
    inputs: &[Tensor],
    labels: &[usize],
    bit_width: BitWidth,
    exit_weights: [f64; 3],
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::Invalid("batch is empty".into()));
    }
    let phase = match bit_width {
        BitWidth::Fp32 => Phase::Fp32,
        bw => Phase::WeightsOnly { bw },
    };
    let n = inputs.len() as f64;
    let mut total = 0.0;
    for (input, &label) in inputs.iter().zip(labels) {
        let tape = forward_full(net, params, input, &phase, None)?;
        for (e, logit) in tape.logits.iter().enumerate() {
            let (loss, _) = cross_entropy(&logit.data, label)?;
            total += exit_weights[e] * loss / n;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Main-exit accuracy over the train split.
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weight set at the configured bit width, ready for the engine.
    pub weights: WeightSet,
    /// Real-valued master parameters.
    pub params: TrainableParams,
    pub log: Vec<EpochStats>,
}

/// Plain SGD over the train split. Deterministic for a fixed seed.
pub fn train(net: &MultiExitNetwork, data: &LabeledDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    data.validate()?;
    if data.train.is_empty() {
        return Err(Error::Invalid("dataset has no train split".into()));
    }
    if data.num_classes != net.num_classes {
        return Err(Error::Invalid(format!(
            "dataset has {} classes, network {}",
            data.num_classes, net.num_classes
        )));
    }
    let mut params = init_params(net, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let quantized = config.bit_width.is_quantized();
    let mut bank = ObserverBank::default();
    let mut frozen: Option<BTreeMap<String, crate::netgraph::ActivationQuant>> = None;
    let mut log = Vec::with_capacity(config.epochs);

    let n = data.train.len();
    let mut indices: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        shuffle(&mut indices, &mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, chunk) in indices.chunks(config.batch_size).enumerate() {
            let inputs: Vec<Tensor> = chunk.iter().map(|&i| data.train.inputs[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.train.labels[i]).collect();
            let (loss, grads) = match (&frozen, quantized) {
                (_, false) => loss_and_grads(net, &params, &inputs, &labels, &Phase::Fp32, config.exit_loss_weights, None)?,
                (None, true) => loss_and_grads(
                    net,
                    &params,
                    &inputs,
                    &labels,
                    &Phase::WeightsOnly { bw: config.bit_width },
                    config.exit_loss_weights,
                    Some(&mut bank),
                )?,
                (Some(acts), true) => loss_and_grads(
                    net,
                    &params,
                    &inputs,
                    &labels,
                    &Phase::Frozen { bw: config.bit_width, activations: acts },
                    config.exit_loss_weights,
                    None,
                )?,
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: batch_no, loss });
            }
            epoch_loss += loss * chunk.len() as f64 / n as f64;
            sgd_step(&mut params, &grads, config.learning_rate);
        }
        if quantized && frozen.is_none() {
            frozen = Some(bank.freeze(config.bit_width)?);
        }
        let train_accuracy = eval_accuracy(net, &params, data, config.bit_width, frozen.as_ref())?;
        log.push(EpochStats { epoch, mean_loss: epoch_loss, train_accuracy });
    }

    let fp32_set = to_weight_set(&params);
    let weights = if quantized {
        if frozen.is_none() {
            // Zero-epoch quantized run: calibrate on the first train inputs.
            let k = data.train.len().min(8);
            let phase = Phase::WeightsOnly { bw: config.bit_width };
            for input in &data.train.inputs[..k] {
                forward_full(net, &params, input, &phase, Some(&mut bank))?;
            }
        }
        quantize_weight_set(&fp32_set, config.bit_width, &bank.ranges(), &bank.samples())?
    } else {
        fp32_set
    };
    Ok(TrainOutcome { weights, params, log })
}

fn shuffle(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
}

fn sgd_step(params: &mut TrainableParams, grads: &Grads, lr: f64) {
    for (name, (dw, db)) in &grads.tensors {
        let p = params.tensors.get_mut(name).expect("gradient for unknown param");
        for (w, g) in p.weight.data.iter_mut().zip(&dw.data) {
            *w -= lr * g;
        }
        if let (Some(bias), Some(db)) = (p.bias.as_mut(), db) {
            for (b, g) in bias.data.iter_mut().zip(&db.data) {
                *b -= lr * g;
            }
        }
    }
}

fn eval_accuracy(
    net: &MultiExitNetwork,
    params: &TrainableParams,
    data: &LabeledDataset,
    bw: BitWidth,
    frozen: Option<&BTreeMap<String, crate::netgraph::ActivationQuant>>,
) -> Result<f64> {
    let phase = match (bw, frozen) {
        (BitWidth::Fp32, _) => Phase::Fp32,
        (bw, Some(acts)) => Phase::Frozen { bw, activations: acts },
        (bw, None) => Phase::WeightsOnly { bw },
    };
    let mut correct = 0usize;
    for (input, &label) in data.train.inputs.iter().zip(&data.train.labels) {
        let tape = forward_full(net, params, input, &phase, None)?;
        let me = &tape.logits[2];
        if crate::netgraph::argmax(&me.data) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.train.len() as f64)
}

/// Rebuild trainable parameters from an fp32 weight set.
pub fn params_from_weight_set(ws: &WeightSet) -> Result<TrainableParams> {
    if ws.bit_width != BitWidth::Fp32 {
        return Err(Error::Invalid("expected an fp32 weight set".into()));
    }
    let mut tensors = BTreeMap::new();
    for (name, entry) in &ws.entries {
        let weight = match &entry.weight {
            StoredTensor::Real(t) => t.clone(),
            StoredTensor::Quant(_) => {
                return Err(Error::Invalid(format!("weight '{name}' is not real")))
            }
        };
        tensors.insert(name.clone(), ParamTensor { weight, bias: entry.bias.clone() });
    }
    Ok(TrainableParams { tensors })
}

/// Convert master parameters to an fp32 weight set.
pub fn to_weight_set(params: &TrainableParams) -> WeightSet {
    let mut ws = WeightSet::new(BitWidth::Fp32);
    for (name, p) in &params.tensors {
        ws.entries.insert(
            name.clone(),
            WeightEntry { weight: StoredTensor::Real(p.weight.clone()), bias: p.bias.clone() },
        );
    }
    ws
}

/// Collect activation ranges and calibration samples by running fp32
/// forward passes over `inputs`. Feeds post-training quantization when no
/// QAT observer bank exists.
pub fn collect_activation_stats(
    net: &MultiExitNetwork,
    params: &TrainableParams,
    inputs: &[Tensor],
) -> Result<ObserverBank> {
    let mut bank = ObserverBank::default();
    for input in inputs {
        forward_full(net, params, input, &Phase::Fp32, Some(&mut bank))?;
    }
    Ok(bank)
}

/// Compare analytic gradients of the fp32 loss against central finite
/// differences on a deterministic parameter subset; returns the largest
/// relative error.
pub fn grad_check(
    net: &MultiExitNetwork,
    params: &TrainableParams,
    inputs: &[Tensor],
    labels: &[usize],
    epsilon: f64,
) -> Result<f64> {
    let weights = [1.0, 1.0, 1.0];
    let (_, grads) = loss_and_grads(net, params, inputs, labels, &Phase::Fp32, weights, None)?;
    let mut probe = params.clone();
    let mut max_rel = 0.0f64;
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    for name in names {
        let (dw, db) = &grads.tensors[&name];
        let numel = dw.numel();
        let step = (numel / 5).max(1);
        for idx in (0..numel).step_by(step) {
            let analytic = dw.data[idx];
            let original = probe.tensors[&name].weight.data[idx];
            probe.tensors.get_mut(&name).unwrap().weight.data[idx] = original + epsilon;
            let plus = qat_loss(net, &probe, inputs, labels, BitWidth::Fp32, weights)?;
            probe.tensors.get_mut(&name).unwrap().weight.data[idx] = original - epsilon;
            let minus = qat_loss(net, &probe, inputs, labels, BitWidth::Fp32, weights)?;
            probe.tensors.get_mut(&name).unwrap().weight.data[idx] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            max_rel = max_rel.max(rel_err(analytic, numeric));
        }
        if let Some(db) = db {
            for idx in 0..db.numel() {
                let analytic = db.data[idx];
                let original = probe.tensors[&name].bias.as_ref().unwrap().data[idx];
                probe.tensors.get_mut(&name).unwrap().bias.as_mut().unwrap().data[idx] = original + epsilon;
                let plus = qat_loss(net, &probe, inputs, labels, BitWidth::Fp32, weights)?;
                probe.tensors.get_mut(&name).unwrap().bias.as_mut().unwrap().data[idx] = original - epsilon;
                let minus = qat_loss(net, &probe, inputs, labels, BitWidth::Fp32, weights)?;
                probe.tensors.get_mut(&name).unwrap().bias.as_mut().unwrap().data[idx] = original;
                let numeric = (plus - minus) / (2.0 * epsilon);
                max_rel = max_rel.max(rel_err(analytic, numeric));
            }
        }
    }
    Ok(max_rel)
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{ExitHead, LayerSpec, Segment};

    fn tiny_net() -> MultiExitNetwork {
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
        let relu = |i: usize| LayerSpec::unary(LayerKind::Relu, i);
        MultiExitNetwork::new(
            [
                Segment { layers: vec![conv("s1.conv", 1, 3), relu(1)] },
                Segment { layers: vec![conv("s2.conv", 3, 3), relu(1)] },
                Segment { layers: vec![conv("s3.conv", 3, 3), relu(1)] },
            ],
            [
                ExitHead { fc_name: "ee1.fc".into(), in_channels: 3, num_classes: 2 },
                ExitHead { fc_name: "ee2.fc".into(), in_channels: 3, num_classes: 2 },
                ExitHead { fc_name: "me.fc".into(), in_channels: 3, num_classes: 2 },
            ],
            2,
            (1, 6, 6),
        )
        .unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_k_loss() {
        let (loss, grad) = cross_entropy(&[0.7; 10], 3).unwrap();
        assert!((loss - (10.0f64).ln()).abs() < 1e-12);
        // Gradient sums to zero.
        assert!(grad.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_rejected() {
        assert!(cross_entropy(&[0.0, 0.0], 2).is_err());
    }

    /// Finite differences sit exactly on the ReLU kink when a pre-activation
    /// is 0.0, which zero-init biases make common; grad checks therefore
    /// randomize biases and inputs to keep pre-activations off the kink.
    fn grad_check_setup(net: &MultiExitNetwork, seed: u64, n: usize) -> (TrainableParams, Vec<Tensor>, Vec<usize>) {
        let mut params = init_params(net, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(99));
        for p in params.tensors.values_mut() {
            if let Some(b) = p.bias.as_mut() {
                for v in b.data.iter_mut() {
                    *v = rng.gen_range(-0.2..0.2);
                }
            }
        }
        let (c, h, w) = net.input_shape;
        let mut inputs = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            inputs.push(Tensor { shape: vec![c, h, w], data });
            labels.push(rng.gen_range(0..net.num_classes));
        }
        (params, inputs, labels)
    }

    #[test]
    fn grad_check_tiny_conv_net() {
        let net = tiny_net();
        let (params, inputs, labels) = grad_check_setup(&net, 11, 4);
        let err = grad_check(&net, &params, &inputs, &labels, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn grad_check_fc_only_net() {
        let fc = LayerSpec {
            kind: LayerKind::Conv2d {
                name: "s1".into(),
                in_channels: 1,
                out_channels: 2,
                kernel: (1, 1),
                stride: (1, 1),
                padding: (0, 0),
                bias: true,
            },
            inputs: vec![0],
        };
        let net = MultiExitNetwork::new(
            [
                Segment { layers: vec![fc.clone()] },
                Segment {
                    layers: vec![LayerSpec {
                        kind: LayerKind::Conv2d {
                            name: "s2".into(),
                            in_channels: 2,
                            out_channels: 2,
                            kernel: (1, 1),
                            stride: (1, 1),
                            padding: (0, 0),
                            bias: true,
                        },
                        inputs: vec![0],
                    }],
                },
                Segment {
                    layers: vec![LayerSpec {
                        kind: LayerKind::Conv2d {
                            name: "s3".into(),
                            in_channels: 2,
                            out_channels: 2,
                            kernel: (1, 1),
                            stride: (1, 1),
                            padding: (0, 0),
                            bias: true,
                        },
                        inputs: vec![0],
                    }],
                },
            ],
            [
                ExitHead { fc_name: "h1".into(), in_channels: 2, num_classes: 2 },
                ExitHead { fc_name: "h2".into(), in_channels: 2, num_classes: 2 },
                ExitHead { fc_name: "h3".into(), in_channels: 2, num_classes: 2 },
            ],
            2,
            (1, 2, 2),
        )
        .unwrap();
        let (params, inputs, labels) = grad_check_setup(&net, 3, 4);
        let err = grad_check(&net, &params, &inputs, &labels, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let net = tiny_net();
        let ds = dataset::separable_two_class(5, 8, 0, (1, 6, 6));
        let config = TrainConfig {
            epochs: 2,
            learning_rate: 0.0,
            batch_size: 4,
            bit_width: BitWidth::Fp32,
            exit_loss_weights: [1.0, 1.0, 1.0],
            seed: 42,
        };
        let outcome = train(&net, &ds, &config).unwrap();
        let fresh = init_params(&net, 42);
        assert_eq!(outcome.params, fresh);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let net = tiny_net();
        let ds = dataset::separable_two_class(5, 8, 0, (1, 6, 6));
        let config = TrainConfig {
            epochs: 3,
            learning_rate: 0.05,
            batch_size: 4,
            bit_width: BitWidth::Fp32,
            exit_loss_weights: [1.0, 1.0, 1.0],
            seed: 7,
        };
        let a = train(&net, &ds, &config).unwrap();
        let b = train(&net, &ds, &config).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn ste_blocks_gradient_through_saturated_activations() {
        // Frozen activation params whose representable interval sits far
        // from the actual activations: every fake-quant node saturates, so
        // no parameter receives gradient through them.
        let net = tiny_net();
        let params = init_params(&net, 1);
        let ds = dataset::separable_two_class(2, 2, 0, (1, 6, 6));
        let far = crate::netgraph::ActivationQuant {
            input: QuantParams::new(1e-6, 1e3, BitWidth::Q8).unwrap(),
            output: QuantParams::new(1e-6, 1e3, BitWidth::Q8).unwrap(),
        };
        let acts: BTreeMap<String, crate::netgraph::ActivationQuant> =
            net.param_layer_names().into_iter().map(|n| (n, far)).collect();
        let phase = Phase::Frozen { bw: BitWidth::Q8, activations: &acts };
        let (_, grads) = loss_and_grads(
            &net,
            &params,
            &ds.train.inputs[..1],
            &ds.train.labels[..1],
            &phase,
            [1.0, 1.0, 1.0],
            None,
        )
        .unwrap();
        for (name, (dw, db)) in &grads.tensors {
            assert!(dw.data.iter().all(|&g| g == 0.0), "weight grad leaked through {name}");
            if let Some(db) = db {
                assert!(db.data.iter().all(|&g| g == 0.0), "bias grad leaked through {name}");
            }
        }
    }

    #[test]
    fn invalid_train_configs_rejected() {
        let base = TrainConfig {
            epochs: 1,
            learning_rate: 0.1,
            batch_size: 4,
            bit_width: BitWidth::Fp32,
            exit_loss_weights: [1.0, 1.0, 1.0],
            seed: 0,
        };
        assert!(base.validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..base.clone() }.validate().is_err());
        assert!(TrainConfig { exit_loss_weights: [0.0, 0.0, 0.0], ..base.clone() }.validate().is_err());
        assert!(TrainConfig { exit_loss_weights: [-1.0, 1.0, 1.0], ..base.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: f64::NAN, ..base }.validate().is_err());
    }
}
