//! Inference engine: runs segments and exit heads at fp32 or at a
//! quantized precision.
//!
//! Quantized parametric layers code their input activation, accumulate raw
//! integer products in wide accumulators, and combine them with the affine
//! constants in one fixed expression:
//!
//! ```text
//! y = dw*da*S_wa + dw*aa*S_w + aw*da*S_a + k*aw*aa + bias
//! ```
//!
//! where `S_wa = sum(cw*ca)`, `S_w = sum(cw)`, `S_a = sum(ca)` and `k` is
//! the number of contributing taps. Sums run over in-bounds taps only, so
//! zero padding contributes exactly zero in the real domain. The combined
//! output is then requantized onto the layer's output activation grid.
//! Because the integer sums are exact, any two implementations of this
//! semantics agree bit for bit.

use crate::error::{Error, Result};
use crate::quantizer::{affine_quantize, fake_quantize_one, BitWidth, QuantTensor};
use crate::tensor::Tensor;

use super::layer::{LayerKind, Shape};
use super::network::{ExitPoint, MultiExitNetwork};
use super::weights::{ActivationQuant, StoredTensor, WeightSet};

/// Numerically stable softmax (max subtraction). Errors on non-finite
/// logits; the output sums to one.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Invalid("softmax of empty logits".into()));
    }
    if let Some(index) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Index of the largest logit (first on ties).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub struct ForwardEngine<'a> {
    pub net: &'a MultiExitNetwork,
    pub weights: &'a WeightSet,
    pub precision: BitWidth,
}

impl<'a> ForwardEngine<'a> {
    pub fn new(net: &'a MultiExitNetwork, weights: &'a WeightSet, precision: BitWidth) -> Result<Self> {
        if weights.bit_width != precision {
            return Err(Error::Invalid(format!(
                "weight set holds {} tensors but the forward pass requested {}",
                weights.bit_width, precision
            )));
        }
        Ok(ForwardEngine { net, weights, precision })
    }

    /// Run backbone segment `idx` (0-based) on `input`.
    pub fn forward_segment(&self, idx: usize, input: &Tensor) -> Result<Tensor> {
        let segment = &self.net.segments[idx];
        let mut tape: Vec<Tensor> = Vec::with_capacity(segment.layers.len() + 1);
        tape.push(input.clone());
        for layer in &segment.layers {
            let out = self.apply(&layer.kind, &layer.inputs, &tape)?;
            tape.push(out);
        }
        Ok(tape.pop().unwrap())
    }

    /// Run exit head `idx` (0-based) on the matching segment output,
    /// returning raw logits.
    pub fn forward_exit_head(&self, idx: usize, seg_output: &Tensor) -> Result<Tensor> {
        let head = &self.net.exits[idx];
        let pooled = adaptive_avg_pool(seg_output, (1, 1))?;
        let flat = Tensor { shape: vec![pooled.numel()], data: pooled.data };
        self.linear(&head.classifier(), &flat)
    }

    fn apply(&self, kind: &LayerKind, inputs: &[usize], tape: &[Tensor]) -> Result<Tensor> {
        let arg = |i: usize| -> &Tensor { &tape[inputs[i]] };
        match kind {
            LayerKind::Conv2d { .. } => self.conv2d(kind, arg(0)),
            LayerKind::FullyConnected { .. } => self.linear(kind, arg(0)),
            LayerKind::Relu => Ok(relu(arg(0))),
            LayerKind::MaxPool { kernel, stride } => max_pool(arg(0), *kernel, *stride),
            LayerKind::AdaptiveAvgPool { output } => adaptive_avg_pool(arg(0), *output),
            LayerKind::ResidualAdd => residual_add(arg(0), arg(1)),
            LayerKind::DenseConcat => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|&i| &tape[i]).collect();
                dense_concat(&tensors)
            }
            LayerKind::Flatten => Ok(Tensor { shape: vec![arg(0).numel()], data: arg(0).data.clone() }),
            LayerKind::Softmax => {
                let p = softmax(&arg(0).data)?;
                Ok(Tensor { shape: arg(0).shape.clone(), data: p })
            }
        }
    }

    fn conv2d(&self, kind: &LayerKind, input: &Tensor) -> Result<Tensor> {
        let (name, cin, cout, kernel, stride, padding, has_bias) = match kind {
            LayerKind::Conv2d { name, in_channels, out_channels, kernel, stride, padding, bias } => {
                (name.as_str(), *in_channels, *out_channels, *kernel, *stride, *padding, *bias)
            }
            _ => unreachable!(),
        };
        let (c, h, w) = input.dims3();
        if c != cin {
            return Err(Error::ShapeMismatch {
                expected: format!("{cin} channels for conv '{name}'"),
                got: format!("{c}"),
            });
        }
        let oh = (h + 2 * padding.0 - kernel.0) / stride.0 + 1;
        let ow = (w + 2 * padding.1 - kernel.1) / stride.1 + 1;
        let entry = self.weights.entry(name)?;
        let bias = bias_slice(&entry.bias, has_bias, cout, name)?;
        let mut out = Tensor::zeros(vec![cout, oh, ow]);

        match (&entry.weight, self.precision) {
            (StoredTensor::Real(wt), BitWidth::Fp32) => {
                check_weight_shape(wt.shape.as_slice(), &[cout, cin, kernel.0, kernel.1], name)?;
                for oc in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0f64;
                            for ic in 0..cin {
                                for ky in 0..kernel.0 {
                                    for kx in 0..kernel.1 {
                                        let iy = (oy * stride.0 + ky) as isize - padding.0 as isize;
                                        let ix = (ox * stride.1 + kx) as isize - padding.1 as isize;
                                        if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                            continue;
                                        }
                                        let wv = wt.data[((oc * cin + ic) * kernel.0 + ky) * kernel.1 + kx];
                                        acc += wv * input.at3(ic, iy as usize, ix as usize);
                                    }
                                }
                            }
                            out.set3(oc, oy, ox, acc + bias.map_or(0.0, |b| b[oc]));
                        }
                    }
                }
                Ok(out)
            }
            (StoredTensor::Quant(qw), bw) if bw.is_quantized() => {
                check_weight_shape(qw.shape.as_slice(), &[cout, cin, kernel.0, kernel.1], name)?;
                let act = *self.weights.activation(name)?;
                let coded_in = affine_quantize(input, &act.input)?;
                for oc in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s_wa = 0i64;
                            let mut s_w = 0i64;
                            let mut s_a = 0i64;
                            let mut taps = 0i64;
                            for ic in 0..cin {
                                for ky in 0..kernel.0 {
                                    for kx in 0..kernel.1 {
                                        let iy = (oy * stride.0 + ky) as isize - padding.0 as isize;
                                        let ix = (ox * stride.1 + kx) as isize - padding.1 as isize;
                                        if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                            continue;
                                        }
                                        let cw = qw.codes[((oc * cin + ic) * kernel.0 + ky) * kernel.1 + kx] as i64;
                                        let ca = coded_in.codes[(ic * h + iy as usize) * w + ix as usize] as i64;
                                        s_wa += cw * ca;
                                        s_w += cw;
                                        s_a += ca;
                                        taps += 1;
                                    }
                                }
                            }
                            let y = combine_quantized(qw, &act, s_wa, s_w, s_a, taps)
                                + bias.map_or(0.0, |b| b[oc]);
                            out.set3(oc, oy, ox, fake_quantize_one(y, &act.output));
                        }
                    }
                }
                Ok(out)
            }
            _ => Err(Error::Invalid(format!(
                "weight '{name}' storage does not match precision {}",
                self.precision
            ))),
        }
    }

    fn linear(&self, kind: &LayerKind, input: &Tensor) -> Result<Tensor> {
        let (name, n_in, n_out, has_bias) = match kind {
            LayerKind::FullyConnected { name, in_features, out_features, bias } => {
                (name.as_str(), *in_features, *out_features, *bias)
            }
            _ => unreachable!(),
        };
        if input.numel() != n_in {
            return Err(Error::ShapeMismatch {
                expected: format!("{n_in} inputs for fc '{name}'"),
                got: format!("{}", input.numel()),
            });
        }
        let entry = self.weights.entry(name)?;
        let bias = bias_slice(&entry.bias, has_bias, n_out, name)?;
        let mut out = vec![0.0f64; n_out];

        match (&entry.weight, self.precision) {
            (StoredTensor::Real(wt), BitWidth::Fp32) => {
                check_weight_shape(wt.shape.as_slice(), &[n_out, n_in], name)?;
                for (o, slot) in out.iter_mut().enumerate() {
                    let mut acc = 0.0f64;
                    for i in 0..n_in {
                        acc += wt.data[o * n_in + i] * input.data[i];
                    }
                    *slot = acc + bias.map_or(0.0, |b| b[o]);
                }
                Ok(Tensor { shape: vec![n_out], data: out })
            }
            (StoredTensor::Quant(qw), bw) if bw.is_quantized() => {
                check_weight_shape(qw.shape.as_slice(), &[n_out, n_in], name)?;
                let act = *self.weights.activation(name)?;
                let coded_in = affine_quantize(input, &act.input)?;
                let s_a: i64 = coded_in.codes.iter().map(|&c| c as i64).sum();
                for (o, slot) in out.iter_mut().enumerate() {
                    let mut s_wa = 0i64;
                    let mut s_w = 0i64;
                    for i in 0..n_in {
                        let cw = qw.codes[o * n_in + i] as i64;
                        s_wa += cw * coded_in.codes[i] as i64;
                        s_w += cw;
                    }
                    let y = combine_quantized(qw, &act, s_wa, s_w, s_a, n_in as i64)
                        + bias.map_or(0.0, |b| b[o]);
                    *slot = fake_quantize_one(y, &act.output);
                }
                Ok(Tensor { shape: vec![n_out], data: out })
            }
            _ => Err(Error::Invalid(format!(
                "weight '{name}' storage does not match precision {}",
                self.precision
            ))),
        }
    }
}

/// The fixed affine combine shared by conv and fc. Keep the expression
/// order stable: bit-exact reproducibility of the quantized path depends
/// on it.
#[inline]
fn combine_quantized(qw: &QuantTensor, act: &ActivationQuant, s_wa: i64, s_w: i64, s_a: i64, taps: i64) -> f64 {
    let dw = qw.params.scale;
    let aw = qw.params.zero_point;
    let da = act.input.scale;
    let aa = act.input.zero_point;
    dw * da * s_wa as f64 + dw * aa * s_w as f64 + aw * da * s_a as f64 + taps as f64 * aw * aa
}

fn bias_slice<'b>(bias: &'b Option<Tensor>, declared: bool, n: usize, name: &str) -> Result<Option<&'b [f64]>> {
    match (bias, declared) {
        (Some(b), true) => {
            if b.numel() != n {
                return Err(Error::ShapeMismatch {
                    expected: format!("bias of length {n} for '{name}'"),
                    got: format!("{}", b.numel()),
                });
            }
            Ok(Some(&b.data))
        }
        (None, false) => Ok(None),
        (Some(_), false) => Err(Error::Invalid(format!("layer '{name}' declares no bias but one is stored"))),
        (None, true) => Err(Error::MissingWeight(format!("{name} (bias)"))),
    }
}

fn check_weight_shape(got: &[usize], expected: &[usize], name: &str) -> Result<()> {
    if got != expected {
        return Err(Error::ShapeMismatch {
            expected: format!("{expected:?} for '{name}'"),
            got: format!("{got:?}"),
        });
    }
    Ok(())
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| v.max(0.0)).collect() }
}

pub fn residual_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.shape),
            got: format!("{:?}", b.shape),
        });
    }
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect();
    Ok(Tensor { shape: a.shape.clone(), data })
}

pub fn dense_concat(tensors: &[&Tensor]) -> Result<Tensor> {
    let (_, h, w) = tensors[0].dims3();
    let mut channels = 0;
    for t in tensors {
        let (c, th, tw) = t.dims3();
        if (th, tw) != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: format!("{h}x{w} spatial size"),
                got: format!("{th}x{tw}"),
            });
        }
        channels += c;
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for t in tensors {
        data.extend_from_slice(&t.data);
    }
    Ok(Tensor { shape: vec![channels, h, w], data })
}

pub fn max_pool(x: &Tensor, kernel: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
    let (c, h, w) = x.dims3();
    let oh = (h - kernel.0) / stride.0 + 1;
    let ow = (w - kernel.1) / stride.1 + 1;
    let mut out = Tensor::zeros(vec![c, oh, ow]);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for ky in 0..kernel.0 {
                    for kx in 0..kernel.1 {
                        best = best.max(x.at3(ch, oy * stride.0 + ky, ox * stride.1 + kx));
                    }
                }
                out.set3(ch, oy, ox, best);
            }
        }
    }
    Ok(out)
}

/// Adaptive average pool: window `i` spans `[i*H/oh, ceil((i+1)*H/oh))`.
pub fn adaptive_avg_pool(x: &Tensor, output: (usize, usize)) -> Result<Tensor> {
    let (c, h, w) = x.dims3();
    let (oh, ow) = output;
    if oh == 0 || ow == 0 || oh > h || ow > w {
        return Err(Error::Invalid(format!("adaptive pool output {oh}x{ow} invalid for {h}x{w}")));
    }
    let mut out = Tensor::zeros(vec![c, oh, ow]);
    for ch in 0..c {
        for oy in 0..oh {
            let y0 = oy * h / oh;
            let y1 = ((oy + 1) * h).div_ceil(oh);
            for ox in 0..ow {
                let x0 = ox * w / ow;
                let x1 = ((ox + 1) * w).div_ceil(ow);
                let mut acc = 0.0f64;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        acc += x.at3(ch, iy, ix);
                    }
                }
                out.set3(ch, oy, ox, acc / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    Ok(out)
}

/// Run segments `1..=exit` and the matching exit head, returning raw logits.
pub fn forward_to_exit(
    net: &MultiExitNetwork,
    weights: &WeightSet,
    input: &Tensor,
    exit: ExitPoint,
    precision: BitWidth,
) -> Result<Tensor> {
    let engine = ForwardEngine::new(net, weights, precision)?;
    let expect = net.input_shape_chw();
    let got = Shape::Chw(input.shape[0], input.shape[1], input.shape[2]);
    if input.shape.len() != 3 || got != expect {
        return Err(Error::ShapeMismatch {
            expected: format!("{expect}"),
            got: format!("{:?}", input.shape),
        });
    }
    let mut cur = input.clone();
    for i in 0..exit.index() {
        cur = engine.forward_segment(i, &cur)?;
    }
    engine.forward_exit_head(exit.index() - 1, &cur)
}
