//! Layer primitives and shape propagation.
//!
//! A segment is a tape of layers. Slot 0 of the value tape is the segment
//! input; layer `i` writes slot `i + 1`. Each layer names the tape slots it
//! reads, which is how residual and dense skip connections are wired.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tensor shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    /// `[channels, height, width]` feature map.
    Chw(usize, usize, usize),
    /// Flat vector of the given length.
    Vec(usize),
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Chw(c, h, w) => c * h * w,
            Shape::Vec(n) => n,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Chw(c, h, w) => vec![c, h, w],
            Shape::Vec(n) => vec![n],
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Shape::Chw(c, h, w) => write!(f, "{c}x{h}x{w}"),
            Shape::Vec(n) => write!(f, "vec[{n}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        bias: bool,
    },
    FullyConnected {
        name: String,
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    Relu,
    MaxPool {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    AdaptiveAvgPool {
        output: (usize, usize),
    },
    ResidualAdd,
    DenseConcat,
    Flatten,
    Softmax,
}

impl LayerKind {
    /// Name of the weight entry this layer looks up, if it has parameters.
    pub fn param_name(&self) -> Option<&str> {
        match self {
            LayerKind::Conv2d { name, .. } | LayerKind::FullyConnected { name, .. } => Some(name),
            _ => None,
        }
    }

    /// Weight element count (excluding bias).
    pub fn weight_count(&self) -> usize {
        match self {
            LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => {
                out_channels * in_channels * kernel.0 * kernel.1
            }
            LayerKind::FullyConnected { in_features, out_features, .. } => in_features * out_features,
            _ => 0,
        }
    }

    pub fn bias_count(&self) -> usize {
        match self {
            LayerKind::Conv2d { out_channels, bias: true, .. } => *out_channels,
            LayerKind::FullyConnected { out_features, bias: true, .. } => *out_features,
            _ => 0,
        }
    }

    fn expected_arity(&self) -> (usize, Option<usize>) {
        match self {
            LayerKind::ResidualAdd => (2, Some(2)),
            LayerKind::DenseConcat => (2, None),
            _ => (1, Some(1)),
        }
    }
}

/// A layer plus the tape slots it reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
}

impl LayerSpec {
    pub fn unary(kind: LayerKind, input: usize) -> Self {
        LayerSpec { kind, inputs: vec![input] }
    }
}

pub fn conv_output_hw(h: usize, w: usize, kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Result<(usize, usize)> {
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
        return Err(Error::GraphBuild("kernel and stride must be positive".into()));
    }
    if h + 2 * ph < kh || w + 2 * pw < kw {
        return Err(Error::GraphBuild(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * ph,
            w + 2 * pw
        )));
    }
    Ok(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
}

/// Output shape of one layer given the shapes of its inputs. Total: every
/// mismatch is a build error, never a runtime surprise.
pub fn propagate(kind: &LayerKind, inputs: &[Shape]) -> Result<Shape> {
    let (min, max) = kind.expected_arity();
    if inputs.len() < min || max.is_some_and(|m| inputs.len() > m) {
        return Err(Error::GraphBuild(format!(
            "{kind:?} expects {min}{} inputs, got {}",
            match max {
                Some(m) if m == min => String::new(),
                Some(m) => format!("..={m}"),
                None => "+".into(),
            },
            inputs.len()
        )));
    }
    match kind {
        LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding, .. } => match inputs[0] {
            Shape::Chw(c, h, w) if c == *in_channels => {
                let (oh, ow) = conv_output_hw(h, w, *kernel, *stride, *padding)?;
                Ok(Shape::Chw(*out_channels, oh, ow))
            }
            other => Err(Error::GraphBuild(format!(
                "conv expects {in_channels}-channel feature map, got {other}"
            ))),
        },
        LayerKind::FullyConnected { in_features, out_features, .. } => match inputs[0] {
            Shape::Vec(n) if n == *in_features => Ok(Shape::Vec(*out_features)),
            other => Err(Error::GraphBuild(format!(
                "fully-connected expects vec[{in_features}], got {other}"
            ))),
        },
        LayerKind::Relu => Ok(inputs[0]),
        LayerKind::MaxPool { kernel, stride } => match inputs[0] {
            Shape::Chw(c, h, w) => {
                if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
                    return Err(Error::GraphBuild("pool kernel and stride must be positive".into()));
                }
                if h < kernel.0 || w < kernel.1 {
                    return Err(Error::GraphBuild(format!(
                        "pool kernel {}x{} larger than input {h}x{w}",
                        kernel.0, kernel.1
                    )));
                }
                Ok(Shape::Chw(c, (h - kernel.0) / stride.0 + 1, (w - kernel.1) / stride.1 + 1))
            }
            other => Err(Error::GraphBuild(format!("max pool expects a feature map, got {other}"))),
        },
        LayerKind::AdaptiveAvgPool { output } => match inputs[0] {
            Shape::Chw(c, h, w) => {
                if output.0 == 0 || output.1 == 0 || output.0 > h || output.1 > w {
                    return Err(Error::GraphBuild(format!(
                        "adaptive pool output {}x{} invalid for input {h}x{w}",
                        output.0, output.1
                    )));
                }
                Ok(Shape::Chw(c, output.0, output.1))
            }
            other => Err(Error::GraphBuild(format!("adaptive pool expects a feature map, got {other}"))),
        },
        LayerKind::ResidualAdd => {
            if inputs[0] != inputs[1] {
                return Err(Error::GraphBuild(format!(
                    "residual add shapes differ: {} vs {}",
                    inputs[0], inputs[1]
                )));
            }
            Ok(inputs[0])
        }
        LayerKind::DenseConcat => {
            let (mut c0, h0, w0) = match inputs[0] {
                Shape::Chw(c, h, w) => (c, h, w),
                other => return Err(Error::GraphBuild(format!("concat expects feature maps, got {other}"))),
            };
            for s in &inputs[1..] {
                match *s {
                    Shape::Chw(c, h, w) if h == h0 && w == w0 => c0 += c,
                    other => {
                        return Err(Error::GraphBuild(format!(
                            "concat input {other} does not match {h0}x{w0} spatial size"
                        )))
                    }
                }
            }
            Ok(Shape::Chw(c0, h0, w0))
        }
        LayerKind::Flatten => Ok(Shape::Vec(inputs[0].numel())),
        LayerKind::Softmax => match inputs[0] {
            Shape::Vec(n) => Ok(Shape::Vec(n)),
            other => Err(Error::GraphBuild(format!("softmax expects a vector, got {other}"))),
        },
    }
}
