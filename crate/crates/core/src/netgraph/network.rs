//! Multi-exit network assembly: segments, exit heads, presets, validation,
//! and MAC/parameter accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::BitWidth;

use super::layer::{propagate, LayerKind, LayerSpec, Shape};

pub const GRAPH_SCHEMA_VERSION: u32 = 1;

/// Backbone exits in evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExitPoint {
    #[serde(rename = "ee1")]
    Ee1,
    #[serde(rename = "ee2")]
    Ee2,
    #[serde(rename = "me")]
    Me,
}

impl ExitPoint {
    pub const ALL: [ExitPoint; 3] = [ExitPoint::Ee1, ExitPoint::Ee2, ExitPoint::Me];

    /// 1-based exit index.
    pub fn index(self) -> usize {
        match self {
            ExitPoint::Ee1 => 1,
            ExitPoint::Ee2 => 2,
            ExitPoint::Me => 3,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            1 => Ok(ExitPoint::Ee1),
            2 => Ok(ExitPoint::Ee2),
            3 => Ok(ExitPoint::Me),
            other => Err(Error::Invalid(format!("exit index must be 1..=3, got {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExitPoint::Ee1 => "ee1",
            ExitPoint::Ee2 => "ee2",
            ExitPoint::Me => "me",
        }
    }
}

impl std::fmt::Display for ExitPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ExitPoint {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ee1" => Ok(ExitPoint::Ee1),
            "ee2" => Ok(ExitPoint::Ee2),
            "me" => Ok(ExitPoint::Me),
            other => Err(Error::Invalid(format!("unknown exit '{other}'"))),
        }
    }
}

/// A linear tape of layers; see [`super::layer`] for the slot convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub layers: Vec<LayerSpec>,
}

impl Segment {
    /// Shapes of every tape slot, given the segment input shape.
    pub fn propagate(&self, input: Shape) -> Result<Vec<Shape>> {
        let mut shapes = vec![input];
        for (i, layer) in self.layers.iter().enumerate() {
            let mut in_shapes = Vec::with_capacity(layer.inputs.len());
            for &slot in &layer.inputs {
                if slot >= shapes.len() {
                    return Err(Error::GraphBuild(format!(
                        "layer {i} reads tape slot {slot} before it is written"
                    )));
                }
                in_shapes.push(shapes[slot]);
            }
            shapes.push(propagate(&layer.kind, &in_shapes)?);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        Ok(*self.propagate(input)?.last().unwrap())
    }
}

/// Classifier attached after a backbone segment: global average pooling to
/// 1x1 followed by a fully connected layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitHead {
    /// Weight-set name of the classifier layer.
    pub fc_name: String,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl ExitHead {
    pub fn macs(&self) -> u64 {
        (self.in_channels * self.num_classes) as u64
    }

    pub fn weight_count(&self) -> usize {
        self.in_channels * self.num_classes
    }

    pub fn bias_count(&self) -> usize {
        self.num_classes
    }

    pub fn classifier(&self) -> LayerKind {
        LayerKind::FullyConnected {
            name: self.fc_name.clone(),
            in_features: self.in_channels,
            out_features: self.num_classes,
            bias: true,
        }
    }
}

/// Three backbone segments with an exit head after each. Validated on
/// construction: shape propagation must be total and cumulative MAC counts
/// strictly increasing across exits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiExitNetwork {
    pub segments: [Segment; 3],
    pub exits: [ExitHead; 3],
    pub num_classes: usize,
    pub input_shape: (usize, usize, usize),
}

impl MultiExitNetwork {
    pub fn new(
        segments: [Segment; 3],
        exits: [ExitHead; 3],
        num_classes: usize,
        input_shape: (usize, usize, usize),
    ) -> Result<Self> {
        let net = MultiExitNetwork { segments, exits, num_classes, input_shape };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::GraphBuild(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::GraphBuild("input shape dimensions must be positive".into()));
        }
        let shapes = self.segment_output_shapes()?;
        for (i, (shape, head)) in shapes.iter().zip(&self.exits).enumerate() {
            let channels = match *shape {
                Shape::Chw(c, _, _) => c,
                other => {
                    return Err(Error::GraphBuild(format!(
                        "segment {} must end in a feature map for its exit head, got {other}",
                        i + 1
                    )))
                }
            };
            if head.in_channels != channels {
                return Err(Error::GraphBuild(format!(
                    "exit head {} expects {} channels, segment provides {channels}",
                    i + 1,
                    head.in_channels
                )));
            }
            if head.num_classes != self.num_classes {
                return Err(Error::GraphBuild(format!(
                    "exit head {} classifies {} classes, network declares {}",
                    i + 1,
                    head.num_classes,
                    self.num_classes
                )));
            }
        }
        let mut names = std::collections::BTreeSet::new();
        for name in self.param_layer_names() {
            if !names.insert(name.clone()) {
                return Err(Error::GraphBuild(format!("duplicate parametric layer name '{name}'")));
            }
        }
        let m1 = self.cumulative_macs(ExitPoint::Ee1);
        let m2 = self.cumulative_macs(ExitPoint::Ee2);
        let m3 = self.cumulative_macs(ExitPoint::Me);
        if !(m1 < m2 && m2 < m3) {
            return Err(Error::GraphBuild(format!(
                "cumulative MACs must increase strictly across exits, got {m1}, {m2}, {m3}"
            )));
        }
        Ok(())
    }

    pub fn input_shape_chw(&self) -> Shape {
        let (c, h, w) = self.input_shape;
        Shape::Chw(c, h, w)
    }

    /// Output shape of each backbone segment, in order.
    pub fn segment_output_shapes(&self) -> Result<[Shape; 3]> {
        let mut cur = self.input_shape_chw();
        let mut out = [cur; 3];
        for (i, seg) in self.segments.iter().enumerate() {
            cur = seg.output_shape(cur)?;
            out[i] = cur;
        }
        Ok(out)
    }

    /// MACs of backbone segment `i` (0-based), from per-layer accounting:
    /// conv contributes `kh*kw*cin*cout*hout*wout`, fully connected
    /// `in*out`; everything else is free.
    pub fn segment_backbone_macs(&self, i: usize) -> u64 {
        let mut input = self.input_shape_chw();
        for seg in &self.segments[..i] {
            input = seg.output_shape(input).expect("validated at construction");
        }
        segment_macs(&self.segments[i], input)
    }

    /// MACs from the network input through exit `e`, including that exit's
    /// head but no other head.
    pub fn cumulative_macs(&self, e: ExitPoint) -> u64 {
        let idx = e.index();
        let mut total = 0;
        for i in 0..idx {
            total += self.segment_backbone_macs(i);
        }
        total + self.exits[idx - 1].macs()
    }

    /// Per-stage MAC counts obtained by differencing the cumulative counts:
    /// start->EE1, EE1->EE2, EE2->ME. These are the workloads the energy
    /// threshold is computed from.
    pub fn stage_macs(&self) -> [u64; 3] {
        let m1 = self.cumulative_macs(ExitPoint::Ee1);
        let m2 = self.cumulative_macs(ExitPoint::Ee2);
        let m3 = self.cumulative_macs(ExitPoint::Me);
        [m1, m2 - m1, m3 - m2]
    }

    /// Weight + bias element count of every parametric layer, heads included.
    pub fn count_params(&self) -> usize {
        let seg: usize = self
            .segments
            .iter()
            .flat_map(|s| &s.layers)
            .map(|l| l.kind.weight_count() + l.kind.bias_count())
            .sum();
        let heads: usize = self.exits.iter().map(|h| h.weight_count() + h.bias_count()).sum();
        seg + heads
    }

    /// Params from the input through exit `e` (segments 1..=e plus head `e`).
    pub fn count_params_to_exit(&self, e: ExitPoint) -> usize {
        let idx = e.index();
        let seg: usize = self.segments[..idx]
            .iter()
            .flat_map(|s| &s.layers)
            .map(|l| l.kind.weight_count() + l.kind.bias_count())
            .sum();
        let head = &self.exits[idx - 1];
        seg + head.weight_count() + head.bias_count()
    }

    /// Storage footprint of `count_params` elements at the given precision.
    pub fn param_bytes(&self, bw: BitWidth) -> usize {
        bw.payload_bytes(self.count_params())
    }

    pub fn param_bytes_to_exit(&self, e: ExitPoint, bw: BitWidth) -> usize {
        bw.payload_bytes(self.count_params_to_exit(e))
    }

    /// Names of all parametric layers (backbone order, then heads).
    pub fn param_layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .segments
            .iter()
            .flat_map(|s| &s.layers)
            .filter_map(|l| l.kind.param_name().map(str::to_owned))
            .collect();
        names.extend(self.exits.iter().map(|h| h.fc_name.clone()));
        names
    }

    /// Parametric layer kinds paired with their names, heads included.
    pub fn param_layers(&self) -> Vec<LayerKind> {
        let mut out: Vec<LayerKind> = self
            .segments
            .iter()
            .flat_map(|s| &s.layers)
            .filter(|l| l.kind.param_name().is_some())
            .map(|l| l.kind.clone())
            .collect();
        out.extend(self.exits.iter().map(|h| h.classifier()));
        out
    }
}

/// MACs of a single segment given its input shape.
pub fn segment_macs(segment: &Segment, input: Shape) -> u64 {
    let shapes = segment.propagate(input).expect("validated at construction");
    let mut total = 0u64;
    for (i, layer) in segment.layers.iter().enumerate() {
        total += match &layer.kind {
            LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => {
                let (_, oh, ow) = match shapes[i + 1] {
                    Shape::Chw(c, h, w) => (c, h, w),
                    _ => unreachable!("conv output is a feature map"),
                };
                (kernel.0 * kernel.1 * in_channels * out_channels * oh * ow) as u64
            }
            LayerKind::FullyConnected { in_features, out_features, .. } => {
                (in_features * out_features) as u64
            }
            _ => 0,
        };
    }
    total
}

/// Serialized wrapper for graph description files.
#[derive(Debug, Serialize, Deserialize)]
pub struct GraphFile {
    pub schema: u32,
    pub network: MultiExitNetwork,
}

pub fn save_graph(net: &MultiExitNetwork, path: &std::path::Path) -> Result<()> {
    let file = GraphFile { schema: GRAPH_SCHEMA_VERSION, network: net.clone() };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Invalid(format!("graph serialization failed: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_graph(path: &std::path::Path) -> Result<MultiExitNetwork> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: GraphFile = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path.display().to_string(), e.line(), e.to_string()))?;
    if file.schema != GRAPH_SCHEMA_VERSION {
        return Err(Error::Invalid(format!(
            "unsupported graph schema {} (expected {GRAPH_SCHEMA_VERSION})",
            file.schema
        )));
    }
    file.network.validate()?;
    Ok(file.network)
}

// Presets

/// Residual-style preset: a 3x3 stem into three single-block residual
/// groups of widths 16/32/64, exits after each group. Groups 2 and 3
/// downsample by stride 2 with a 1x1 projection on the skip path.
pub fn resnet_mini(num_classes: usize, input_shape: (usize, usize, usize)) -> Result<MultiExitNetwork> {
    let conv = |name: &str, cin: usize, cout: usize, k: usize, s: usize, p: usize, input: usize| LayerSpec {
        kind: LayerKind::Conv2d {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel: (k, k),
            stride: (s, s),
            padding: (p, p),
            bias: true,
        },
        inputs: vec![input],
    };
    let relu = |input: usize| LayerSpec::unary(LayerKind::Relu, input);

    let (c_in, _, _) = input_shape;
    // Slot 0 = input; stem -> 1; relu -> 2; conv1 -> 3; relu -> 4; conv2 -> 5;
    // add(5, 2) -> 6; relu -> 7.
    let s1 = Segment {
        layers: vec![
            conv("s1.stem", c_in, 16, 3, 1, 1, 0),
            relu(1),
            conv("s1.b1.conv1", 16, 16, 3, 1, 1, 2),
            relu(3),
            conv("s1.b1.conv2", 16, 16, 3, 1, 1, 4),
            LayerSpec { kind: LayerKind::ResidualAdd, inputs: vec![5, 2] },
            relu(6),
        ],
    };
    let down_block = |prefix: &str, cin: usize, cout: usize| Segment {
        layers: vec![
            conv(&format!("{prefix}.conv1"), cin, cout, 3, 2, 1, 0),
            relu(1),
            conv(&format!("{prefix}.conv2"), cout, cout, 3, 1, 1, 2),
            conv(&format!("{prefix}.proj"), cin, cout, 1, 2, 0, 0),
            LayerSpec { kind: LayerKind::ResidualAdd, inputs: vec![3, 4] },
            relu(5),
        ],
    };
    let s2 = down_block("s2.b1", 16, 32);
    let s3 = down_block("s3.b1", 32, 64);
    let exits = [
        ExitHead { fc_name: "ee1.fc".into(), in_channels: 16, num_classes },
        ExitHead { fc_name: "ee2.fc".into(), in_channels: 32, num_classes },
        ExitHead { fc_name: "me.fc".into(), in_channels: 64, num_classes },
    ];
    MultiExitNetwork::new([s1, s2, s3], exits, num_classes, input_shape)
}

/// Densely connected preset: three blocks of four growth-12 layers with
/// 1x1 + half-size-pool transitions, exits after each block.
pub fn densenet_mini(num_classes: usize, input_shape: (usize, usize, usize)) -> Result<MultiExitNetwork> {
    const GROWTH: usize = 12;
    const LAYERS_PER_BLOCK: usize = 4;

    let (c_in, mut h, mut w) = input_shape;

    // Appends one dense block to `layers`. `feat` is the slot holding the
    // running feature map; returns the new running slot and channel count.
    let dense_block = |layers: &mut Vec<LayerSpec>, prefix: &str, mut feat: usize, mut channels: usize| {
        for d in 1..=LAYERS_PER_BLOCK {
            let relu_slot = layers.len() + 1;
            layers.push(LayerSpec::unary(LayerKind::Relu, feat));
            let conv_slot = layers.len() + 1;
            layers.push(LayerSpec {
                kind: LayerKind::Conv2d {
                    name: format!("{prefix}.d{d}.conv"),
                    in_channels: channels,
                    out_channels: GROWTH,
                    kernel: (3, 3),
                    stride: (1, 1),
                    padding: (1, 1),
                    bias: true,
                },
                inputs: vec![relu_slot],
            });
            let concat_slot = layers.len() + 1;
            layers.push(LayerSpec { kind: LayerKind::DenseConcat, inputs: vec![feat, conv_slot] });
            feat = concat_slot;
            channels += GROWTH;
        }
        (feat, channels)
    };
    let transition = |layers: &mut Vec<LayerSpec>, prefix: &str, feat: usize, channels: usize, oh: usize, ow: usize| {
        let relu_slot = layers.len() + 1;
        layers.push(LayerSpec::unary(LayerKind::Relu, feat));
        let conv_slot = layers.len() + 1;
        layers.push(LayerSpec {
            kind: LayerKind::Conv2d {
                name: format!("{prefix}.conv"),
                in_channels: channels,
                out_channels: channels / 2,
                kernel: (1, 1),
                stride: (1, 1),
                padding: (0, 0),
                bias: true,
            },
            inputs: vec![relu_slot],
        });
        let pool_slot = layers.len() + 1;
        layers.push(LayerSpec::unary(LayerKind::AdaptiveAvgPool { output: (oh, ow) }, conv_slot));
        (pool_slot, channels / 2)
    };

    // Segment 1: stem + block 1 + transition.
    let mut l1 = vec![LayerSpec {
        kind: LayerKind::Conv2d {
            name: "s1.stem".into(),
            in_channels: c_in,
            out_channels: 2 * GROWTH,
            kernel: (3, 3),
            stride: (1, 1),
            padding: (1, 1),
            bias: true,
        },
        inputs: vec![0],
    }];
    let (feat, ch) = dense_block(&mut l1, "s1.b1", 1, 2 * GROWTH);
    if h < 4 || w < 4 {
        return Err(Error::GraphBuild(format!(
            "densenet_mini needs spatial input of at least 4x4, got {h}x{w}"
        )));
    }
    h /= 2;
    w /= 2;
    let (_, c1) = transition(&mut l1, "s1.trans", feat, ch, h, w);
    let s1 = Segment { layers: l1 };

    // Segment 2: block 2 + transition.
    let mut l2 = Vec::new();
    let (feat, ch) = dense_block(&mut l2, "s2.b1", 0, c1);
    h /= 2;
    w /= 2;
    let (_, c2) = transition(&mut l2, "s2.trans", feat, ch, h, w);
    let s2 = Segment { layers: l2 };

    // Segment 3: block 3, no transition.
    let mut l3 = Vec::new();
    let (feat, c3) = dense_block(&mut l3, "s3.b1", 0, c2);
    l3.push(LayerSpec::unary(LayerKind::Relu, feat));
    let s3 = Segment { layers: l3 };

    let exits = [
        ExitHead { fc_name: "ee1.fc".into(), in_channels: c1, num_classes },
        ExitHead { fc_name: "ee2.fc".into(), in_channels: c2, num_classes },
        ExitHead { fc_name: "me.fc".into(), in_channels: c3, num_classes },
    ];
    MultiExitNetwork::new([s1, s2, s3], exits, num_classes, input_shape)
}

/// Build a preset by name.
pub fn build_preset(name: &str, num_classes: usize, input_shape: (usize, usize, usize)) -> Result<MultiExitNetwork> {
    match name {
        "resnet_mini" => resnet_mini(num_classes, input_shape),
        "densenet_mini" => densenet_mini(num_classes, input_shape),
        other => Err(Error::Invalid(format!(
            "unknown preset '{other}' (expected resnet_mini or densenet_mini)"
        ))),
    }
}
