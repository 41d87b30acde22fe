//! Symbolic architecture specs, the builders for the supported model
//! family, layer-replacement surgery and parameter accounting.
//!
//! A [`ModelSpec`] is an ordered list of layer descriptors whose shapes
//! chain; "countable" layers are the units of the percent-of-modified-layers
//! denominator: plain convolutions for VGG-style nets, whole bottleneck
//! sub-modules for residual nets.

use crate::error::{Error, Result};
use crate::shuffle::ShuffleKind;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvDesc {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    /// Participates in the percent-of-modified-layers denominator. True for
    /// VGG-style body convolutions, false for e.g. the ResNet stem whose
    /// units of modification are whole bottlenecks.
    pub countable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BottleneckDesc {
    pub in_ch: usize,
    pub mid_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    /// Shuffle applied to the 3x3 conv input (and the skip branch) when set.
    pub shuffle: Option<ShuffleKind>,
    pub share_skip: bool,
}

impl BottleneckDesc {
    pub fn needs_downsample(&self) -> bool {
        self.stride != 1 || self.in_ch != self.out_ch
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerDesc {
    Conv(ConvDesc),
    ShuffleConv { kind: ShuffleKind, conv: ConvDesc },
    Bn { ch: usize },
    Bn1d { features: usize },
    Relu,
    MaxPool { k: usize, stride: usize },
    Gap,
    Flatten,
    Linear { in_features: usize, out_features: usize },
    Bottleneck(BottleneckDesc),
}

impl LayerDesc {
    /// Participates in the percent-of-modified-layers denominator: body
    /// convolutions for VGG-style nets, bottleneck sub-modules for residual
    /// nets.
    pub fn countable(&self) -> bool {
        match self {
            LayerDesc::Conv(d) | LayerDesc::ShuffleConv { conv: d, .. } => d.countable,
            LayerDesc::Bottleneck(_) => true,
            _ => false,
        }
    }
}

/// Shape flowing between layers: a feature map or flat features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

fn conv_out(h: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let hp = h + 2 * padding;
    if k > hp {
        return Err(Error::Spec(format!(
            "kernel {} exceeds padded extent {}",
            k, hp
        )));
    }
    Ok((hp - k) / stride + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    /// Input shape as channels, height, width.
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerDesc>,
}

impl ModelSpec {
    /// Positions of countable layers, in order.
    pub fn countable_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.countable())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn countable_count(&self) -> usize {
        self.layers.iter().filter(|l| l.countable()).count()
    }

    /// Infer the shape after layer `idx` applied to `shape`.
    fn step_shape(layer: &LayerDesc, shape: Shape, pos: usize) -> Result<Shape> {
        let map = |s: Shape| match s {
            Shape::Map { c, h, w } => Ok((c, h, w)),
            Shape::Flat(_) => Err(Error::Spec(format!(
                "layer {} expects a feature map but receives flat features",
                pos
            ))),
        };
        Ok(match layer {
            LayerDesc::Conv(d) | LayerDesc::ShuffleConv { conv: d, .. } => {
                let (c, h, w) = map(shape)?;
                if c != d.in_ch {
                    return Err(Error::Spec(format!(
                        "layer {}: conv expects {} input channels, receives {}",
                        pos, d.in_ch, c
                    )));
                }
                Shape::Map {
                    c: d.out_ch,
                    h: conv_out(h, d.kernel, d.stride, d.padding)?,
                    w: conv_out(w, d.kernel, d.stride, d.padding)?,
                }
            }
            LayerDesc::Bn { ch } => {
                let (c, h, w) = map(shape)?;
                if c != *ch {
                    return Err(Error::Spec(format!(
                        "layer {}: batch norm over {} channels, receives {}",
                        pos, ch, c
                    )));
                }
                Shape::Map { c, h, w }
            }
            LayerDesc::Bn1d { features } => match shape {
                Shape::Flat(f) if f == *features => shape,
                other => {
                    return Err(Error::Spec(format!(
                        "layer {}: 1-d batch norm over {} features, receives {:?}",
                        pos, features, other
                    )))
                }
            },
            LayerDesc::Relu => shape,
            LayerDesc::MaxPool { k, stride } => {
                let (c, h, w) = map(shape)?;
                if *k > h || *k > w {
                    return Err(Error::Spec(format!(
                        "layer {}: pool window {} exceeds map {}x{}",
                        pos, k, h, w
                    )));
                }
                if (h - k) % stride != 0 || (w - k) % stride != 0 {
                    return Err(Error::Spec(format!(
                        "layer {}: map {}x{} does not divide into {}-windows at stride {}",
                        pos, h, w, k, stride
                    )));
                }
                Shape::Map {
                    c,
                    h: (h - k) / stride + 1,
                    w: (w - k) / stride + 1,
                }
            }
            LayerDesc::Gap => {
                let (c, _, _) = map(shape)?;
                Shape::Flat(c)
            }
            LayerDesc::Flatten => match shape {
                Shape::Map { c, h, w } => Shape::Flat(c * h * w),
                Shape::Flat(f) => Shape::Flat(f),
            },
            LayerDesc::Linear { in_features, out_features } => match shape {
                Shape::Flat(f) if f == *in_features => Shape::Flat(*out_features),
                other => {
                    return Err(Error::Spec(format!(
                        "layer {}: linear expects {} flat features, receives {:?}",
                        pos, in_features, other
                    )))
                }
            },
            LayerDesc::Bottleneck(b) => {
                let (c, h, w) = map(shape)?;
                if c != b.in_ch {
                    return Err(Error::Spec(format!(
                        "layer {}: bottleneck expects {} input channels, receives {}",
                        pos, b.in_ch, c
                    )));
                }
                Shape::Map {
                    c: b.out_ch,
                    h: conv_out(h, 3, b.stride, 1)?,
                    w: conv_out(w, 3, b.stride, 1)?,
                }
            }
        })
    }

    /// Walk the layer chain, checking that consecutive shapes agree; returns
    /// the shape after every layer (so `shapes[i]` is the INPUT of layer i
    /// and the last element is the output).
    pub fn shape_chain(&self) -> Result<Vec<Shape>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut cur = Shape::Map {
            c: self.input[0],
            h: self.input[1],
            w: self.input[2],
        };
        shapes.push(cur);
        for (pos, layer) in self.layers.iter().enumerate() {
            cur = Self::step_shape(layer, cur, pos)?;
            shapes.push(cur);
        }
        Ok(shapes)
    }

    /// Validate shape chaining and the classifier output width.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.shape_chain()?;
        match shapes.last() {
            Some(Shape::Flat(f)) if *f == self.classes => Ok(()),
            other => Err(Error::Spec(format!(
                "model must end in {} flat logits, ends in {:?}",
                self.classes, other
            ))),
        }
    }

    pub fn output_shape(&self) -> Result<Shape> {
        Ok(*self.shape_chain()?.last().unwrap())
    }
}

/// 13-conv VGG-16 feature stack (64-64 / 128-128 / 256x3 / 512x3 / 512x3
/// with 2x2 pools) plus a single linear classifier. Countable layers are
/// the 13 convolutions.
pub fn build_vgg16(input: [usize; 3], classes: usize, with_bn: bool) -> ModelSpec {
    let plan: [&[usize]; 5] = [&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]];
    let mut layers = Vec::new();
    let mut in_ch = input[0];
    for block in plan {
        for &out_ch in block {
            layers.push(LayerDesc::Conv(ConvDesc {
                in_ch,
                out_ch,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: !with_bn,
                countable: true,
            }));
            if with_bn {
                layers.push(LayerDesc::Bn { ch: out_ch });
            }
            layers.push(LayerDesc::Relu);
            in_ch = out_ch;
        }
        layers.push(LayerDesc::MaxPool { k: 2, stride: 2 });
    }
    let (h, w) = (input[1] / 32, input[2] / 32);
    layers.push(LayerDesc::Flatten);
    layers.push(LayerDesc::Linear {
        in_features: 512 * h * w,
        out_features: classes,
    });
    ModelSpec {
        name: if with_bn { "vgg16-bn".into() } else { "vgg16".into() },
        input,
        classes,
        layers,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResnetDepth {
    /// 3+4+6+3 bottlenecks, the 50-layer configuration.
    Fifty,
    /// Four bottlenecks with the same structure, for desk-scale runs.
    Tiny,
}

/// Bottleneck ResNet. `small_stem` replaces the 7x7/stride-2 stem and its
/// pool with a 3x3/stride-1 convolution so that 32x32 inputs keep a 4x4
/// final map instead of collapsing to 1x1.
pub fn build_resnet_bottleneck(
    depth: ResnetDepth,
    input: [usize; 3],
    classes: usize,
    small_stem: bool,
) -> ModelSpec {
    let (name, stem_ch, stages): (&str, usize, Vec<(usize, usize, usize, usize)>) = match depth {
        // (mid, out, blocks, first stride)
        ResnetDepth::Fifty => (
            "resnet50",
            64,
            vec![(64, 256, 3, 1), (128, 512, 4, 2), (256, 1024, 6, 2), (512, 2048, 3, 2)],
        ),
        ResnetDepth::Tiny => (
            "resnet-tiny",
            16,
            vec![(8, 32, 1, 1), (16, 64, 1, 2), (32, 128, 1, 2), (64, 256, 1, 2)],
        ),
    };
    let mut layers = Vec::new();
    if small_stem {
        layers.push(LayerDesc::Conv(ConvDesc {
            in_ch: input[0],
            out_ch: stem_ch,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: false,
            countable: false,
        }));
        layers.push(LayerDesc::Bn { ch: stem_ch });
        layers.push(LayerDesc::Relu);
    } else {
        layers.push(LayerDesc::Conv(ConvDesc {
            in_ch: input[0],
            out_ch: stem_ch,
            kernel: 7,
            stride: 2,
            padding: 3,
            bias: false,
            countable: false,
        }));
        layers.push(LayerDesc::Bn { ch: stem_ch });
        layers.push(LayerDesc::Relu);
        layers.push(LayerDesc::MaxPool { k: 2, stride: 2 });
    }
    let mut in_ch = stem_ch;
    let mut last_out = stem_ch;
    for (mid, out, blocks, first_stride) in stages {
        for b in 0..blocks {
            layers.push(LayerDesc::Bottleneck(BottleneckDesc {
                in_ch,
                mid_ch: mid,
                out_ch: out,
                stride: if b == 0 { first_stride } else { 1 },
                shuffle: None,
                share_skip: true,
            }));
            in_ch = out;
        }
        last_out = out;
    }
    layers.push(LayerDesc::Gap);
    layers.push(LayerDesc::Linear {
        in_features: last_out,
        out_features: classes,
    });
    ModelSpec {
        name: name.into(),
        input,
        classes,
        layers,
    }
}

/// One-hidden-layer perceptron over 3x32x32 inputs: flatten, 512 hidden
/// units with ReLU, linear classifier.
pub fn build_mlp_reference(classes: usize) -> ModelSpec {
    let input = [3, 32, 32];
    let flat = input[0] * input[1] * input[2];
    ModelSpec {
        name: "mlp".into(),
        input,
        classes,
        layers: vec![
            LayerDesc::Flatten,
            LayerDesc::Linear { in_features: flat, out_features: 512 },
            LayerDesc::Relu,
            LayerDesc::Linear { in_features: 512, out_features: classes },
        ],
    }
}

/// Six-conv desk-scale CNN with a GAP head; the countable layers are the
/// six convolutions.
pub fn build_tiny_cnn(input: [usize; 3], classes: usize) -> ModelSpec {
    let widths = [12, 12, 16, 16, 20, 20];
    let mut layers = Vec::new();
    let mut in_ch = input[0];
    for (i, &out_ch) in widths.iter().enumerate() {
        layers.push(LayerDesc::Conv(ConvDesc {
            in_ch,
            out_ch,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: true,
            countable: true,
        }));
        layers.push(LayerDesc::Relu);
        if i == 1 || i == 3 {
            layers.push(LayerDesc::MaxPool { k: 2, stride: 2 });
        }
        in_ch = out_ch;
    }
    layers.push(LayerDesc::Gap);
    layers.push(LayerDesc::Linear {
        in_features: *widths.last().unwrap(),
        out_features: classes,
    });
    ModelSpec {
        name: "tiny-cnn".into(),
        input,
        classes,
        layers,
    }
}

/// Look a zoo model up by name. `small_stem` defaults to "small for inputs
/// narrower than 64 pixels" when unset.
pub fn build(name: &str, input: [usize; 3], classes: usize, small_stem: Option<bool>) -> Result<ModelSpec> {
    let small = small_stem.unwrap_or(input[1] < 64);
    Ok(match name {
        "tiny-cnn" => build_tiny_cnn(input, classes),
        "vgg16" => build_vgg16(input, classes, false),
        "vgg16-bn" => build_vgg16(input, classes, true),
        "resnet50" => build_resnet_bottleneck(ResnetDepth::Fifty, input, classes, small),
        "resnet-tiny" => build_resnet_bottleneck(ResnetDepth::Tiny, input, classes, small),
        "mlp" => build_mlp_reference(classes),
        other => {
            return Err(Error::Config(format!(
                "unknown model '{}' (expected tiny-cnn, vgg16, vgg16-bn, resnet50, resnet-tiny or mlp)",
                other
            )))
        }
    })
}

/// Surgery mechanism: one of the three shuffles, or the GAP+FC replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    Shuffle(ShuffleKind),
    GapFc,
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mechanism::Shuffle(k) => write!(f, "{}", k),
            Mechanism::GapFc => write!(f, "gapfc"),
        }
    }
}

/// Which trailing countable layers get which mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SurgeryPlan {
    pub mechanism: Mechanism,
    pub k_last: usize,
    pub share_skip_permutation: bool,
}

/// Map a percent of countable layers to a trailing count, rounding half up
/// and clamping: VGG-16 at 30% gives 4 of 13, at 54% gives 7 of 13.
pub fn percent_to_k(spec: &ModelSpec, percent: f64) -> usize {
    let n = spec.countable_count();
    let k = (percent / 100.0 * n as f64 + 0.5).floor();
    (k.max(0.0) as usize).min(n)
}

/// Replace the last `k_last` countable layers per the plan. Shuffle
/// mechanisms wrap convs (or mark bottlenecks); GAP+FC inserts a global
/// average pool before the first modified layer and turns every subsequent
/// countable layer into a fully connected layer at its output width,
/// collapsing downstream spatial extent to one.
pub fn apply_surgery(spec: &ModelSpec, plan: &SurgeryPlan) -> Result<ModelSpec> {
    let countable = spec.countable_indices();
    if plan.k_last > countable.len() {
        return Err(Error::Spec(format!(
            "k_last {} out of range: model has {} countable layers",
            plan.k_last,
            countable.len()
        )));
    }
    if plan.k_last == 0 {
        return Ok(spec.clone());
    }
    let modified = &countable[countable.len() - plan.k_last..];
    match plan.mechanism {
        Mechanism::Shuffle(kind) => {
            apply_shuffle_at(spec, kind, modified, plan.share_skip_permutation)
        }
        Mechanism::GapFc => apply_gap_fc(spec, modified[0]),
    }
}

/// Wrap the countable layers at the given positions in the shuffle
/// mechanism; positions need not be contiguous (single-layer experiments).
pub fn apply_shuffle_at(
    spec: &ModelSpec,
    kind: ShuffleKind,
    positions: &[usize],
    share_skip: bool,
) -> Result<ModelSpec> {
    let mut out = spec.clone();
    for &pos in positions {
        let layer = out.layers.get_mut(pos).ok_or_else(|| {
            Error::Spec(format!("no layer at position {}", pos))
        })?;
        match layer {
            LayerDesc::Conv(d) => {
                *layer = LayerDesc::ShuffleConv { kind, conv: d.clone() };
            }
            LayerDesc::ShuffleConv { kind: k, .. } => {
                *k = kind;
            }
            LayerDesc::Bottleneck(b) => {
                b.shuffle = Some(kind);
                b.share_skip = share_skip;
            }
            other => {
                return Err(Error::Spec(format!(
                    "layer {} is not countable: {:?}",
                    pos, other
                )))
            }
        }
    }
    Ok(out)
}

fn apply_gap_fc(spec: &ModelSpec, insert_at: usize) -> Result<ModelSpec> {
    let shapes = spec.shape_chain()?;
    let width = match shapes[insert_at] {
        Shape::Map { c, .. } => c,
        Shape::Flat(_) => {
            return Err(Error::Spec(format!(
                "GAP+FC insertion point {} already has flat features",
                insert_at
            )))
        }
    };
    let mut layers: Vec<LayerDesc> = spec.layers[..insert_at].to_vec();
    layers.push(LayerDesc::Gap);
    let mut width = width;
    for layer in &spec.layers[insert_at..] {
        match layer {
            LayerDesc::Conv(d) | LayerDesc::ShuffleConv { conv: d, .. } => {
                layers.push(LayerDesc::Linear {
                    in_features: width,
                    out_features: d.out_ch,
                });
                width = d.out_ch;
            }
            LayerDesc::Bottleneck(b) => {
                layers.push(LayerDesc::Linear {
                    in_features: width,
                    out_features: b.out_ch,
                });
                width = b.out_ch;
            }
            LayerDesc::Bn { ch } => layers.push(LayerDesc::Bn1d { features: *ch }),
            LayerDesc::Bn1d { features } => layers.push(LayerDesc::Bn1d { features: *features }),
            LayerDesc::Relu => layers.push(LayerDesc::Relu),
            // Spatial extent is one past the GAP; pools, flattens and a
            // pre-existing GAP become no-ops and are dropped.
            LayerDesc::MaxPool { .. } | LayerDesc::Gap | LayerDesc::Flatten => {}
            LayerDesc::Linear { out_features, .. } => {
                layers.push(LayerDesc::Linear {
                    in_features: width,
                    out_features: *out_features,
                });
                width = *out_features;
            }
        }
    }
    Ok(ModelSpec {
        name: spec.name.clone(),
        input: spec.input,
        classes: spec.classes,
        layers,
    })
}

fn conv_params(d: &ConvDesc) -> u64 {
    let w = (d.out_ch * d.in_ch * d.kernel * d.kernel) as u64;
    w + if d.bias { d.out_ch as u64 } else { 0 }
}

/// Closed-form parameter total: weights, biases and batch-norm affine
/// parameters; running statistics are state, not parameters.
pub fn count_params(spec: &ModelSpec) -> u64 {
    spec.layers
        .iter()
        .map(|layer| match layer {
            LayerDesc::Conv(d) | LayerDesc::ShuffleConv { conv: d, .. } => conv_params(d),
            LayerDesc::Bn { ch } => 2 * *ch as u64,
            LayerDesc::Bn1d { features } => 2 * *features as u64,
            LayerDesc::Linear { in_features, out_features } => {
                (*out_features * *in_features + *out_features) as u64
            }
            LayerDesc::Bottleneck(b) => {
                let mut p = 0u64;
                p += (b.mid_ch * b.in_ch) as u64 + 2 * b.mid_ch as u64; // 1x1 + bn
                p += (b.mid_ch * b.mid_ch * 9) as u64 + 2 * b.mid_ch as u64; // 3x3 + bn
                p += (b.out_ch * b.mid_ch) as u64 + 2 * b.out_ch as u64; // 1x1 + bn
                if b.needs_downsample() {
                    p += (b.out_ch * b.in_ch) as u64 + 2 * b.out_ch as u64;
                }
                p
            }
            LayerDesc::Relu | LayerDesc::MaxPool { .. } | LayerDesc::Gap | LayerDesc::Flatten => 0,
        })
        .sum()
}

// ---------------------------------------------------------------------------
// Text serialization: versioned, one layer per line.

const SPEC_HEADER: &str = "shufflelab-modelspec v1";

fn kind_str(kind: ShuffleKind) -> String {
    match kind {
        ShuffleKind::Spatial => "spatial".into(),
        ShuffleKind::Patch(p) => format!("patch{}", p),
        ShuffleKind::Channel => "channel".into(),
    }
}

fn parse_kind(s: &str) -> Result<ShuffleKind> {
    match s {
        "spatial" => Ok(ShuffleKind::Spatial),
        "channel" => Ok(ShuffleKind::Channel),
        other => {
            if let Some(p) = other.strip_prefix("patch") {
                p.parse::<usize>()
                    .map(ShuffleKind::Patch)
                    .map_err(|_| Error::Spec(format!("bad patch size in '{}'", other)))
            } else {
                Err(Error::Spec(format!("unknown shuffle kind '{}'", other)))
            }
        }
    }
}

impl ModelSpec {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(SPEC_HEADER);
        s.push('\n');
        s.push_str(&format!("name {}\n", self.name));
        s.push_str(&format!("input {} {} {}\n", self.input[0], self.input[1], self.input[2]));
        s.push_str(&format!("classes {}\n", self.classes));
        for layer in &self.layers {
            let line = match layer {
                LayerDesc::Conv(d) => format!(
                    "layer conv in={} out={} k={} s={} p={} bias={} countable={}",
                    d.in_ch, d.out_ch, d.kernel, d.stride, d.padding, d.bias as u8, d.countable as u8
                ),
                LayerDesc::ShuffleConv { kind, conv: d } => format!(
                    "layer shuffle_conv mech={} in={} out={} k={} s={} p={} bias={} countable={}",
                    kind_str(*kind),
                    d.in_ch,
                    d.out_ch,
                    d.kernel,
                    d.stride,
                    d.padding,
                    d.bias as u8,
                    d.countable as u8
                ),
                LayerDesc::Bn { ch } => format!("layer bn ch={}", ch),
                LayerDesc::Bn1d { features } => format!("layer bn1d f={}", features),
                LayerDesc::Relu => "layer relu".into(),
                LayerDesc::MaxPool { k, stride } => format!("layer maxpool k={} s={}", k, stride),
                LayerDesc::Gap => "layer gap".into(),
                LayerDesc::Flatten => "layer flatten".into(),
                LayerDesc::Linear { in_features, out_features } => {
                    format!("layer linear in={} out={}", in_features, out_features)
                }
                LayerDesc::Bottleneck(b) => format!(
                    "layer bottleneck in={} mid={} out={} s={} shuffle={} share_skip={}",
                    b.in_ch,
                    b.mid_ch,
                    b.out_ch,
                    b.stride,
                    b.shuffle.map(kind_str).unwrap_or_else(|| "none".into()),
                    b.share_skip as u8
                ),
            };
            s.push_str(&line);
            s.push('\n');
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header.trim() != SPEC_HEADER {
            return Err(Error::Spec(format!(
                "bad model spec header '{}', expected '{}'",
                header, SPEC_HEADER
            )));
        }
        let mut name = String::new();
        let mut input = [0usize; 3];
        let mut classes = 0usize;
        let mut layers = Vec::new();
        let mut saw_end = false;
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match parts.next().unwrap() {
                "name" => name = parts.next().unwrap_or("").to_string(),
                "input" => {
                    for slot in input.iter_mut() {
                        *slot = parse_field(parts.next(), "input dims")?;
                    }
                }
                "classes" => classes = parse_field(parts.next(), "classes")?,
                "end" => {
                    saw_end = true;
                    break;
                }
                "layer" => {
                    let kind = parts.next().unwrap_or("");
                    let kv: std::collections::HashMap<&str, &str> = parts
                        .filter_map(|p| p.split_once('='))
                        .collect();
                    let get = |key: &str| -> Result<usize> {
                        kv.get(key)
                            .ok_or_else(|| Error::Spec(format!("{}: missing {}=", line, key)))?
                            .parse()
                            .map_err(|_| Error::Spec(format!("{}: bad {}=", line, key)))
                    };
                    let layer = match kind {
                        "conv" => LayerDesc::Conv(ConvDesc {
                            in_ch: get("in")?,
                            out_ch: get("out")?,
                            kernel: get("k")?,
                            stride: get("s")?,
                            padding: get("p")?,
                            bias: get("bias")? != 0,
                            countable: get("countable")? != 0,
                        }),
                        "shuffle_conv" => LayerDesc::ShuffleConv {
                            kind: parse_kind(kv.get("mech").copied().unwrap_or(""))?,
                            conv: ConvDesc {
                                in_ch: get("in")?,
                                out_ch: get("out")?,
                                kernel: get("k")?,
                                stride: get("s")?,
                                padding: get("p")?,
                                bias: get("bias")? != 0,
                                countable: get("countable")? != 0,
                            },
                        },
                        "bn" => LayerDesc::Bn { ch: get("ch")? },
                        "bn1d" => LayerDesc::Bn1d { features: get("f")? },
                        "relu" => LayerDesc::Relu,
                        "maxpool" => LayerDesc::MaxPool { k: get("k")?, stride: get("s")? },
                        "gap" => LayerDesc::Gap,
                        "flatten" => LayerDesc::Flatten,
                        "linear" => LayerDesc::Linear {
                            in_features: get("in")?,
                            out_features: get("out")?,
                        },
                        "bottleneck" => LayerDesc::Bottleneck(BottleneckDesc {
                            in_ch: get("in")?,
                            mid_ch: get("mid")?,
                            out_ch: get("out")?,
                            stride: get("s")?,
                            shuffle: match kv.get("shuffle").copied().unwrap_or("none") {
                                "none" => None,
                                other => Some(parse_kind(other)?),
                            },
                            share_skip: get("share_skip")? != 0,
                        }),
                        other => return Err(Error::Spec(format!("unknown layer kind '{}'", other))),
                    };
                    layers.push(layer);
                }
                other => return Err(Error::Spec(format!("unknown directive '{}'", other))),
            }
        }
        if !saw_end {
            return Err(Error::Spec("missing 'end' line".into()));
        }
        Ok(ModelSpec { name, input, classes, layers })
    }
}

fn parse_field(part: Option<&str>, what: &str) -> Result<usize> {
    part.ok_or_else(|| Error::Spec(format!("missing {}", what)))?
        .parse()
        .map_err(|_| Error::Spec(format!("bad {}", what)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg16_has_13_countable_layers_and_chains_at_32() {
        let spec = build_vgg16([3, 32, 32], 100, false);
        assert_eq!(spec.countable_count(), 13);
        spec.validate().unwrap();
        let spec_bn = build_vgg16([3, 32, 32], 100, true);
        assert_eq!(spec_bn.countable_count(), 13);
        spec_bn.validate().unwrap();
    }

    #[test]
    fn percent_mapping_reproduces_the_quoted_points() {
        let spec = build_vgg16([3, 32, 32], 100, false);
        assert_eq!(percent_to_k(&spec, 0.0), 0);
        assert_eq!(percent_to_k(&spec, 30.0), 4);
        assert_eq!(percent_to_k(&spec, 31.0), 4);
        assert_eq!(percent_to_k(&spec, 53.0), 7);
        assert_eq!(percent_to_k(&spec, 54.0), 7);
        assert_eq!(percent_to_k(&spec, 100.0), 13);
    }

    #[test]
    fn percent_to_k_is_monotone() {
        let spec = build_vgg16([3, 32, 32], 100, false);
        let mut last = 0;
        for p in 0..=100 {
            let k = percent_to_k(&spec, p as f64);
            assert!(k >= last);
            last = k;
        }
    }

    #[test]
    fn resnet50_counts_16_bottlenecks() {
        let spec = build_resnet_bottleneck(ResnetDepth::Fifty, [3, 32, 32], 100, true);
        assert_eq!(spec.countable_count(), 16);
        spec.validate().unwrap();
    }

    #[test]
    fn small_stem_keeps_a_4x4_final_map_and_big_stem_collapses_to_1x1() {
        let small = build_resnet_bottleneck(ResnetDepth::Fifty, [3, 32, 32], 100, true);
        let shapes = small.shape_chain().unwrap();
        // Shape right before the GAP layer.
        let gap_pos = small.layers.iter().position(|l| matches!(l, LayerDesc::Gap)).unwrap();
        assert_eq!(shapes[gap_pos], Shape::Map { c: 2048, h: 4, w: 4 });

        let big = build_resnet_bottleneck(ResnetDepth::Fifty, [3, 32, 32], 100, false);
        let shapes = big.shape_chain().unwrap();
        let gap_pos = big.layers.iter().position(|l| matches!(l, LayerDesc::Gap)).unwrap();
        assert_eq!(shapes[gap_pos], Shape::Map { c: 2048, h: 1, w: 1 });
    }

    #[test]
    fn resnet50_big_stem_chains_at_224() {
        let spec = build_resnet_bottleneck(ResnetDepth::Fifty, [3, 224, 224], 1000, false);
        let shapes = spec.shape_chain().unwrap();
        let gap_pos = spec.layers.iter().position(|l| matches!(l, LayerDesc::Gap)).unwrap();
        assert_eq!(shapes[gap_pos], Shape::Map { c: 2048, h: 7, w: 7 });
        spec.validate().unwrap();
    }

    #[test]
    fn mlp_reference_matches_the_closed_form_count() {
        let spec = build_mlp_reference(100);
        spec.validate().unwrap();
        assert_eq!(count_params(&spec), 1_624_676);
        match spec.layers[1] {
            LayerDesc::Linear { out_features, .. } => assert_eq!(out_features, 512),
            _ => panic!("expected hidden linear"),
        }
    }

    #[test]
    fn surgery_with_k0_is_identity() {
        let spec = build_vgg16([3, 32, 32], 100, false);
        let plan = SurgeryPlan {
            mechanism: Mechanism::Shuffle(ShuffleKind::Spatial),
            k_last: 0,
            share_skip_permutation: true,
        };
        assert_eq!(apply_surgery(&spec, &plan).unwrap(), spec);
    }

    #[test]
    fn surgery_rejects_out_of_range_k() {
        let spec = build_tiny_cnn([1, 16, 16], 4);
        let plan = SurgeryPlan {
            mechanism: Mechanism::GapFc,
            k_last: 7,
            share_skip_permutation: true,
        };
        assert!(apply_surgery(&spec, &plan).is_err());
    }

    #[test]
    fn gap_fc_on_last_two_vgg_convs_matches_the_reference_layout() {
        let spec = build_vgg16([3, 32, 32], 100, false);
        let plan = SurgeryPlan {
            mechanism: Mechanism::GapFc,
            k_last: 2,
            share_skip_permutation: true,
        };
        let out = apply_surgery(&spec, &plan).unwrap();
        out.validate().unwrap();
        // GAP appears where the 12th conv used to be, followed by two
        // 512-wide fully connected layers in place of the replaced convs.
        let countable_before = spec.countable_indices();
        let insert_at = countable_before[11];
        assert!(matches!(out.layers[insert_at], LayerDesc::Gap));
        let fcs: Vec<_> = out.layers[insert_at..]
            .iter()
            .filter_map(|l| match l {
                LayerDesc::Linear { in_features, out_features } => Some((*in_features, *out_features)),
                _ => None,
            })
            .collect();
        assert_eq!(fcs, vec![(512, 512), (512, 512), (512, 100)]);
        // Prefix untouched.
        assert_eq!(&out.layers[..insert_at], &spec.layers[..insert_at]);
        // No countable layers remain after the insertion point.
        assert!(out.layers[insert_at..].iter().all(|l| !l.countable()));
    }

    #[test]
    fn gap_fc_collapses_downstream_extent_to_flat_features() {
        let spec = build_resnet_bottleneck(ResnetDepth::Tiny, [3, 32, 32], 10, true);
        let plan = SurgeryPlan {
            mechanism: Mechanism::GapFc,
            k_last: 2,
            share_skip_permutation: true,
        };
        let out = apply_surgery(&spec, &plan).unwrap();
        out.validate().unwrap();
        let shapes = out.shape_chain().unwrap();
        let gap_pos = out.layers.iter().position(|l| matches!(l, LayerDesc::Gap)).unwrap();
        for s in &shapes[gap_pos + 1..] {
            assert!(matches!(s, Shape::Flat(_)), "expected flat, got {:?}", s);
        }
    }

    #[test]
    fn gap_fc_never_increases_parameters_on_zoo_specs() {
        for spec in [
            build_vgg16([3, 32, 32], 100, false),
            build_vgg16([3, 224, 224], 1000, true),
            build_resnet_bottleneck(ResnetDepth::Fifty, [3, 32, 32], 100, true),
            build_tiny_cnn([1, 16, 16], 4),
        ] {
            let base = count_params(&spec);
            for k in 1..=spec.countable_count() {
                let plan = SurgeryPlan {
                    mechanism: Mechanism::GapFc,
                    k_last: k,
                    share_skip_permutation: true,
                };
                let surgered = apply_surgery(&spec, &plan).unwrap();
                let p = count_params(&surgered);
                assert!(p <= base, "{} k={}: {} > {}", spec.name, k, p, base);
                // Strict decrease whenever any replaced kernel exceeds 1x1:
                // every countable layer in these specs carries a 3x3 conv.
                assert!(p < base, "{} k={}: expected strict decrease", spec.name, k);
            }
        }
    }

    #[test]
    fn shuffle_surgery_marks_only_the_trailing_layers() {
        let spec = build_vgg16([3, 32, 32], 100, false);
        let plan = SurgeryPlan {
            mechanism: Mechanism::Shuffle(ShuffleKind::Spatial),
            k_last: 4,
            share_skip_permutation: true,
        };
        let out = apply_surgery(&spec, &plan).unwrap();
        out.validate().unwrap();
        let shuffled: Vec<usize> = out
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerDesc::ShuffleConv { .. }))
            .map(|(i, _)| i)
            .collect();
        let countable = spec.countable_indices();
        assert_eq!(shuffled, countable[9..].to_vec());
        // Parameter count is untouched by shuffle surgery.
        assert_eq!(count_params(&out), count_params(&spec));
    }

    #[test]
    fn bottleneck_shuffle_surgery_sets_the_flag() {
        let spec = build_resnet_bottleneck(ResnetDepth::Tiny, [3, 32, 32], 10, true);
        let plan = SurgeryPlan {
            mechanism: Mechanism::Shuffle(ShuffleKind::Channel),
            k_last: 1,
            share_skip_permutation: false,
        };
        let out = apply_surgery(&spec, &plan).unwrap();
        let last = out.countable_indices().pop().unwrap();
        match &out.layers[last] {
            LayerDesc::Bottleneck(b) => {
                assert_eq!(b.shuffle, Some(ShuffleKind::Channel));
                assert!(!b.share_skip);
            }
            other => panic!("expected bottleneck, got {:?}", other),
        }
    }

    #[test]
    fn spec_text_round_trips() {
        let mut spec = build_resnet_bottleneck(ResnetDepth::Tiny, [3, 32, 32], 10, true);
        spec = apply_surgery(
            &spec,
            &SurgeryPlan {
                mechanism: Mechanism::Shuffle(ShuffleKind::Patch(2)),
                k_last: 2,
                share_skip_permutation: true,
            },
        )
        .unwrap();
        let text = spec.to_text();
        let parsed = ModelSpec::from_text(&text).unwrap();
        assert_eq!(parsed, spec);

        let vgg = build_vgg16([3, 32, 32], 100, true);
        assert_eq!(ModelSpec::from_text(&vgg.to_text()).unwrap(), vgg);
    }

    #[test]
    fn spec_text_rejects_bad_header() {
        assert!(ModelSpec::from_text("nonsense v9\nend\n").is_err());
    }
}
