//! Instantiated models: parameter tensors plus a forward pass that follows
//! a [`ModelSpec`] layer by layer.
//!
//! Shuffling is parameter-free, so which layers shuffle (and with which
//! mechanism) is decided at forward time through [`ShuffleSites`]. Training
//! normally uses the sites baked into the spec by surgery; evaluation may
//! override them, which is how a train-scheme/test-scheme mismatch is run
//! on one set of weights.

use std::fs;
use std::path::Path;

use rand::distributions::Distribution;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::shuffle::{apply_shuffle, ShuffleKind, ShuffleRng};
use crate::tape::{BnState, Tape};
use crate::tensor::Tensor;
use crate::zoo::{BottleneckDesc, ConvDesc, LayerDesc, ModelSpec};
use crate::Elem;

pub const BN_EPS: Elem = 1e-5;
pub const BN_MOMENTUM: Elem = 0.1;

// Skip-branch permutations draw from a shifted layer id when they are not
// shared with the residual branch.
const SKIP_LAYER_OFFSET: u32 = 1 << 16;

struct BnParams {
    gamma: Tensor,
    beta: Tensor,
    state: BnState,
}

struct ConvParams {
    w: Tensor,
    b: Option<Tensor>,
}

enum RuntimeLayer {
    Conv {
        desc: ConvDesc,
        p: ConvParams,
        countable: Option<usize>,
    },
    Bn2d(BnParams),
    Bn1d(BnParams),
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
    },
    Gap,
    Flatten,
    Linear {
        w: Tensor,
        b: Tensor,
    },
    Bottleneck {
        desc: BottleneckDesc,
        conv1: ConvParams,
        bn1: BnParams,
        conv2: ConvParams,
        bn2: BnParams,
        conv3: ConvParams,
        bn3: BnParams,
        down: Option<(ConvParams, BnParams)>,
        countable: usize,
    },
}

/// Per-countable-layer shuffle mechanism, indexed by countable position.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ShuffleSites {
    sites: Vec<Option<ShuffleKind>>,
}

impl ShuffleSites {
    /// No shuffling anywhere.
    pub fn none(countable: usize) -> Self {
        ShuffleSites { sites: vec![None; countable] }
    }

    /// The sites surgery baked into the spec.
    pub fn from_spec(spec: &ModelSpec) -> Self {
        let sites = spec
            .layers
            .iter()
            .filter(|l| l.countable())
            .map(|l| match l {
                LayerDesc::ShuffleConv { kind, .. } => Some(*kind),
                LayerDesc::Bottleneck(b) => b.shuffle,
                _ => None,
            })
            .collect();
        ShuffleSites { sites }
    }

    /// `kind` at the given countable indices, nothing elsewhere.
    pub fn at(countable: usize, kind: ShuffleKind, indices: &[usize]) -> Self {
        let mut sites = vec![None; countable];
        for &i in indices {
            if i < countable {
                sites[i] = Some(kind);
            }
        }
        ShuffleSites { sites }
    }

    /// `kind` at the last `k` countable layers.
    pub fn last_k(countable: usize, kind: ShuffleKind, k: usize) -> Self {
        let start = countable.saturating_sub(k);
        let indices: Vec<usize> = (start..countable).collect();
        Self::at(countable, kind, &indices)
    }

    pub fn get(&self, countable_idx: usize) -> Option<ShuffleKind> {
        self.sites.get(countable_idx).copied().flatten()
    }

    pub fn any_active(&self) -> bool {
        self.sites.iter().any(|s| s.is_some())
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }
}

struct InitCtx {
    seed: u64,
    counter: u64,
    zeros: bool,
}

impl InitCtx {
    fn weights(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = if self.zeros {
            vec![0.0; numel]
        } else {
            let mut stream = rng::stream(self.seed, Domain::Init, &[self.counter]);
            let std = (2.0 / fan_in as f64).sqrt();
            (0..numel)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut stream);
                    (z * std) as Elem
                })
                .collect()
        };
        self.counter += 1;
        Tensor::param(shape, data).expect("shape/data agree by construction")
    }

    fn constant(&mut self, shape: &[usize], value: Elem) -> Tensor {
        self.counter += 1;
        let numel: usize = shape.iter().product();
        Tensor::param(shape, vec![value; numel]).expect("shape/data agree")
    }
}

fn init_conv(ctx: &mut InitCtx, d: &ConvDesc) -> ConvParams {
    let fan_in = d.in_ch * d.kernel * d.kernel;
    ConvParams {
        w: ctx.weights(&[d.out_ch, d.in_ch, d.kernel, d.kernel], fan_in),
        b: d.bias.then(|| ctx.constant(&[d.out_ch], 0.0)),
    }
}

fn init_bn(ctx: &mut InitCtx, ch: usize) -> BnParams {
    BnParams {
        gamma: ctx.constant(&[ch], 1.0),
        beta: ctx.constant(&[ch], 0.0),
        state: BnState::new(ch),
    }
}

pub struct Model {
    pub spec: ModelSpec,
    layers: Vec<RuntimeLayer>,
}

impl Model {
    /// Instantiate with fan-in-scaled normal weights drawn from `seed`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Model> {
        Self::build(spec, InitCtx { seed, counter: 0, zeros: false })
    }

    /// Instantiate with all-zero parameters; used for parameter enumeration
    /// where values are irrelevant.
    pub fn init_zeros(spec: &ModelSpec) -> Result<Model> {
        Self::build(spec, InitCtx { seed: 0, counter: 0, zeros: true })
    }

    fn build(spec: &ModelSpec, mut ctx: InitCtx) -> Result<Model> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut countable = 0usize;
        for desc in &spec.layers {
            let layer = match desc {
                LayerDesc::Conv(d) | LayerDesc::ShuffleConv { conv: d, .. } => {
                    let idx = d.countable.then(|| {
                        let i = countable;
                        countable += 1;
                        i
                    });
                    RuntimeLayer::Conv {
                        desc: d.clone(),
                        p: init_conv(&mut ctx, d),
                        countable: idx,
                    }
                }
                LayerDesc::Bn { ch } => RuntimeLayer::Bn2d(init_bn(&mut ctx, *ch)),
                LayerDesc::Bn1d { features } => RuntimeLayer::Bn1d(init_bn(&mut ctx, *features)),
                LayerDesc::Relu => RuntimeLayer::Relu,
                LayerDesc::MaxPool { k, stride } => RuntimeLayer::MaxPool { k: *k, stride: *stride },
                LayerDesc::Gap => RuntimeLayer::Gap,
                LayerDesc::Flatten => RuntimeLayer::Flatten,
                LayerDesc::Linear { in_features, out_features } => RuntimeLayer::Linear {
                    w: ctx.weights(&[*out_features, *in_features], *in_features),
                    b: ctx.constant(&[*out_features], 0.0),
                },
                LayerDesc::Bottleneck(b) => {
                    let conv1 = ConvDesc {
                        in_ch: b.in_ch,
                        out_ch: b.mid_ch,
                        kernel: 1,
                        stride: 1,
                        padding: 0,
                        bias: false,
                        countable: false,
                    };
                    let conv2 = ConvDesc {
                        in_ch: b.mid_ch,
                        out_ch: b.mid_ch,
                        kernel: 3,
                        stride: b.stride,
                        padding: 1,
                        bias: false,
                        countable: false,
                    };
                    let conv3 = ConvDesc {
                        in_ch: b.mid_ch,
                        out_ch: b.out_ch,
                        kernel: 1,
                        stride: 1,
                        padding: 0,
                        bias: false,
                        countable: false,
                    };
                    let down = b.needs_downsample().then(|| {
                        let d = ConvDesc {
                            in_ch: b.in_ch,
                            out_ch: b.out_ch,
                            kernel: 1,
                            stride: b.stride,
                            padding: 0,
                            bias: false,
                            countable: false,
                        };
                        (init_conv(&mut ctx, &d), init_bn(&mut ctx, b.out_ch))
                    });
                    let l = RuntimeLayer::Bottleneck {
                        desc: b.clone(),
                        conv1: init_conv(&mut ctx, &conv1),
                        bn1: init_bn(&mut ctx, b.mid_ch),
                        conv2: init_conv(&mut ctx, &conv2),
                        bn2: init_bn(&mut ctx, b.mid_ch),
                        conv3: init_conv(&mut ctx, &conv3),
                        bn3: init_bn(&mut ctx, b.out_ch),
                        down,
                        countable,
                    };
                    countable += 1;
                    l
                }
            };
            layers.push(layer);
        }
        Ok(Model { spec: spec.clone(), layers })
    }

    pub fn countable_count(&self) -> usize {
        self.spec.countable_count()
    }

    /// Shuffle sites as baked into the spec by surgery.
    pub fn baked_sites(&self) -> ShuffleSites {
        ShuffleSites::from_spec(&self.spec)
    }

    /// All trainable parameter tensors, in a stable order.
    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        let push_conv = |out: &mut Vec<Tensor>, p: &ConvParams| {
            out.push(p.w.clone());
            if let Some(b) = &p.b {
                out.push(b.clone());
            }
        };
        for layer in &self.layers {
            match layer {
                RuntimeLayer::Conv { p, .. } => push_conv(&mut out, p),
                RuntimeLayer::Bn2d(bn) | RuntimeLayer::Bn1d(bn) => {
                    out.push(bn.gamma.clone());
                    out.push(bn.beta.clone());
                }
                RuntimeLayer::Linear { w, b } => {
                    out.push(w.clone());
                    out.push(b.clone());
                }
                RuntimeLayer::Bottleneck { conv1, bn1, conv2, bn2, conv3, bn3, down, .. } => {
                    for (c, bn) in [(conv1, bn1), (conv2, bn2), (conv3, bn3)] {
                        push_conv(&mut out, c);
                        out.push(bn.gamma.clone());
                        out.push(bn.beta.clone());
                    }
                    if let Some((c, bn)) = down {
                        push_conv(&mut out, c);
                        out.push(bn.gamma.clone());
                        out.push(bn.beta.clone());
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Parameter total by enumerating instantiated tensors; the independent
    /// cross-check for the closed-form count.
    pub fn param_count(&self) -> u64 {
        self.params().iter().map(|t| t.numel() as u64).sum()
    }

    /// Raw bytes of all parameters, for change detection in tests.
    pub fn param_fingerprint(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        for p in self.params() {
            for v in p.data().iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    /// Forward pass. Batch-norm mode and the shuffle phase both follow
    /// `srng.phase`; shuffling happens at the countable layers `sites`
    /// selects, with permutation streams keyed by the countable index.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: &Tensor,
        srng: &ShuffleRng,
        sites: &ShuffleSites,
    ) -> Result<Tensor> {
        let mode = srng.phase;
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = match layer {
                RuntimeLayer::Conv { desc, p, countable } => {
                    let input = match countable.and_then(|i| sites.get(i).map(|k| (i, k))) {
                        Some((i, kind)) => apply_shuffle(tape, &h, kind, srng, i as u32)?.0,
                        None => h,
                    };
                    tape.conv2d(&input, &p.w, p.b.as_ref(), desc.stride, desc.padding)?
                }
                RuntimeLayer::Bn2d(bn) | RuntimeLayer::Bn1d(bn) => tape.batch_norm(
                    &h,
                    &bn.gamma,
                    &bn.beta,
                    &mut bn.state,
                    mode,
                    BN_EPS,
                    BN_MOMENTUM,
                )?,
                RuntimeLayer::Relu => tape.relu(&h),
                RuntimeLayer::MaxPool { k, stride } => tape.max_pool2d(&h, *k, *stride)?,
                RuntimeLayer::Gap => tape.global_avg_pool(&h)?,
                RuntimeLayer::Flatten => {
                    let s = h.shape();
                    let n = s[0];
                    let f: usize = s[1..].iter().product();
                    tape.reshape(&h, &[n, f])?
                }
                RuntimeLayer::Linear { w, b } => tape.linear(&h, w, Some(b))?,
                RuntimeLayer::Bottleneck {
                    desc,
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    conv3,
                    bn3,
                    down,
                    countable,
                } => {
                    let site = sites.get(*countable);
                    let layer_id = *countable as u32;

                    let mut main = tape.conv2d(&h, &conv1.w, conv1.b.as_ref(), 1, 0)?;
                    main = tape.batch_norm(
                        &main, &bn1.gamma, &bn1.beta, &mut bn1.state, mode, BN_EPS, BN_MOMENTUM,
                    )?;
                    main = tape.relu(&main);
                    if let Some(kind) = site {
                        main = apply_shuffle(tape, &main, kind, srng, layer_id)?.0;
                    }
                    main = tape.conv2d(&main, &conv2.w, conv2.b.as_ref(), desc.stride, 1)?;
                    main = tape.batch_norm(
                        &main, &bn2.gamma, &bn2.beta, &mut bn2.state, mode, BN_EPS, BN_MOMENTUM,
                    )?;
                    main = tape.relu(&main);
                    main = tape.conv2d(&main, &conv3.w, conv3.b.as_ref(), 1, 0)?;
                    main = tape.batch_norm(
                        &main, &bn3.gamma, &bn3.beta, &mut bn3.state, mode, BN_EPS, BN_MOMENTUM,
                    )?;

                    let mut skip = match down {
                        Some((c, bn)) => {
                            let s = tape.conv2d(&h, &c.w, c.b.as_ref(), desc.stride, 0)?;
                            tape.batch_norm(
                                &s, &bn.gamma, &bn.beta, &mut bn.state, mode, BN_EPS, BN_MOMENTUM,
                            )?
                        }
                        None => h.clone(),
                    };
                    if let Some(kind) = site {
                        // The skip branch is shuffled too; with a shared
                        // permutation its streams reuse the residual
                        // branch's layer id, so maps coincide per channel
                        // wherever the domains match.
                        let skip_layer = if desc.share_skip {
                            layer_id
                        } else {
                            layer_id + SKIP_LAYER_OFFSET
                        };
                        skip = apply_shuffle(tape, &skip, kind, srng, skip_layer)?.0;
                    }
                    let sum = tape.add(&main, &skip)?;
                    tape.relu(&sum)
                }
            };
        }
        Ok(h)
    }

    // -- checkpointing ------------------------------------------------------

    /// Visit every persisted buffer in a stable order: trainable parameters
    /// plus batch-norm running statistics (state, not parameters, but a
    /// reload must evaluate bit-identically).
    fn visit_entries(
        &mut self,
        f: &mut dyn FnMut(String, EntryMut<'_>) -> Result<()>,
    ) -> Result<()> {
        fn conv(
            f: &mut dyn FnMut(String, EntryMut<'_>) -> Result<()>,
            prefix: &str,
            p: &ConvParams,
        ) -> Result<()> {
            f(format!("{}.w", prefix), EntryMut::Param(&p.w))?;
            if let Some(b) = &p.b {
                f(format!("{}.b", prefix), EntryMut::Param(b))?;
            }
            Ok(())
        }
        fn bn(
            f: &mut dyn FnMut(String, EntryMut<'_>) -> Result<()>,
            prefix: &str,
            p: &mut BnParams,
        ) -> Result<()> {
            f(format!("{}.gamma", prefix), EntryMut::Param(&p.gamma))?;
            f(format!("{}.beta", prefix), EntryMut::Param(&p.beta))?;
            f(
                format!("{}.running_mean", prefix),
                EntryMut::State(&mut p.state.running_mean),
            )?;
            f(
                format!("{}.running_var", prefix),
                EntryMut::State(&mut p.state.running_var),
            )
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let prefix = format!("layer{}", i);
            match layer {
                RuntimeLayer::Conv { p, .. } => conv(f, &prefix, p)?,
                RuntimeLayer::Bn2d(p) | RuntimeLayer::Bn1d(p) => bn(f, &format!("{}.bn", prefix), p)?,
                RuntimeLayer::Linear { w, b } => {
                    f(format!("{}.linear.w", prefix), EntryMut::Param(w))?;
                    f(format!("{}.linear.b", prefix), EntryMut::Param(b))?;
                }
                RuntimeLayer::Bottleneck { conv1, bn1, conv2, bn2, conv3, bn3, down, .. } => {
                    conv(f, &format!("{}.conv1", prefix), conv1)?;
                    bn(f, &format!("{}.bn1", prefix), bn1)?;
                    conv(f, &format!("{}.conv2", prefix), conv2)?;
                    bn(f, &format!("{}.bn2", prefix), bn2)?;
                    conv(f, &format!("{}.conv3", prefix), conv3)?;
                    bn(f, &format!("{}.bn3", prefix), bn3)?;
                    if let Some((c, dbn)) = down {
                        conv(f, &format!("{}.down", prefix), c)?;
                        bn(f, &format!("{}.down.bn", prefix), dbn)?;
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Write parameters and batch-norm running statistics with a
    /// name / shape / raw-values layout under a format-version header.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"shufflelab-checkpoint v1\n");
        buf.extend_from_slice(format!("elem {}\n", std::mem::size_of::<Elem>() * 8).as_bytes());
        let spec_text = self.spec.to_text();
        buf.extend_from_slice(format!("spec {}\n", spec_text.len()).as_bytes());
        buf.extend_from_slice(spec_text.as_bytes());
        self.visit_entries(&mut |name, entry| {
            let (shape, data) = entry.snapshot();
            buf.extend_from_slice(
                format!(
                    "tensor {} {} {}\n",
                    name,
                    shape.len(),
                    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" ")
                )
                .as_bytes(),
            );
            for v in &data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            Ok(())
        })?;
        buf.extend_from_slice(b"end\n");
        fs::write(path, buf)?;
        Ok(())
    }

    /// Rebuild a model from a checkpoint written by [`Model::save`].
    pub fn load(path: &Path) -> Result<Model> {
        let bytes = fs::read(path)?;
        let mut r = Reader { bytes: &bytes, pos: 0, path };
        let header = r.line()?;
        if header != "shufflelab-checkpoint v1" {
            return Err(Error::Checkpoint(format!("bad header '{}'", header)));
        }
        let elem_line = r.line()?;
        let expect = format!("elem {}", std::mem::size_of::<Elem>() * 8);
        if elem_line != expect {
            return Err(Error::Checkpoint(format!(
                "element width mismatch: file has '{}', build expects '{}'",
                elem_line, expect
            )));
        }
        let spec_line = r.line()?;
        let spec_len: usize = spec_line
            .strip_prefix("spec ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("bad spec line '{}'", spec_line)))?;
        let spec_text = std::str::from_utf8(r.take(spec_len)?)
            .map_err(|_| Error::Checkpoint("spec block is not utf-8".into()))?
            .to_string();
        let spec = ModelSpec::from_text(&spec_text)?;
        let mut model = Model::init_zeros(&spec)?;

        model.visit_entries(&mut |name, entry| {
            let line = r.line()?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some("tensor") {
                return Err(Error::Checkpoint(format!("expected tensor line, got '{}'", line)));
            }
            let file_name = parts.next().unwrap_or("");
            if file_name != name {
                return Err(Error::Checkpoint(format!(
                    "tensor order mismatch: file has '{}', model expects '{}'",
                    file_name, name
                )));
            }
            let rank: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("bad rank in '{}'", line)))?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(
                    parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::Checkpoint(format!("bad dims in '{}'", line)))?,
                );
            }
            let (expect_shape, _) = entry.snapshot();
            if shape != expect_shape {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?} in file, model expects {:?}",
                    name, shape, expect_shape
                )));
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * std::mem::size_of::<Elem>())?;
            let values: Vec<Elem> = raw
                .chunks_exact(std::mem::size_of::<Elem>())
                .map(|c| Elem::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entry.fill(&values);
            Ok(())
        })?;
        let end = r.line()?;
        if end != "end" {
            return Err(Error::Checkpoint(format!("expected end marker, got '{}'", end)));
        }
        Ok(model)
    }
}

enum EntryMut<'a> {
    Param(&'a Tensor),
    State(&'a mut Vec<Elem>),
}

impl EntryMut<'_> {
    fn snapshot(&self) -> (Vec<usize>, Vec<Elem>) {
        match self {
            EntryMut::Param(t) => (t.shape(), t.to_vec()),
            EntryMut::State(v) => (vec![v.len()], (**v).clone()),
        }
    }

    fn fill(self, values: &[Elem]) {
        match self {
            EntryMut::Param(t) => t.data_mut().copy_from_slice(values),
            EntryMut::State(v) => v.copy_from_slice(values),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::DataFormat {
            path: self.path.display().to_string(),
            offset: self.pos as u64,
            detail: "unterminated line".into(),
        })?;
        let line = std::str::from_utf8(&rest[..end]).map_err(|_| Error::DataFormat {
            path: self.path.display().to_string(),
            offset: self.pos as u64,
            detail: "non-utf8 header line".into(),
        })?;
        self.pos += end + 1;
        Ok(line)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::DataFormat {
                path: self.path.display().to_string(),
                offset: self.pos as u64,
                detail: format!("truncated: wanted {} bytes, {} left", n, self.bytes.len() - self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}
