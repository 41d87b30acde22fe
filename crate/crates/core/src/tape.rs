//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every layer primitive is a method on [`Tape`]: the forward pass computes
//! the output tensor and records a node with whatever the backward rule
//! needs. [`Tape::backward`] replays the nodes in reverse, accumulating
//! gradients into each input tensor's grad slot. Permutation layers route
//! gradients the same way max pooling does: to the source position, never
//! scaled.
//!
//! A tape is single-owner, not shared across threads. Calling `backward`
//! twice without recording a new forward pass is an error, not a silent
//! double accumulation. Any non-finite value produced by a forward or
//! backward pass is a hard error.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::linalg::{matmul_abt_acc, matmul_acc, matmul_atb_acc};
use crate::tensor::{idx4, Tensor};
use crate::Elem;

/// Train/eval switch shared by batch norm and the shuffle layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running statistics for batch normalization. Initialized to
/// mean 0 / var 1 so eval mode is well-defined before any batch is seen.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<Elem>,
    pub running_var: Vec<Elem>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

enum Rule {
    Conv2d {
        x: Tensor,
        w: Tensor,
        b: Option<Tensor>,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        x: Tensor,
        // Flat input index of the window argmax, one per output element.
        argmax: Vec<usize>,
    },
    Relu {
        x: Tensor,
    },
    BatchNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Vec<Elem>,
        istd: Vec<Elem>,
        train_stats: bool,
    },
    Gap {
        x: Tensor,
    },
    Linear {
        x: Tensor,
        w: Tensor,
        b: Option<Tensor>,
    },
    SoftmaxXent {
        logits: Tensor,
        probs: Vec<Elem>,
        labels: Vec<usize>,
    },
    Add {
        x: Tensor,
        y: Tensor,
    },
    Mul {
        x: Tensor,
        y: Tensor,
    },
    Scale {
        x: Tensor,
        c: Elem,
    },
    DotConst {
        x: Tensor,
        w: Vec<Elem>,
    },
    Reshape {
        x: Tensor,
    },
    // out[n][i] = x[n][src[i]]; backward scatters through the same map.
    Gather {
        x: Tensor,
        src: Rc<Vec<usize>>,
    },
}

struct Node {
    out: Tensor,
    rule: Rule,
}

/// Ordered record of executed operations plus their backward rules.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn check_rank4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("expected rank-4 N,C,H,W tensor, got shape {:?}", s),
        });
    }
    Ok([s[0], s[1], s[2], s[3]])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, out: Tensor, rule: Rule) {
        self.consumed = false;
        self.nodes.push(Node { out, rule });
    }

    /// 2-d convolution over zero-padded input.
    pub fn conv2d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        b: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let xs = check_rank4("conv2d", x)?;
        let ws = check_rank4("conv2d", w)?;
        let [n, cin, h, wd] = xs;
        let [cout, wcin, kh, kw] = ws;
        if stride == 0 {
            return Err(Error::InvalidArg {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "weight expects {} input channels (dim 1) but input has {}",
                    wcin, cin
                ),
            });
        }
        if let Some(bias) = b {
            if bias.shape() != vec![cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    detail: format!(
                        "bias shape {:?} does not match {} output channels",
                        bias.shape(),
                        cout
                    ),
                });
            }
        }
        let hp = h + 2 * padding;
        let wp = wd + 2 * padding;
        if kh > hp || kw > wp {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "kernel {}x{} exceeds padded input {}x{}",
                    kh, kw, hp, wp
                ),
            });
        }
        // Output extent floors, as the stride-2 3x3 convolutions inside
        // bottleneck blocks require; trailing pixels simply go unread.
        let oh = (hp - kh) / stride + 1;
        let ow = (wp - kw) / stride + 1;

        let rows = cin * kh * kw;
        let cols = oh * ow;
        let mut col = vec![0.0; rows * cols];
        let mut out = vec![0.0; n * cout * cols];
        {
            let xd = x.data();
            let wd_flat = w.data();
            for item in 0..n {
                im2col(&xd, &mut col, item, xs, kh, kw, stride, padding, oh, ow);
                let out_item = &mut out[item * cout * cols..(item + 1) * cout * cols];
                matmul_acc(out_item, &wd_flat, &col, cout, rows, cols);
            }
        }
        if let Some(bias) = b {
            let bd = bias.data();
            for item in 0..n {
                for c in 0..cout {
                    let base = (item * cout + c) * cols;
                    for v in &mut out[base..base + cols] {
                        *v += bd[c];
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[n, cout, oh, ow], out)?;
        out.assert_finite("conv2d")?;
        self.push(
            out.clone(),
            Rule::Conv2d {
                x: x.clone(),
                w: w.clone(),
                b: b.cloned(),
                stride,
                padding,
            },
        );
        Ok(out)
    }

    /// Max pooling; backward routes the gradient to the window argmax only,
    /// ties broken by the first index in row-major order.
    pub fn max_pool2d(&mut self, x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
        let xs = check_rank4("max_pool2d", x)?;
        let [n, c, h, w] = xs;
        if k == 0 || stride == 0 {
            return Err(Error::InvalidArg {
                op: "max_pool2d",
                detail: "window and stride must be positive".into(),
            });
        }
        if k > h || k > w {
            return Err(Error::InvalidArg {
                op: "max_pool2d",
                detail: format!("window {} exceeds input {}x{}", k, h, w),
            });
        }
        if (h - k) % stride != 0 || (w - k) % stride != 0 {
            return Err(Error::InvalidArg {
                op: "max_pool2d",
                detail: format!(
                    "input {}x{} does not divide into windows of {} with stride {}",
                    h, w, k, stride
                ),
            });
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        {
            let xd = x.data();
            let mut o = 0;
            for item in 0..n {
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = Elem::NEG_INFINITY;
                            let mut best_idx = 0;
                            for i in 0..k {
                                for j in 0..k {
                                    let idx =
                                        idx4(&xs, item, ch, oy * stride + i, ox * stride + j);
                                    if xd[idx] > best {
                                        best = xd[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            out[o] = best;
                            argmax[o] = best_idx;
                            o += 1;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, oh, ow], out)?;
        out.assert_finite("max_pool2d")?;
        self.push(out.clone(), Rule::MaxPool2d { x: x.clone(), argmax });
        Ok(out)
    }

    /// Elementwise max(0, x); subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: &Tensor) -> Tensor {
        let out: Vec<Elem> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let out = Tensor::from_vec(&x.shape(), out).expect("same shape");
        self.push(out.clone(), Rule::Relu { x: x.clone() });
        out
    }

    /// Batch normalization over all axes except the channel axis (dim 1).
    /// Accepts rank-4 feature maps or rank-2 flat features.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        state: &mut BnState,
        mode: Mode,
        eps: Elem,
        momentum: Elem,
    ) -> Result<Tensor> {
        let s = x.shape();
        let (n, c, hw) = match s.len() {
            4 => (s[0], s[1], s[2] * s[3]),
            2 => (s[0], s[1], 1),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    detail: format!("expected rank-2 or rank-4 input, got {:?}", s),
                })
            }
        };
        if gamma.numel() != c || beta.numel() != c || state.running_mean.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                detail: format!(
                    "channel count mismatch: input C={}, gamma={}, beta={}, state={}",
                    c,
                    gamma.numel(),
                    beta.numel(),
                    state.running_mean.len()
                ),
            });
        }
        let count = n * hw;
        let xd = x.to_vec();
        let mut xhat = vec![0.0; xd.len()];
        let mut istd = vec![0.0; c];
        let mut out = vec![0.0; xd.len()];
        let g = gamma.to_vec();
        let bt = beta.to_vec();

        let per_channel = |item: usize, ch: usize| (item * c + ch) * hw;

        match mode {
            Mode::Train => {
                if count == 0 {
                    return Err(Error::InvalidArg {
                        op: "batch_norm",
                        detail: "empty batch".into(),
                    });
                }
                for ch in 0..c {
                    let mut mean = 0.0;
                    for item in 0..n {
                        let base = per_channel(item, ch);
                        for p in 0..hw {
                            mean += xd[base + p];
                        }
                    }
                    mean /= count as Elem;
                    let mut var = 0.0;
                    for item in 0..n {
                        let base = per_channel(item, ch);
                        for p in 0..hw {
                            let d = xd[base + p] - mean;
                            var += d * d;
                        }
                    }
                    var /= count as Elem;
                    let is = 1.0 / (var + eps).sqrt();
                    istd[ch] = is;
                    for item in 0..n {
                        let base = per_channel(item, ch);
                        for p in 0..hw {
                            let xh = (xd[base + p] - mean) * is;
                            xhat[base + p] = xh;
                            out[base + p] = g[ch] * xh + bt[ch];
                        }
                    }
                    // Running stats use the unbiased variance, matching the
                    // usual convention; normalization above uses the biased one.
                    let var_unbiased = if count > 1 {
                        var * count as Elem / (count - 1) as Elem
                    } else {
                        var
                    };
                    state.running_mean[ch] =
                        (1.0 - momentum) * state.running_mean[ch] + momentum * mean;
                    state.running_var[ch] =
                        (1.0 - momentum) * state.running_var[ch] + momentum * var_unbiased;
                }
            }
            Mode::Eval => {
                for ch in 0..c {
                    let is = 1.0 / (state.running_var[ch] + eps).sqrt();
                    istd[ch] = is;
                    for item in 0..n {
                        let base = per_channel(item, ch);
                        for p in 0..hw {
                            let xh = (xd[base + p] - state.running_mean[ch]) * is;
                            xhat[base + p] = xh;
                            out[base + p] = g[ch] * xh + bt[ch];
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&s, out)?;
        out.assert_finite("batch_norm")?;
        self.push(
            out.clone(),
            Rule::BatchNorm {
                x: x.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                istd,
                train_stats: mode == Mode::Train,
            },
        );
        Ok(out)
    }

    /// Per-channel spatial mean: [N,C,H,W] -> [N,C].
    pub fn global_avg_pool(&mut self, x: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = check_rank4("global_avg_pool", x)?;
        let hw = h * w;
        let mut out = vec![0.0; n * c];
        {
            let xd = x.data();
            for (o, chunk) in out.iter_mut().zip(xd.chunks_exact(hw)) {
                *o = chunk.iter().sum::<Elem>() / hw as Elem;
            }
        }
        let out = Tensor::from_vec(&[n, c], out)?;
        out.assert_finite("global_avg_pool")?;
        self.push(out.clone(), Rule::Gap { x: x.clone() });
        Ok(out)
    }

    /// Affine map x W^T + b for x: [N,F], w: [G,F], b: [G].
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let xs = x.shape();
        let ws = w.shape();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "linear",
                detail: format!("expected rank-2 input and weight, got {:?} and {:?}", xs, ws),
            });
        }
        let (n, f) = (xs[0], xs[1]);
        let (g, wf) = (ws[0], ws[1]);
        if f != wf {
            return Err(Error::ShapeMismatch {
                op: "linear",
                detail: format!("input features {} (dim 1) != weight features {} (dim 1)", f, wf),
            });
        }
        if let Some(bias) = b {
            if bias.numel() != g {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    detail: format!("bias length {} != output features {}", bias.numel(), g),
                });
            }
        }
        let mut out = vec![0.0; n * g];
        matmul_abt_acc(&mut out, &x.data(), &w.data(), n, f, g);
        if let Some(bias) = b {
            let bd = bias.data();
            for row in out.chunks_exact_mut(g) {
                for (v, &bv) in row.iter_mut().zip(bd.iter()) {
                    *v += bv;
                }
            }
        }
        let out = Tensor::from_vec(&[n, g], out)?;
        out.assert_finite("linear")?;
        self.push(
            out.clone(),
            Rule::Linear {
                x: x.clone(),
                w: w.clone(),
                b: b.cloned(),
            },
        );
        Ok(out)
    }

    /// Mean cross-entropy between logits [N,K] and integer labels; returns
    /// the scalar loss and the softmax probabilities (detached).
    pub fn softmax_cross_entropy(
        &mut self,
        logits: &Tensor,
        labels: &[usize],
    ) -> Result<(Tensor, Vec<Elem>)> {
        let s = logits.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("expected rank-2 logits, got {:?}", s),
            });
        }
        let (n, k) = (s[0], s[1]);
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("{} labels for {} rows", labels.len(), n),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArg {
                op: "softmax_cross_entropy",
                detail: format!("label {} out of range for {} classes", bad, k),
            });
        }
        let ld = logits.to_vec();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for row in 0..n {
            let base = row * k;
            let row_logits = &ld[base..base + k];
            let max = row_logits.iter().cloned().fold(Elem::NEG_INFINITY, Elem::max);
            let mut denom = 0.0;
            for (p, &v) in probs[base..base + k].iter_mut().zip(row_logits) {
                let e = (v - max).exp();
                *p = e;
                denom += e;
            }
            for p in &mut probs[base..base + k] {
                *p /= denom;
            }
            // -log softmax(label) in the stabilized form.
            loss += denom.ln() - (row_logits[labels[row]] - max);
        }
        loss /= n as Elem;
        let out = Tensor::scalar(loss);
        out.assert_finite("softmax_cross_entropy")?;
        self.push(
            out.clone(),
            Rule::SoftmaxXent {
                logits: logits.clone(),
                probs: probs.clone(),
                labels: labels.to_vec(),
            },
        );
        Ok((out, probs))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", x.shape(), y.shape()),
            });
        }
        let out: Vec<Elem> = x.data().iter().zip(y.data().iter()).map(|(a, b)| a + b).collect();
        let out = Tensor::from_vec(&x.shape(), out)?;
        out.assert_finite("add")?;
        self.push(out.clone(), Rule::Add { x: x.clone(), y: y.clone() });
        Ok(out)
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", x.shape(), y.shape()),
            });
        }
        let out: Vec<Elem> = x.data().iter().zip(y.data().iter()).map(|(a, b)| a * b).collect();
        let out = Tensor::from_vec(&x.shape(), out)?;
        out.assert_finite("mul")?;
        self.push(out.clone(), Rule::Mul { x: x.clone(), y: y.clone() });
        Ok(out)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: &Tensor, c: Elem) -> Tensor {
        let out: Vec<Elem> = x.data().iter().map(|&v| v * c).collect();
        let out = Tensor::from_vec(&x.shape(), out).expect("same shape");
        self.push(out.clone(), Rule::Scale { x: x.clone(), c });
        out
    }

    /// Dot product with a fixed coefficient vector; yields a scalar. Handy
    /// for building scalar losses out of arbitrary outputs.
    pub fn dot_const(&mut self, x: &Tensor, w: &[Elem]) -> Result<Tensor> {
        if x.numel() != w.len() {
            return Err(Error::ShapeMismatch {
                op: "dot_const",
                detail: format!("{} elements vs {} coefficients", x.numel(), w.len()),
            });
        }
        let v: Elem = x.data().iter().zip(w).map(|(a, b)| a * b).sum();
        let out = Tensor::scalar(v);
        out.assert_finite("dot_const")?;
        self.push(
            out.clone(),
            Rule::DotConst {
                x: x.clone(),
                w: w.to_vec(),
            },
        );
        Ok(out)
    }

    /// Sum of all elements (dot with ones).
    pub fn sum(&mut self, x: &Tensor) -> Tensor {
        let w = vec![1.0; x.numel()];
        self.dot_const(x, &w).expect("length matches by construction")
    }

    /// View the same values under a new shape (copying storage).
    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {} elements as {:?}", x.numel(), shape),
            });
        }
        let out = Tensor::from_vec(shape, x.to_vec())?;
        self.push(out.clone(), Rule::Reshape { x: x.clone() });
        Ok(out)
    }

    /// Per-batch-item gather: out[n][i] = x[n][src[i]], with `src` a
    /// permutation of the per-item element range. All batch items share the
    /// same map. Backward scatters the upstream gradient through the inverse,
    /// moving values without scaling them.
    pub fn gather_per_item(&mut self, x: &Tensor, src: Rc<Vec<usize>>) -> Result<Tensor> {
        let s = x.shape();
        if s.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "gather_per_item",
                detail: "scalar input".into(),
            });
        }
        let n = s[0];
        let per = x.numel() / n.max(1);
        if src.len() != per {
            return Err(Error::ShapeMismatch {
                op: "gather_per_item",
                detail: format!("map covers {} elements, items have {}", src.len(), per),
            });
        }
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for item in 0..n {
            let base = item * per;
            let (src_item, dst_item) = (&xd[base..base + per], &mut out[base..base + per]);
            for (dst, &si) in dst_item.iter_mut().zip(src.iter()) {
                *dst = src_item[si];
            }
        }
        drop(xd);
        let out = Tensor::from_vec(&s, out)?;
        self.push(
            out.clone(),
            Rule::Gather {
                x: x.clone(),
                src,
            },
        );
        Ok(out)
    }

    /// Propagate gradients from a scalar loss back to every tensor recorded
    /// on the tape. Clears the tape; a second call without a new forward
    /// pass is an error.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !loss.is_scalar() {
            return Err(Error::NonScalarLoss(loss.shape()));
        }
        self.consumed = true;
        loss.seed_grad(vec![1.0]);

        let nodes = std::mem::take(&mut self.nodes);
        for node in nodes.iter().rev() {
            let Some(g_out) = node.out.grad_to_vec() else {
                continue;
            };
            backward_node(&node.rule, &g_out)?;
        }
        Ok(())
    }
}

fn assert_grad_finite(op: &'static str, g: &[Elem]) -> Result<()> {
    if g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn backward_node(rule: &Rule, g_out: &[Elem]) -> Result<()> {
    match rule {
        Rule::Conv2d { x, w, b, stride, padding } => {
            let xs = {
                let s = x.shape();
                [s[0], s[1], s[2], s[3]]
            };
            let ws = {
                let s = w.shape();
                [s[0], s[1], s[2], s[3]]
            };
            let [n, _cin, _h, _wd] = xs;
            let [cout, cin, kh, kw] = ws;
            let os = {
                // output spatial extents recomputed from shapes
                let hp = xs[2] + 2 * padding;
                let wp = xs[3] + 2 * padding;
                [(hp - kh) / stride + 1, (wp - kw) / stride + 1]
            };
            let (oh, ow) = (os[0], os[1]);
            let rows = cin * kh * kw;
            let cols = oh * ow;

            let mut dw = vec![0.0; w.numel()];
            let mut dx = vec![0.0; x.numel()];
            let mut db = b.as_ref().map(|bias| vec![0.0; bias.numel()]);
            let mut col = vec![0.0; rows * cols];
            let mut dcol = vec![0.0; rows * cols];
            {
                let xd = x.data();
                let wd = w.data();
                for item in 0..n {
                    let g_item = &g_out[item * cout * cols..(item + 1) * cout * cols];
                    im2col(&xd, &mut col, item, xs, kh, kw, *stride, *padding, oh, ow);
                    // dW += g_item * col^T
                    matmul_abt_acc(&mut dw, g_item, &col, cout, cols, rows);
                    // dcol = W^T * g_item
                    dcol.iter_mut().for_each(|v| *v = 0.0);
                    matmul_atb_acc(&mut dcol, &wd, g_item, rows, cout, cols);
                    col2im_acc(&mut dx, &dcol, item, xs, kh, kw, *stride, *padding, oh, ow);
                    if let Some(db) = db.as_mut() {
                        for c in 0..cout {
                            db[c] += g_item[c * cols..(c + 1) * cols].iter().sum::<Elem>();
                        }
                    }
                }
            }
            assert_grad_finite("conv2d backward", &dw)?;
            assert_grad_finite("conv2d backward", &dx)?;
            w.accumulate_grad(&dw);
            x.accumulate_grad(&dx);
            if let (Some(bias), Some(db)) = (b, db) {
                assert_grad_finite("conv2d backward", &db)?;
                bias.accumulate_grad(&db);
            }
        }
        Rule::MaxPool2d { x, argmax } => {
            let mut dx = vec![0.0; x.numel()];
            for (g, &src) in g_out.iter().zip(argmax) {
                dx[src] += g;
            }
            assert_grad_finite("max_pool2d backward", &dx)?;
            x.accumulate_grad(&dx);
        }
        Rule::Relu { x } => {
            let xd = x.data();
            let dx: Vec<Elem> = xd
                .iter()
                .zip(g_out)
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect();
            drop(xd);
            assert_grad_finite("relu backward", &dx)?;
            x.accumulate_grad(&dx);
        }
        Rule::BatchNorm { x, gamma, beta, xhat, istd, train_stats } => {
            let s = x.shape();
            let (n, c, hw) = match s.len() {
                4 => (s[0], s[1], s[2] * s[3]),
                _ => (s[0], s[1], 1),
            };
            let count = (n * hw) as Elem;
            let g = gamma.to_vec();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dx = vec![0.0; x.numel()];

            // Per-channel reductions of dy and dy*xhat.
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for item in 0..n {
                for ch in 0..c {
                    let base = (item * c + ch) * hw;
                    for p in 0..hw {
                        let dy = g_out[base + p];
                        sum_dy[ch] += dy;
                        sum_dy_xhat[ch] += dy * xhat[base + p];
                    }
                }
            }
            dgamma.copy_from_slice(&sum_dy_xhat);
            dbeta.copy_from_slice(&sum_dy);

            for item in 0..n {
                for ch in 0..c {
                    let base = (item * c + ch) * hw;
                    for p in 0..hw {
                        let dy = g_out[base + p];
                        dx[base + p] = if *train_stats {
                            g[ch] * istd[ch] / count
                                * (count * dy - sum_dy[ch] - xhat[base + p] * sum_dy_xhat[ch])
                        } else {
                            g[ch] * istd[ch] * dy
                        };
                    }
                }
            }
            assert_grad_finite("batch_norm backward", &dx)?;
            x.accumulate_grad(&dx);
            gamma.accumulate_grad(&dgamma);
            beta.accumulate_grad(&dbeta);
        }
        Rule::Gap { x } => {
            let s = x.shape();
            let hw = s[2] * s[3];
            let inv = 1.0 / hw as Elem;
            let mut dx = vec![0.0; x.numel()];
            for (chunk, &g) in dx.chunks_exact_mut(hw).zip(g_out) {
                for v in chunk {
                    *v = g * inv;
                }
            }
            assert_grad_finite("global_avg_pool backward", &dx)?;
            x.accumulate_grad(&dx);
        }
        Rule::Linear { x, w, b } => {
            let xs = x.shape();
            let ws = w.shape();
            let (n, f, g) = (xs[0], xs[1], ws[0]);
            let mut dx = vec![0.0; n * f];
            let mut dw = vec![0.0; g * f];
            matmul_acc(&mut dx, g_out, &w.data(), n, g, f);
            matmul_atb_acc(&mut dw, g_out, &x.data(), g, n, f);
            assert_grad_finite("linear backward", &dx)?;
            assert_grad_finite("linear backward", &dw)?;
            x.accumulate_grad(&dx);
            w.accumulate_grad(&dw);
            if let Some(bias) = b {
                let mut db = vec![0.0; g];
                for row in g_out.chunks_exact(g) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                assert_grad_finite("linear backward", &db)?;
                bias.accumulate_grad(&db);
            }
        }
        Rule::SoftmaxXent { logits, probs, labels } => {
            let s = logits.shape();
            let (n, k) = (s[0], s[1]);
            let g = g_out[0];
            let scale = g / n as Elem;
            let mut dl = probs.clone();
            for (row, &label) in labels.iter().enumerate() {
                dl[row * k + label] -= 1.0;
            }
            for v in &mut dl {
                *v *= scale;
            }
            assert_grad_finite("softmax_cross_entropy backward", &dl)?;
            logits.accumulate_grad(&dl);
        }
        Rule::Add { x, y } => {
            x.accumulate_grad(g_out);
            y.accumulate_grad(g_out);
        }
        Rule::Mul { x, y } => {
            let dx: Vec<Elem> = y.data().iter().zip(g_out).map(|(&v, &g)| v * g).collect();
            let dy: Vec<Elem> = x.data().iter().zip(g_out).map(|(&v, &g)| v * g).collect();
            assert_grad_finite("mul backward", &dx)?;
            assert_grad_finite("mul backward", &dy)?;
            x.accumulate_grad(&dx);
            y.accumulate_grad(&dy);
        }
        Rule::Scale { x, c } => {
            let dx: Vec<Elem> = g_out.iter().map(|&g| g * c).collect();
            assert_grad_finite("scale backward", &dx)?;
            x.accumulate_grad(&dx);
        }
        Rule::DotConst { x, w } => {
            let g = g_out[0];
            let dx: Vec<Elem> = w.iter().map(|&wv| wv * g).collect();
            assert_grad_finite("dot_const backward", &dx)?;
            x.accumulate_grad(&dx);
        }
        Rule::Reshape { x } => {
            x.accumulate_grad(g_out);
        }
        Rule::Gather { x, src } => {
            let s = x.shape();
            let n = s[0];
            let per = src.len();
            let mut dx = vec![0.0; x.numel()];
            for item in 0..n {
                let base = item * per;
                for (i, &si) in src.iter().enumerate() {
                    dx[base + si] += g_out[base + i];
                }
            }
            x.accumulate_grad(&dx);
        }
    }
    Ok(())
}

/// Gather padded receptive fields of one batch item into a
/// (Cin*kh*kw) x (OH*OW) column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[Elem],
    col: &mut [Elem],
    item: usize,
    xs: [usize; 4],
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) {
    let [_, cin, h, w] = xs;
    let cols = oh * ow;
    let mut r = 0;
    for c in 0..cin {
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut col[r * cols..(r + 1) * cols];
                r += 1;
                for oy in 0..oh {
                    let y = (oy * stride + i) as isize - padding as isize;
                    let row_out = &mut row[oy * ow..(oy + 1) * ow];
                    if y < 0 || y >= h as isize {
                        row_out.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let y = y as usize;
                    for (ox, out) in row_out.iter_mut().enumerate() {
                        let xcol = (ox * stride + j) as isize - padding as isize;
                        *out = if xcol < 0 || xcol >= w as isize {
                            0.0
                        } else {
                            x[idx4(&xs, item, c, y, xcol as usize)]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a column-matrix gradient back onto the input layout;
/// exact adjoint of `im2col`.
#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    dx: &mut [Elem],
    dcol: &[Elem],
    item: usize,
    xs: [usize; 4],
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) {
    let [_, cin, h, w] = xs;
    let cols = oh * ow;
    let mut r = 0;
    for c in 0..cin {
        for i in 0..kh {
            for j in 0..kw {
                let row = &dcol[r * cols..(r + 1) * cols];
                r += 1;
                for oy in 0..oh {
                    let y = (oy * stride + i) as isize - padding as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let y = y as usize;
                    for ox in 0..ow {
                        let xcol = (ox * stride + j) as isize - padding as isize;
                        if xcol < 0 || xcol >= w as isize {
                            continue;
                        }
                        dx[idx4(&xs, item, c, y, xcol as usize)] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}
