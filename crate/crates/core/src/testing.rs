//! Verification utilities: independent brute-force oracles and a central
//! finite-difference gradient checker.
//!
//! Everything here deliberately avoids the engine's im2col/matmul path so
//! that agreement between the two is evidence, not tautology.

use crate::tensor::Tensor;
use crate::Elem;

/// Direct-loop convolution over a zero-padded input; the correctness
/// witness for the im2col implementation.
pub fn direct_conv2d(
    x: &[Elem],
    xs: [usize; 4],
    w: &[Elem],
    ws: [usize; 4],
    bias: Option<&[Elem]>,
    stride: usize,
    padding: usize,
) -> Vec<Elem> {
    let [n, cin, h, wd] = xs;
    let [cout, _, kh, kw] = ws;
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for item in 0..n {
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[oc]);
                    for ic in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let y = (oy * stride + i) as isize - padding as isize;
                                let xx = (ox * stride + j) as isize - padding as isize;
                                if y < 0 || y >= h as isize || xx < 0 || xx >= wd as isize {
                                    continue;
                                }
                                let xv = x[((item * cin + ic) * h + y as usize) * wd + xx as usize];
                                let wv = w[((oc * cin + ic) * kh + i) * kw + j];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((item * cout + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Exhaustive window scan max pooling.
pub fn direct_maxpool(x: &[Elem], xs: [usize; 4], k: usize, stride: usize) -> Vec<Elem> {
    let [n, c, h, w] = xs;
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for item in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = Elem::NEG_INFINITY;
                    for i in 0..k {
                        for j in 0..k {
                            let v = x[((item * c + ch) * h + oy * stride + i) * w + ox * stride + j];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out.push(best);
                }
            }
        }
    }
    out
}

/// Triple-loop affine map.
pub fn direct_linear(x: &[Elem], n: usize, f: usize, w: &[Elem], g: usize, b: &[Elem]) -> Vec<Elem> {
    let mut out = vec![0.0; n * g];
    for row in 0..n {
        for og in 0..g {
            let mut acc = b[og];
            for k in 0..f {
                acc += x[row * f + k] * w[og * f + k];
            }
            out[row * g + og] = acc;
        }
    }
    out
}

/// Central finite differences of a scalar function w.r.t. every entry of
/// every listed tensor. `loss` must recompute the full forward pass each
/// call (it sees the perturbed tensor data in place).
pub fn fd_gradients(inputs: &[&Tensor], eps: Elem, mut loss: impl FnMut() -> Elem) -> Vec<Vec<Elem>> {
    let mut grads = Vec::with_capacity(inputs.len());
    for t in inputs {
        let n = t.numel();
        let mut g = vec![0.0; n];
        for i in 0..n {
            let orig = t.data()[i];
            t.data_mut()[i] = orig + eps;
            let fp = loss();
            t.data_mut()[i] = orig - eps;
            let fm = loss();
            t.data_mut()[i] = orig;
            g[i] = (fp - fm) / (2.0 * eps);
        }
        grads.push(g);
    }
    grads
}

/// Largest relative error between two gradient vectors, with an absolute
/// floor so near-zero entries compare sanely.
pub fn max_rel_err(analytic: &[Elem], numeric: &[Elem]) -> Elem {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let scale = a.abs().max(n.abs()).max(1.0);
            (a - n).abs() / scale
        })
        .fold(0.0, Elem::max)
}

/// Deterministic pseudo-random fill for test tensors; avoids exact zeros so
/// ReLU/max-pool kinks stay off the sampled points.
pub fn fill_random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = crate::rng::stream(seed, crate::rng::Domain::Init, &[0xF00D]);
    use rand_chacha::rand_core::RngCore;
    let numel: usize = shape.iter().product();
    let data: Vec<Elem> = (0..numel)
        .map(|_| {
            let u = rng.next_u64() as Elem / u64::MAX as Elem; // [0,1]
            let v = 2.0 * u - 1.0;
            if v.abs() < 0.05 {
                0.1
            } else {
                v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data agree")
}
