//! Permutation layers: spatial shuffle, patch-wise spatial shuffle and
//! channel-wise shuffle, plus the shuffle-then-convolve composite.
//!
//! Shuffles move activation values without combining or scaling them, so
//! they preserve per-unit multisets and L2 norms exactly. The backward pass
//! applies the inverse permutation to the upstream gradient. Permutations
//! are drawn fresh each forward pass from splittable streams keyed on
//! (seed, phase, step, layer, channel, grid): identical keys reproduce
//! identical permutations, and train/eval phases can never collide.

use std::rc::Rc;

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;

const MECH_SPATIAL: u64 = 1;
const MECH_CHANNEL: u64 = 2;

/// Which axis a permutation acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisKind {
    SpatialPerChannel,
    SpatialPerPatch { patch: usize },
    Channel,
}

/// The three shuffle mechanisms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShuffleKind {
    Spatial,
    Patch(usize),
    Channel,
}

impl std::fmt::Display for ShuffleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ShuffleKind::Spatial => write!(f, "spatial"),
            ShuffleKind::Patch(p) => write!(f, "patch{}", p),
            ShuffleKind::Channel => write!(f, "channel"),
        }
    }
}

/// An explicit index mapping per independent unit (channel, channel x grid,
/// or the channel axis itself), with cached inverses.
///
/// Convention: `out[i] = in[map[i]]` within a unit, so `sorted(map)` is the
/// identity sequence and `inverse[map[i]] == i`.
#[derive(Debug, Clone)]
pub struct PermutationSpec {
    pub axis_kind: AxisKind,
    maps: Vec<Vec<usize>>,
    inverses: Vec<Vec<usize>>,
}

impl PermutationSpec {
    fn new(axis_kind: AxisKind, maps: Vec<Vec<usize>>) -> Self {
        let inverses = maps
            .iter()
            .map(|m| {
                let mut inv = vec![0; m.len()];
                for (i, &s) in m.iter().enumerate() {
                    inv[s] = i;
                }
                inv
            })
            .collect();
        PermutationSpec { axis_kind, maps, inverses }
    }

    pub fn maps(&self) -> &[Vec<usize>] {
        &self.maps
    }

    pub fn inverses(&self) -> &[Vec<usize>] {
        &self.inverses
    }

    pub fn unit_count(&self) -> usize {
        self.maps.len()
    }

    /// Every map is a bijection and every cached inverse undoes it.
    pub fn is_valid(&self) -> bool {
        self.maps.iter().zip(&self.inverses).all(|(m, inv)| {
            let mut sorted = m.clone();
            sorted.sort_unstable();
            sorted.iter().enumerate().all(|(i, &v)| i == v)
                && m.iter().enumerate().all(|(i, &s)| inv[s] == i)
        })
    }
}

/// Randomness contract for the shuffle layers: a seed plus a stream id made
/// of the phase (train or eval), the step counter and, per call site, the
/// layer id. Fresh permutations are drawn within each forward pass; frozen
/// `(seed, phase, step)` triples make a layer deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShuffleRng {
    pub seed: u64,
    pub phase: Mode,
    pub step: u64,
}

impl ShuffleRng {
    pub fn train(seed: u64, step: u64) -> Self {
        ShuffleRng { seed, phase: Mode::Train, step }
    }

    pub fn eval(seed: u64, step: u64) -> Self {
        ShuffleRng { seed, phase: Mode::Eval, step }
    }

    pub fn at_step(&self, step: u64) -> Self {
        ShuffleRng { step, ..*self }
    }

    fn unit_stream(&self, mech: u64, layer: u32, channel: u64, grid: u64) -> ChaCha12Rng {
        let domain = match self.phase {
            Mode::Train => Domain::ShuffleTrain,
            Mode::Eval => Domain::ShuffleEval,
        };
        rng::stream(self.seed, domain, &[mech, self.step, layer as u64, channel, grid])
    }
}

fn rank4(op: &'static str, x: &Tensor) -> Result<[usize; 4]> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("expected N,C,H,W tensor, got {:?}", s),
        });
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Build per-(channel, grid) spatial permutations and the flattened
/// per-item gather map. A grid of `ph x pw` equal to the full map extent
/// yields one grid per channel, which is exactly the global spatial
/// shuffle; trailing partial grids shuffle within their own smaller extent.
fn spatial_maps(
    c: usize,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    rng: &ShuffleRng,
    layer: u32,
) -> (Vec<Vec<usize>>, Vec<usize>) {
    let grid_rows = h.div_ceil(ph);
    let grid_cols = w.div_ceil(pw);
    let hw = h * w;
    let mut maps = Vec::with_capacity(c * grid_rows * grid_cols);
    let mut flat = vec![0usize; c * hw];
    for ch in 0..c {
        for gy in 0..grid_rows {
            for gx in 0..grid_cols {
                let gh = ph.min(h - gy * ph);
                let gw = pw.min(w - gx * pw);
                let grid_id = (gy * grid_cols + gx) as u64;
                let mut stream = rng.unit_stream(MECH_SPATIAL, layer, ch as u64, grid_id);
                let map = rng::permutation(&mut stream, gh * gw);
                for (i, &si) in map.iter().enumerate() {
                    let (dy, dx) = (gy * ph + i / gw, gx * pw + i % gw);
                    let (sy, sx) = (gy * ph + si / gw, gx * pw + si % gw);
                    flat[ch * hw + dy * w + dx] = ch * hw + sy * w + sx;
                }
                maps.push(map);
            }
        }
    }
    (maps, flat)
}

/// Per channel, permute all H*W positions with a fresh map, identically for
/// every batch item. Returns the shuffled tensor and the permutation drawn.
pub fn spatial_shuffle(
    tape: &mut Tape,
    x: &Tensor,
    rng: &ShuffleRng,
    layer: u32,
) -> Result<(Tensor, PermutationSpec)> {
    let [_, c, h, w] = rank4("spatial_shuffle", x)?;
    let (maps, flat) = spatial_maps(c, h, w, h, w, rng, layer);
    let out = tape.gather_per_item(x, Rc::new(flat))?;
    Ok((out, PermutationSpec::new(AxisKind::SpatialPerChannel, maps)))
}

/// Tile each feature map into patch x patch grids and permute positions
/// independently per (channel, grid). With patch equal to the map extent
/// this is the global spatial shuffle, bit for bit.
pub fn patch_shuffle(
    tape: &mut Tape,
    x: &Tensor,
    patch: usize,
    rng: &ShuffleRng,
    layer: u32,
) -> Result<(Tensor, PermutationSpec)> {
    if patch == 0 {
        return Err(Error::InvalidArg {
            op: "patch_shuffle",
            detail: "patch size must be positive".into(),
        });
    }
    let [_, c, h, w] = rank4("patch_shuffle", x)?;
    let (maps, flat) = spatial_maps(c, h, w, patch.min(h), patch.min(w), rng, layer);
    let out = tape.gather_per_item(x, Rc::new(flat))?;
    Ok((out, PermutationSpec::new(AxisKind::SpatialPerPatch { patch }, maps)))
}

/// Permute the channel axis, leaving spatial layout untouched.
pub fn channel_shuffle(
    tape: &mut Tape,
    x: &Tensor,
    rng: &ShuffleRng,
    layer: u32,
) -> Result<(Tensor, PermutationSpec)> {
    let [_, c, h, w] = rank4("channel_shuffle", x)?;
    let hw = h * w;
    let mut stream = rng.unit_stream(MECH_CHANNEL, layer, 0, 0);
    let map = rng::permutation(&mut stream, c);
    let mut flat = vec![0usize; c * hw];
    for (dst_c, &src_c) in map.iter().enumerate() {
        for pos in 0..hw {
            flat[dst_c * hw + pos] = src_c * hw + pos;
        }
    }
    let out = tape.gather_per_item(x, Rc::new(flat))?;
    Ok((out, PermutationSpec::new(AxisKind::Channel, vec![map])))
}

/// Dispatch on the mechanism.
pub fn apply_shuffle(
    tape: &mut Tape,
    x: &Tensor,
    kind: ShuffleKind,
    rng: &ShuffleRng,
    layer: u32,
) -> Result<(Tensor, PermutationSpec)> {
    match kind {
        ShuffleKind::Spatial => spatial_shuffle(tape, x, rng, layer),
        ShuffleKind::Patch(p) => patch_shuffle(tape, x, p, rng, layer),
        ShuffleKind::Channel => channel_shuffle(tape, x, rng, layer),
    }
}

/// One of the shuffling methods immediately followed by an ordinary
/// convolution; gradients flow through both.
#[allow(clippy::too_many_arguments)]
pub fn shuffle_conv(
    tape: &mut Tape,
    x: &Tensor,
    kind: ShuffleKind,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    padding: usize,
    rng: &ShuffleRng,
    layer: u32,
) -> Result<(Tensor, PermutationSpec)> {
    let (shuffled, spec) = apply_shuffle(tape, x, kind, rng, layer)?;
    let out = tape.conv2d(&shuffled, w, b, stride, padding)?;
    Ok((out, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Elem;

    fn tensor_4d(n: usize, c: usize, h: usize, w: usize, f: impl Fn(usize) -> Elem) -> Tensor {
        let data: Vec<Elem> = (0..n * c * h * w).map(f).collect();
        Tensor::from_vec(&[n, c, h, w], data).unwrap()
    }

    #[test]
    fn spatial_shuffle_on_single_position_is_identity() {
        let mut tape = Tape::new();
        let x = tensor_4d(2, 3, 1, 1, |i| i as Elem);
        let rng = ShuffleRng::train(1, 0);
        let (out, spec) = spatial_shuffle(&mut tape, &x, &rng, 0).unwrap();
        assert_eq!(out.to_vec(), x.to_vec());
        assert!(spec.is_valid());
    }

    #[test]
    fn spatial_shuffle_preserves_per_channel_multisets() {
        let mut tape = Tape::new();
        let x = tensor_4d(2, 3, 4, 4, |i| (i as Elem) * 0.5 - 7.0);
        let rng = ShuffleRng::train(9, 3);
        let (out, _) = spatial_shuffle(&mut tape, &x, &rng, 2).unwrap();
        let xd = x.to_vec();
        let od = out.to_vec();
        for unit in 0..2 * 3 {
            let mut a: Vec<Elem> = xd[unit * 16..(unit + 1) * 16].to_vec();
            let mut b: Vec<Elem> = od[unit * 16..(unit + 1) * 16].to_vec();
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            assert_eq!(a, b);
        }
    }

    #[test]
    fn batch_items_share_the_same_map() {
        // Plant distinct markers at the same position of two batch items;
        // they must land at the same destination.
        let mut tape = Tape::new();
        let mut data = vec![0.0; 2 * 1 * 3 * 3];
        data[4] = 1.0; // item 0, center
        data[9 + 4] = 2.0; // item 1, center
        let x = Tensor::from_vec(&[2, 1, 3, 3], data).unwrap();
        let rng = ShuffleRng::train(5, 1);
        let (out, _) = spatial_shuffle(&mut tape, &x, &rng, 0).unwrap();
        let od = out.to_vec();
        let pos0 = od[..9].iter().position(|&v| v == 1.0).unwrap();
        let pos1 = od[9..].iter().position(|&v| v == 2.0).unwrap();
        assert_eq!(pos0, pos1);
    }

    #[test]
    fn backward_applies_the_inverse_permutation() {
        let mut tape = Tape::new();
        let x = tensor_4d(1, 2, 3, 3, |i| i as Elem);
        x.set_requires_grad(true);
        let rng = ShuffleRng::train(11, 0);
        let (out, _) = spatial_shuffle(&mut tape, &x, &rng, 0).unwrap();
        // Loss = dot(out, g) for a distinct upstream gradient g, so
        // d loss / d x = inverse-permute(g); composing the forward map over
        // the gradient must recover g exactly.
        let g: Vec<Elem> = (0..18).map(|i| (i as Elem) + 100.0).collect();
        let loss = tape.dot_const(&out, &g).unwrap();
        tape.backward(&loss).unwrap();
        let dx = x.grad_to_vec().unwrap();

        let mut tape2 = Tape::new();
        let dx_t = Tensor::from_vec(&[1, 2, 3, 3], dx).unwrap();
        let (forwarded, _) = spatial_shuffle(&mut tape2, &dx_t, &rng, 0).unwrap();
        assert_eq!(forwarded.to_vec(), g);
    }

    #[test]
    fn patch_one_is_identity() {
        let mut tape = Tape::new();
        let x = tensor_4d(1, 2, 4, 4, |i| i as Elem);
        let rng = ShuffleRng::train(3, 0);
        let (out, spec) = patch_shuffle(&mut tape, &x, 1, &rng, 0).unwrap();
        assert_eq!(out.to_vec(), x.to_vec());
        assert!(spec.is_valid());
    }

    #[test]
    fn patch_equal_to_extent_matches_spatial_bit_for_bit() {
        let rng = ShuffleRng::train(17, 4);
        let x = tensor_4d(2, 3, 4, 4, |i| (i as Elem).sin());
        let mut t1 = Tape::new();
        let (a, _) = spatial_shuffle(&mut t1, &x, &rng, 5).unwrap();
        let mut t2 = Tape::new();
        let (b, _) = patch_shuffle(&mut t2, &x, 4, &rng, 5).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn patch_blocks_keep_their_multisets() {
        let mut tape = Tape::new();
        let x = tensor_4d(1, 1, 4, 4, |i| i as Elem);
        let rng = ShuffleRng::train(23, 0);
        let (out, spec) = patch_shuffle(&mut tape, &x, 2, &rng, 0).unwrap();
        assert_eq!(spec.unit_count(), 4);
        let od = out.to_vec();
        let xd = x.to_vec();
        for gy in 0..2 {
            for gx in 0..2 {
                let mut a = Vec::new();
                let mut b = Vec::new();
                for ly in 0..2 {
                    for lx in 0..2 {
                        a.push(xd[(gy * 2 + ly) * 4 + gx * 2 + lx]);
                        b.push(od[(gy * 2 + ly) * 4 + gx * 2 + lx]);
                    }
                }
                a.sort_by(|x, y| x.partial_cmp(y).unwrap());
                b.sort_by(|x, y| x.partial_cmp(y).unwrap());
                assert_eq!(a, b, "grid ({gy},{gx})");
            }
        }
    }

    #[test]
    fn patch_zero_is_an_error() {
        let mut tape = Tape::new();
        let x = tensor_4d(1, 1, 4, 4, |i| i as Elem);
        let rng = ShuffleRng::train(0, 0);
        assert!(patch_shuffle(&mut tape, &x, 0, &rng, 0).is_err());
    }

    #[test]
    fn non_dividing_patch_shuffles_partial_grids() {
        let mut tape = Tape::new();
        let x = tensor_4d(1, 1, 5, 5, |i| i as Elem);
        let rng = ShuffleRng::train(2, 0);
        let (out, spec) = patch_shuffle(&mut tape, &x, 3, &rng, 0).unwrap();
        assert!(spec.is_valid());
        // 2x2 grids: sizes 3x3, 3x2, 2x3, 2x2.
        assert_eq!(spec.unit_count(), 4);
        let mut a = x.to_vec();
        let mut b = out.to_vec();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn channel_shuffle_moves_whole_channels_bijectively() {
        let mut tape = Tape::new();
        let x = tensor_4d(2, 5, 3, 3, |i| i as Elem);
        let rng = ShuffleRng::train(31, 2);
        let (out, spec) = channel_shuffle(&mut tape, &x, &rng, 1).unwrap();
        assert!(spec.is_valid());
        let map = &spec.maps()[0];
        let xd = x.to_vec();
        let od = out.to_vec();
        for item in 0..2 {
            for (dst_c, &src_c) in map.iter().enumerate() {
                let dst = &od[(item * 5 + dst_c) * 9..(item * 5 + dst_c + 1) * 9];
                let src = &xd[(item * 5 + src_c) * 9..(item * 5 + src_c + 1) * 9];
                assert_eq!(dst, src);
            }
        }
    }

    #[test]
    fn channel_shuffle_single_channel_is_identity() {
        let mut tape = Tape::new();
        let x = tensor_4d(1, 1, 2, 2, |i| i as Elem);
        let rng = ShuffleRng::train(0, 0);
        let (out, _) = channel_shuffle(&mut tape, &x, &rng, 0).unwrap();
        assert_eq!(out.to_vec(), x.to_vec());
    }

    #[test]
    fn consecutive_steps_draw_independent_permutations() {
        let mut tape = Tape::new();
        let x = tensor_4d(1, 16, 1, 1, |i| i as Elem);
        let rng = ShuffleRng::train(7, 0);
        let (_, s0) = channel_shuffle(&mut tape, &x, &rng, 0).unwrap();
        let (_, s1) = channel_shuffle(&mut tape, &x, &rng.at_step(1), 0).unwrap();
        assert_ne!(s0.maps()[0], s1.maps()[0]);
        // Same stream id reproduces the same map.
        let (_, s0again) = channel_shuffle(&mut tape, &x, &rng, 0).unwrap();
        assert_eq!(s0.maps()[0], s0again.maps()[0]);
    }

    #[test]
    fn train_and_eval_phases_never_share_streams() {
        let mut tape = Tape::new();
        let x = tensor_4d(1, 32, 1, 1, |i| i as Elem);
        let (_, tr) = channel_shuffle(&mut tape, &x, &ShuffleRng::train(7, 0), 0).unwrap();
        let (_, ev) = channel_shuffle(&mut tape, &x, &ShuffleRng::eval(7, 0), 0).unwrap();
        assert_ne!(tr.maps()[0], ev.maps()[0]);
    }

    #[test]
    fn shuffle_conv_with_trivial_spatial_extent_equals_plain_conv() {
        let x = tensor_4d(2, 3, 1, 1, |i| i as Elem + 1.0);
        let w = Tensor::from_vec(&[2, 3, 1, 1], vec![0.5, -1.0, 2.0, 1.0, 1.0, 1.0]).unwrap();
        let rng = ShuffleRng::train(3, 0);
        let mut t1 = Tape::new();
        let (out, _) = shuffle_conv(&mut t1, &x, ShuffleKind::Spatial, &w, None, 1, 0, &rng, 0).unwrap();
        let mut t2 = Tape::new();
        let plain = t2.conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(out.to_vec(), plain.to_vec());
    }

    #[test]
    fn identity_conv_after_shuffle_returns_the_shuffled_input() {
        let x = tensor_4d(1, 1, 3, 3, |i| i as Elem);
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let rng = ShuffleRng::train(41, 0);
        let mut t1 = Tape::new();
        let (out, _) = shuffle_conv(&mut t1, &x, ShuffleKind::Spatial, &w, None, 1, 0, &rng, 0).unwrap();
        let mut t2 = Tape::new();
        let (shuffled, _) = spatial_shuffle(&mut t2, &x, &rng, 0).unwrap();
        assert_eq!(out.to_vec(), shuffled.to_vec());
    }

    #[test]
    fn l2_norm_is_preserved_exactly() {
        let mut tape = Tape::new();
        let x = tensor_4d(2, 4, 5, 5, |i| ((i * 31 % 13) as Elem) - 6.0);
        let rng = ShuffleRng::train(6, 9);
        let norm = |v: &[Elem]| {
            let mut sq: Vec<Elem> = v.iter().map(|x| x * x).collect();
            sq.sort_by(|p, q| p.partial_cmp(q).unwrap());
            sq.iter().sum::<Elem>()
        };
        let n0 = norm(&x.to_vec());
        for kind in [ShuffleKind::Spatial, ShuffleKind::Patch(2), ShuffleKind::Channel] {
            let (out, _) = apply_shuffle(&mut tape, &x, kind, &rng, 0).unwrap();
            assert_eq!(norm(&out.to_vec()), n0);
        }
    }
}
