//! Property tests for the permutation layers: bijectivity, multiset
//! preservation, exact inverse-gradient routing, batch-wide map sharing,
//! exact L2 preservation, and the patch-size reduction equality.

use proptest::prelude::*;

use shufflelab_core::shuffle::{
    apply_shuffle, patch_shuffle, spatial_shuffle, ShuffleKind, ShuffleRng,
};
use shufflelab_core::tape::Tape;
use shufflelab_core::{Elem, Tensor};

fn arb_kind() -> impl Strategy<Value = ShuffleKind> {
    prop_oneof![
        Just(ShuffleKind::Spatial),
        (1usize..=6).prop_map(ShuffleKind::Patch),
        Just(ShuffleKind::Channel),
    ]
}

fn arb_dims() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..=3, 1usize..=5, 1usize..=6, 1usize..=6)
}

fn dense(n: usize, c: usize, h: usize, w: usize, salt: u64) -> Tensor {
    // Distinct values per position so any misrouting is visible.
    let data: Vec<Elem> = (0..n * c * h * w)
        .map(|i| (i as Elem) + (salt % 97) as Elem * 0.001)
        .collect();
    Tensor::from_vec(&[n, c, h, w], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn every_emitted_map_is_a_bijection(
        (n, c, h, w) in arb_dims(),
        kind in arb_kind(),
        seed in 0u64..1000,
        step in 0u64..100,
    ) {
        let x = dense(n, c, h, w, seed);
        let rng = ShuffleRng::train(seed, step);
        let mut tape = Tape::new();
        let (_, spec) = apply_shuffle(&mut tape, &x, kind, &rng, 0).unwrap();
        prop_assert!(spec.is_valid());
        for (m, inv) in spec.maps().iter().zip(spec.inverses()) {
            let mut sorted = m.clone();
            sorted.sort_unstable();
            prop_assert!(sorted.iter().enumerate().all(|(i, &v)| i == v));
            prop_assert!(m.iter().enumerate().all(|(i, &s)| inv[s] == i));
        }
    }

    #[test]
    fn per_item_multisets_and_l2_norm_are_preserved_exactly(
        (n, c, h, w) in arb_dims(),
        kind in arb_kind(),
        seed in 0u64..1000,
    ) {
        let x = dense(n, c, h, w, seed);
        let rng = ShuffleRng::train(seed, 0);
        let mut tape = Tape::new();
        let (out, _) = apply_shuffle(&mut tape, &x, kind, &rng, 1).unwrap();
        let per = c * h * w;
        let xd = x.to_vec();
        let od = out.to_vec();
        for item in 0..n {
            let mut a = xd[item * per..(item + 1) * per].to_vec();
            let mut b = od[item * per..(item + 1) * per].to_vec();
            a.sort_by(|p, q| p.partial_cmp(q).unwrap());
            b.sort_by(|p, q| p.partial_cmp(q).unwrap());
            prop_assert_eq!(a, b);
        }
        // Values move without being combined, so the L2 norm is exactly
        // preserved; summing both sides in one canonical (sorted) order
        // keeps the comparison free of reassociation artifacts.
        let norm = |v: &[Elem]| {
            let mut sq: Vec<Elem> = v.iter().map(|x| x * x).collect();
            sq.sort_by(|p, q| p.partial_cmp(q).unwrap());
            sq.iter().sum::<Elem>()
        };
        prop_assert_eq!(norm(&xd), norm(&od));
    }

    #[test]
    fn backward_is_the_exact_inverse_permutation(
        (n, c, h, w) in arb_dims(),
        kind in arb_kind(),
        seed in 0u64..1000,
    ) {
        let x = dense(n, c, h, w, seed);
        x.set_requires_grad(true);
        let rng = ShuffleRng::train(seed, 5);
        let mut tape = Tape::new();
        let (out, _) = apply_shuffle(&mut tape, &x, kind, &rng, 2).unwrap();
        let g: Vec<Elem> = (0..x.numel()).map(|i| 1000.0 + i as Elem).collect();
        let loss = tape.dot_const(&out, &g).unwrap();
        tape.backward(&loss).unwrap();
        let dx = x.grad_to_vec().unwrap();
        // Forward-permuting the gradient must reproduce g exactly: values
        // move, they are never combined or scaled.
        let mut tape2 = Tape::new();
        let dx_t = Tensor::from_vec(&[n, c, h, w], dx).unwrap();
        let (fwd, _) = apply_shuffle(&mut tape2, &dx_t, kind, &rng, 2).unwrap();
        prop_assert_eq!(fwd.to_vec(), g);
    }

    #[test]
    fn all_batch_items_share_one_map(
        c in 1usize..=4,
        h in 2usize..=5,
        w in 2usize..=5,
        kind in arb_kind(),
        seed in 0u64..1000,
    ) {
        // Two items whose values differ by a constant offset: equal
        // destinations imply equal maps.
        let per = c * h * w;
        let mut data = Vec::with_capacity(2 * per);
        data.extend((0..per).map(|i| i as Elem));
        data.extend((0..per).map(|i| i as Elem + 10_000.0));
        let x = Tensor::from_vec(&[2, c, h, w], data).unwrap();
        let rng = ShuffleRng::train(seed, 9);
        let mut tape = Tape::new();
        let (out, _) = apply_shuffle(&mut tape, &x, kind, &rng, 0).unwrap();
        let od = out.to_vec();
        for i in 0..per {
            prop_assert_eq!(od[per + i] - od[i], 10_000.0);
        }
    }

    #[test]
    fn patch_equal_to_extent_reduces_to_spatial_shuffle(
        n in 1usize..=2,
        c in 1usize..=4,
        size in 1usize..=6,
        seed in 0u64..1000,
        step in 0u64..50,
    ) {
        let x = dense(n, c, size, size, seed);
        let rng = ShuffleRng::train(seed, step);
        let mut t1 = Tape::new();
        let (a, _) = spatial_shuffle(&mut t1, &x, &rng, 4).unwrap();
        let mut t2 = Tape::new();
        let (b, _) = patch_shuffle(&mut t2, &x, size, &rng, 4).unwrap();
        prop_assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn distinct_steps_and_frozen_streams_behave_as_contracted(
        seed in 0u64..1000,
        kind in arb_kind(),
    ) {
        // With a frozen stream the layer is deterministic; consecutive
        // steps use distinct streams.
        let x = dense(1, 8, 4, 4, seed);
        let rng = ShuffleRng::train(seed, 0);
        let mut tape = Tape::new();
        let (a, _) = apply_shuffle(&mut tape, &x, kind, &rng, 0).unwrap();
        let (b, _) = apply_shuffle(&mut tape, &x, kind, &rng, 0).unwrap();
        prop_assert_eq!(a.to_vec(), b.to_vec());
        let (c2, _) = apply_shuffle(&mut tape, &x, kind, &rng.at_step(1), 0).unwrap();
        // Not asserting inequality of outputs (tiny maps may repeat); the
        // stream ids differ, which the channel-level test pins down.
        let _ = c2;
    }
}
