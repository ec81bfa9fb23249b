mod common;

use bim_core::rng::SplitMix64;
use bim_core::tensor::{Graph, ParamId, Tensor};
use bim_core::vit::{
    incremental_drop, keep_count, patchify, random_mask, reconstruction_loss, unpatchify, MaskState, ModelSpec,
    ParamStore, PatchEmbed,
};
use common::random_tensor;
use proptest::prelude::*;

fn ratio() -> impl Strategy<Value = f64> {
    (0u32..100).prop_map(|p| p as f64 / 100.0)
}

proptest! {
    #[test]
    fn kept_and_masked_partition_all_patches(n in 1usize..200, r in ratio(), seed in any::<u64>()) {
        let m = MaskState::sample(n, r, &mut SplitMix64::new(seed)).unwrap();
        prop_assert_eq!(m.num_visible(), keep_count(n, r));
        let mut all: Vec<usize> = m.kept_ids.iter().copied().chain(m.masked_ids()).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        for &k in &m.kept_ids {
            prop_assert_eq!(m.mask[k], 0);
        }
        m.check().unwrap();
    }

    /// Shuffling rows into `kept ++ masked` order and gathering back with
    /// `restore_perm` returns the original rows.
    #[test]
    fn unshuffle_inverts_shuffle(n in 1usize..64, d in 1usize..8, r in ratio(), seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let m = MaskState::sample(n, r, &mut rng).unwrap();
        let x = random_tensor::<f64>(&[n, d], &mut rng);
        let mut g = Graph::<f64>::new();
        let xn = g.constant(x.clone());
        let order: Vec<usize> = m.kept_ids.iter().copied().chain(m.masked_ids()).collect();
        let shuffled = g.gather_rows(xn, &order).unwrap();
        let back = g.gather_rows(shuffled, &m.restore_perm).unwrap();
        prop_assert!(g.value(back).unwrap().bitwise_eq(&x));
        let scattered = g.scatter_rows(shuffled, &order, n).unwrap();
        prop_assert!(g.value(scattered).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn loss_ignores_visible_patch_predictions(b in 1usize..4, r in 1u32..95, seed in any::<u64>()) {
        let spec = ModelSpec::tiny();
        let (n, p) = (spec.num_patches(), spec.patch_pixels());
        let mut rng = SplitMix64::new(seed);
        let masks: Vec<MaskState> = (0..b)
            .map(|_| MaskState::sample(n, r as f64 / 100.0, &mut rng).unwrap())
            .collect();
        prop_assume!(masks.iter().all(|m| m.num_masked() > 0));
        let pred_value = random_tensor::<f64>(&[b, n, p], &mut rng);
        let target = random_tensor::<f64>(&[b, n, p], &mut rng);
        let mut g = Graph::<f64>::new();
        let pred = g.param(ParamId(0), &pred_value, None);
        let loss = reconstruction_loss(&mut g, pred, &target, &masks, false).unwrap();
        let grads = g.backward(loss, None).unwrap();
        let grad = grads.get(ParamId(0)).unwrap();
        for (bi, m) in masks.iter().enumerate() {
            for patch in 0..n {
                let row = grad.row(bi * n + patch);
                if m.mask[patch] == 0 {
                    prop_assert!(row.iter().all(|&v| v == 0.0));
                } else {
                    prop_assert!(row.iter().any(|&v| v != 0.0));
                }
            }
        }
    }

    #[test]
    fn patchify_round_trips(b in 1usize..3, c in 1usize..4, side in 1usize..5, patch in 1usize..5, seed in any::<u64>()) {
        let s = side * patch;
        let x = random_tensor::<f64>(&[b, c, s, s], &mut SplitMix64::new(seed));
        let p = patchify(&x, patch).unwrap();
        prop_assert_eq!(p.shape(), &[b, side * side, patch * patch * c]);
        prop_assert!(unpatchify(&p, patch, c).unwrap().bitwise_eq(&x));
    }

    /// The visible-only embedding is row-for-row the full embedding
    /// followed by masking, and keeps the batch axis.
    #[test]
    fn visible_embedding_matches_masked_full_embedding(b in 1usize..4, r in ratio(), seed in any::<u64>()) {
        let spec = ModelSpec::tiny();
        prop_assume!(keep_count(spec.num_patches(), r) > 0);
        let mut store = ParamStore::<f64>::new();
        let mut rng = SplitMix64::new(seed);
        let embed = PatchEmbed::new(&spec, &mut store, &mut rng).unwrap();
        let images = common::random_images::<f64>(&spec, b, seed);
        let mut g = Graph::new();
        let full = embed.forward(&mut g, &store, &images).unwrap();
        let batch = random_mask(&mut g, full, r, &mut rng.split(1)).unwrap();
        let vis = embed.forward_visible(&mut g, &store, &images, &batch.masks).unwrap();
        let a = g.value(batch.tokens).unwrap();
        let v = g.value(vis).unwrap();
        prop_assert_eq!(v.shape()[0], b);
        prop_assert_eq!(a.shape(), v.shape());
        for (x, y) in a.data().iter().zip(v.data()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }
}

/// Survivors of every drop are a subset of the previous visible set.
#[test]
fn incremental_drops_nest_over_many_draws() {
    let schedule = [0.5, 0.6, 0.75, 0.8, 0.9];
    let (n, d) = (64, 2);
    for draw in 0..1000u64 {
        let mut rng = SplitMix64::new(draw);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, n, d]));
        let mut batch = random_mask(&mut g, x, schedule[0], &mut rng).unwrap();
        for &r in &schedule[1..] {
            let prev: Vec<Vec<usize>> = batch.masks.iter().map(|m| m.kept_ids.clone()).collect();
            batch = incremental_drop(&mut g, batch, r, &mut rng).unwrap();
            for (m, before) in batch.masks.iter().zip(&prev) {
                assert_eq!(m.num_visible(), keep_count(n, r));
                let pos: Vec<usize> = m
                    .kept_ids
                    .iter()
                    .map(|k| before.iter().position(|b| b == k).expect("survivor was visible"))
                    .collect();
                assert!(pos.windows(2).all(|w| w[0] < w[1]), "relative order kept");
            }
            assert_eq!(g.shape(batch.tokens).unwrap(), &[2, keep_count(n, r), d]);
        }
    }
}

/// Every patch is kept with probability `keep / N`, both by the initial
/// mask and after a chain of drops.
#[test]
fn keep_frequencies_are_uniform() {
    let (n, trials) = (16usize, 20_000u64);
    let mut first = vec![0u32; n];
    let mut last = vec![0u32; n];
    for t in 0..trials {
        let mut rng = SplitMix64::new(t.wrapping_mul(0x9e37_79b9));
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, n, 1]));
        let mut batch = random_mask(&mut g, x, 0.5, &mut rng).unwrap();
        for &k in &batch.masks[0].kept_ids {
            first[k] += 1;
        }
        batch = incremental_drop(&mut g, batch, 0.75, &mut rng).unwrap();
        for &k in &batch.masks[0].kept_ids {
            last[k] += 1;
        }
    }
    // Binomial standard deviations: sqrt(T p (1 - p)) is about 71 and 61.
    for p in 0..n {
        let f = first[p] as f64 - trials as f64 * 0.5;
        let l = last[p] as f64 - trials as f64 * 0.25;
        assert!(f.abs() < 5.0 * 71.0, "patch {p}: {first:?}");
        assert!(l.abs() < 5.0 * 62.0, "patch {p}: {last:?}");
    }
}
