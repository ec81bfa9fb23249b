mod common;

use bim_core::engine::{bim_train_step, mae_train_step, BimPlan, Model, StepContext};
use bim_core::harness::optim::{AdamW, AdamWConfig};
use bim_core::vit::ModelSpec;
use common::random_images;
use proptest::prelude::*;

const RATIOS: [f64; 6] = [0.1, 0.25, 0.5, 0.6, 0.75, 0.8];

/// A valid non-decreasing schedule for the tiny preset with 1, 2 or 4 blocks.
fn schedule() -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![Just(1usize), Just(2), Just(4)]
        .prop_flat_map(|b| proptest::collection::vec(0..RATIOS.len(), b))
        .prop_map(|mut ix| {
            ix.sort_unstable();
            ix.into_iter().map(|i| RATIOS[i]).collect()
        })
}

fn opt() -> AdamW<f64> {
    AdamW::new(AdamWConfig::default())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Isolation, monotone visible sets, and the release schedule: after
    /// block i only its boundary output stays live, and nothing after the
    /// last block.
    #[test]
    fn step_invariants(sched in schedule(), seed in any::<u64>(), batch in 1usize..4) {
        let spec = ModelSpec::tiny();
        let b = sched.len();
        let plan = BimPlan::with_schedule(&spec, sched).unwrap();
        let mut model = Model::<f64>::new(&spec, b, seed).unwrap();
        let images = random_images::<f64>(&spec, batch, seed);
        let r = bim_train_step(&mut model, &images, &plan, &mut opt(), 1e-3, StepContext { seed, step: seed % 13 }).unwrap();

        for (i, ids) in r.updated.iter().enumerate() {
            prop_assert!(!ids.is_empty());
            for &id in ids {
                prop_assert_eq!(model.store.block(id), i);
            }
        }
        prop_assert!(r.visible_tokens.windows(2).all(|w| w[1] <= w[0]));
        for i in 0..b {
            let expect = if i + 1 < b { batch * r.visible_tokens[i] * spec.embed_dim * 8 } else { 0 };
            prop_assert_eq!(r.live_after_release[i], expect);
        }
        prop_assert_eq!(*r.live_after_release.last().unwrap(), 0);
    }

    #[test]
    fn steps_are_deterministic(sched in schedule(), seed in any::<u64>()) {
        let spec = ModelSpec::tiny();
        let plan = BimPlan::with_schedule(&spec, sched.clone()).unwrap();
        let images = random_images::<f64>(&spec, 2, seed);
        let run = || {
            let mut m = Model::<f64>::new(&spec, sched.len(), seed).unwrap();
            let mut o = opt();
            let r = bim_train_step(&mut m, &images, &plan, &mut o, 1e-2, StepContext { seed, step: 1 }).unwrap();
            (m, r)
        };
        let (ma, ra) = run();
        let (mb, rb) = run();
        prop_assert_eq!(ra, rb);
        for ((_, a), (_, b)) in ma.store.iter().zip(mb.store.iter()) {
            prop_assert!(a.value.bitwise_eq(&b.value));
        }
    }

    #[test]
    fn single_block_is_the_end_to_end_step(seed in any::<u64>(), r in 0usize..RATIOS.len()) {
        let spec = ModelSpec::tiny();
        let plan = BimPlan::uniform(&spec, 1, RATIOS[r]).unwrap();
        let mut a = Model::<f64>::new(&spec, 1, seed).unwrap();
        let mut b = a.clone();
        let (mut oa, mut ob) = (opt(), opt());
        for step in 0..3 {
            let images = random_images::<f64>(&spec, 2, seed ^ step);
            let ctx = StepContext { seed, step };
            let ra = bim_train_step(&mut a, &images, &plan, &mut oa, 1e-2, ctx).unwrap();
            let rb = mae_train_step(&mut b, &images, RATIOS[r], &mut ob, 1e-2, ctx).unwrap();
            prop_assert_eq!(ra.mean_loss.to_bits(), rb.mean_loss.to_bits());
        }
        for ((_, x), (_, y)) in a.store.iter().zip(b.store.iter()) {
            prop_assert!(x.value.bitwise_eq(&y.value));
        }
    }
}
