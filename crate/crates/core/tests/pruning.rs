//! Exact pruning counts and the things pruning must leave untouched.

use freegrain::pruning::{
    granularity_histogram, random_prune, semantic_prune, CorrectnessFlag, PruneSpec, Stratify,
};
use freegrain::synthgen::{generate, Dataset, GenParams};
use freegrain::taxonomy::Taxonomy;
use proptest::prelude::*;

fn dataset(sizes: &[usize], per_leaf: usize, seed: u64) -> Dataset {
    let t = Taxonomy::balanced(sizes).unwrap();
    generate(
        &t,
        &GenParams {
            per_leaf,
            feature_dim: 3,
            seed,
            ..GenParams::default()
        },
    )
    .unwrap()
}

fn assert_only_depth_changed(out: &Dataset, d: &Dataset) {
    assert_eq!(out.len(), d.len());
    for (a, b) in out.samples.iter().zip(&d.samples) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.features, b.features);
        assert_eq!(a.text, b.text);
        for l in 0..a.label.depth() {
            assert_eq!(a.label.get(l), b.label.get(l));
        }
        assert!(a.label.depth() >= 1);
    }
}

#[test]
fn scheme_100_50_10_on_one_hundred_samples() {
    for stratify in [Stratify::On, Stratify::Off] {
        for seed in 0..10 {
            let d = dataset(&[2, 5, 10], 10, seed);
            let out = random_prune(&d, &"100-50-10".parse().unwrap(), seed, stratify).unwrap();
            assert_eq!(granularity_histogram(&out), vec![50, 40, 10]);
            assert_only_depth_changed(&out, &d);
        }
    }
}

#[test]
fn stratified_shares_on_four_leaves() {
    let d = dataset(&[1, 2, 4], 50, 0);
    let out = random_prune(&d, &"100-60-30".parse().unwrap(), 3, Stratify::On).unwrap();
    assert_eq!(granularity_histogram(&out), vec![80, 60, 60]);
}

#[test]
fn semantic_trace_counts() {
    let d = dataset(&[1, 1, 1], 10, 0);
    let flags: Vec<CorrectnessFlag> = d
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| CorrectnessFlag {
            id: s.id,
            fine_correct: i < 4,
            sub_correct: i < 7,
        })
        .collect();
    let out = semantic_prune(&d, &flags, 11).unwrap();
    assert_eq!(granularity_histogram(&out), vec![4, 2, 4]);
    assert_only_depth_changed(&out, &d);
}

proptest! {
    #[test]
    fn random_counts_follow_floor_formula(
        per_leaf in 1usize..12,
        a in 0u32..=100,
        b in 0u32..=100,
        seed in any::<u64>(),
        stratify_on in any::<bool>(),
    ) {
        let (mid, fine) = (a.max(b) as f64, a.min(b) as f64);
        let spec = PruneSpec::new(vec![100.0, mid, fine]).unwrap();
        let d = dataset(&[2, 4, 8], per_leaf, seed);
        let n = d.len();
        let stratify = if stratify_on { Stratify::On } else { Stratify::Off };
        let out = random_prune(&d, &spec, seed, stratify).unwrap();
        let keep3 = (fine / 100.0 * n as f64).floor() as usize;
        let keep2 = (mid / 100.0 * n as f64).floor() as usize;
        prop_assert_eq!(granularity_histogram(&out), vec![n - keep2, keep2 - keep3, keep3]);
        assert_only_depth_changed(&out, &d);
    }

    #[test]
    fn semantic_prune_is_idempotent_under_all_true(seed in any::<u64>(), bits in prop::collection::vec(0u8..4, 16)) {
        let d = dataset(&[2, 2, 4], 4, seed);
        let flags: Vec<CorrectnessFlag> = d
            .samples
            .iter()
            .zip(&bits)
            .map(|(s, &b)| CorrectnessFlag { id: s.id, fine_correct: b & 1 == 1, sub_correct: b & 2 == 2 })
            .collect();
        let out = semantic_prune(&d, &flags, seed).unwrap();
        assert_only_depth_changed(&out, &d);
        let all_true: Vec<CorrectnessFlag> = out
            .samples
            .iter()
            .map(|s| CorrectnessFlag { id: s.id, fine_correct: true, sub_correct: true })
            .collect();
        prop_assert_eq!(semantic_prune(&out, &all_true, seed ^ 1).unwrap(), out);
    }
}
