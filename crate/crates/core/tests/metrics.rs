//! Metrics and stopping inference against per-sample loop oracles.

use freegrain::eval::{evaluate, stopping_infer, stopping_report, PredictionMatrix};
use freegrain::rng::{shuffle, stage_rng};
use freegrain::taxonomy::{LabelPath, Taxonomy};
use proptest::prelude::*;
use rand::Rng;

struct Oracle {
    acc: Vec<f64>,
    fpa: f64,
    tice: f64,
}

fn metric_oracle(t: &Taxonomy, preds: &[Vec<usize>], truths: &[Vec<usize>]) -> Oracle {
    let n = preds.len() as f64;
    let levels = t.num_levels();
    let mut acc = vec![0.0; levels];
    let (mut fpa, mut tice) = (0.0, 0.0);
    for (p, y) in preds.iter().zip(truths) {
        for l in 0..levels {
            if p[l] == y[l] {
                acc[l] += 1.0;
            }
        }
        if p == y {
            fpa += 1.0;
        }
        let mut broken = false;
        for l in 1..levels {
            if t.parent_maps()[l - 1][p[l]] != p[l - 1] {
                broken = true;
            }
        }
        if broken {
            tice += 1.0;
        }
    }
    Oracle {
        acc: acc.iter().map(|a| a / n).collect(),
        fpa: fpa / n,
        tice: tice / n,
    }
}

/// Longest prefix in which each label is a child of the previous one.
fn prefix_oracle(t: &Taxonomy, p: &[usize]) -> usize {
    let mut depth = 1;
    while depth < p.len() && t.parent_maps()[depth - 1][p[depth]] == p[depth - 1] {
        depth += 1;
    }
    depth
}

fn random_tuple(rng: &mut impl Rng, t: &Taxonomy) -> Vec<usize> {
    (0..t.num_levels()).map(|l| rng.random_range(0..t.level_size(l))).collect()
}

/// Random predictions biased towards the truth so every metric is exercised.
fn near_truth(rng: &mut impl Rng, t: &Taxonomy, truth: &[usize]) -> Vec<usize> {
    match rng.random_range(0..3) {
        0 => truth.to_vec(),
        1 => {
            let mut p = truth.to_vec();
            let l = rng.random_range(0..p.len());
            p[l] = rng.random_range(0..t.level_size(l));
            p
        }
        _ => random_tuple(rng, t),
    }
}

#[test]
fn metrics_match_oracle_on_random_trials() {
    for trial in 0..1000u64 {
        let mut rng = stage_rng(trial, "metrics");
        let t = Taxonomy::random(&[3, 6, 12], &mut rng).unwrap();
        let n = rng.random_range(1..20);
        let truths: Vec<Vec<usize>> = (0..n)
            .map(|_| t.leaf_path(rng.random_range(0..12)).unwrap())
            .collect();
        let preds: Vec<Vec<usize>> = truths.iter().map(|y| near_truth(&mut rng, &t, y)).collect();
        let paths: Vec<LabelPath> = truths.iter().map(|y| LabelPath::full(y)).collect();
        let r = evaluate(&PredictionMatrix::from_labels(preds.clone()).unwrap(), &paths, &t).unwrap();
        let o = metric_oracle(&t, &preds, &truths);
        assert_eq!(r.level_accuracy, o.acc, "trial {trial}");
        assert_eq!(r.fpa, o.fpa, "trial {trial}");
        assert_eq!(r.tice, o.tice, "trial {trial}");
        // Compared as counts: a/n <= 1 - b/n can round the wrong way when a + b = n.
        let (full, broken) = ((r.fpa * n as f64).round(), (r.tice * n as f64).round());
        assert!(full + broken <= n as f64, "trial {trial}");
        assert!(r.level_accuracy.iter().all(|&a| r.fpa <= a), "trial {trial}");
    }
}

#[test]
fn stopping_matches_longest_prefix_oracle() {
    let mut rng = stage_rng(0, "stopping");
    let t = Taxonomy::random(&[4, 12, 48], &mut rng).unwrap();
    let preds: Vec<Vec<usize>> = (0..10_000)
        .map(|i| {
            if i % 4 == 0 {
                t.leaf_path(rng.random_range(0..48)).unwrap()
            } else {
                random_tuple(&mut rng, &t)
            }
        })
        .collect();
    let stopped = stopping_infer(&PredictionMatrix::from_labels(preds.clone()).unwrap(), &t).unwrap();
    for (s, p) in stopped.iter().zip(&preds) {
        assert_eq!(s.stop_depth, prefix_oracle(&t, p));
        assert_eq!(s.labels, p[..s.stop_depth]);
        let padded: Vec<usize> = (0..s.stop_depth)
            .map(|l| t.ancestor_at(s.stop_depth - 1, s.labels[s.stop_depth - 1], l).unwrap())
            .collect();
        assert_eq!(padded, s.labels, "emitted prefix is not a taxonomy path");
    }
}

#[test]
fn stopping_exhaustive_on_2_2_4() {
    let t = Taxonomy::balanced(&[2, 2, 4]).unwrap();
    let mut count = 0;
    for a in 0..2 {
        for b in 0..2 {
            for c in 0..4 {
                let p = vec![a, b, c];
                let s = &stopping_infer(&PredictionMatrix::from_labels(vec![p.clone()]).unwrap(), &t).unwrap()[0];
                assert_eq!(s.stop_depth, prefix_oracle(&t, &p), "{p:?}");
                count += 1;
            }
        }
    }
    assert_eq!(count, 16);
}

#[test]
fn fpa_equals_full_depth_and_correct() {
    for trial in 0..200u64 {
        let mut rng = stage_rng(trial, "fpa-stop");
        let t = Taxonomy::random(&[2, 4, 8], &mut rng).unwrap();
        let truths: Vec<Vec<usize>> = (0..30)
            .map(|_| t.leaf_path(rng.random_range(0..8)).unwrap())
            .collect();
        let preds: Vec<Vec<usize>> = truths.iter().map(|y| near_truth(&mut rng, &t, y)).collect();
        let paths: Vec<LabelPath> = truths.iter().map(|y| LabelPath::full(y)).collect();
        let m = PredictionMatrix::from_labels(preds).unwrap();
        let r = evaluate(&m, &paths, &t).unwrap();
        let stopped = stopping_infer(&m, &t).unwrap();
        let rep = stopping_report(&stopped, &paths, &t).unwrap();
        assert_eq!(rep.histogram.iter().sum::<usize>(), 30);
        assert_eq!(r.fpa, rep.correct[2] as f64 / 30.0);
    }
}

proptest! {
    #[test]
    fn metrics_are_permutation_invariant(seed in any::<u64>()) {
        let mut rng = stage_rng(seed, "perm");
        let t = Taxonomy::random(&[2, 4, 8], &mut rng).unwrap();
        let truths: Vec<Vec<usize>> = (0..25)
            .map(|_| t.leaf_path(rng.random_range(0..8)).unwrap())
            .collect();
        let preds: Vec<Vec<usize>> = truths.iter().map(|y| near_truth(&mut rng, &t, y)).collect();
        let mut order: Vec<usize> = (0..25).collect();
        shuffle(&mut rng, &mut order);
        let eval = |idx: &[usize]| {
            let p = PredictionMatrix::from_labels(idx.iter().map(|&i| preds[i].clone()).collect()).unwrap();
            let y: Vec<LabelPath> = idx.iter().map(|&i| LabelPath::full(&truths[i])).collect();
            evaluate(&p, &y, &t).unwrap()
        };
        let base: Vec<usize> = (0..25).collect();
        let a = eval(&base);
        let b = eval(&order);
        prop_assert_eq!(a.level_accuracy, b.level_accuracy);
        prop_assert_eq!(a.fpa, b.fpa);
        prop_assert_eq!(a.tice, b.tice);
    }
}
