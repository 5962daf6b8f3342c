//! Loss values against scalar hand computations and brute-force oracles.

use freegrain::diffcore::{Graph, Tensor, Var};
use freegrain::losses::{
    build_affinity, combine, hier_loss, tacl_loss, text_loss, LossWeights, ObjectiveTerms, TaclForm,
};
use freegrain::rng::{gaussian, shuffle, stage_rng};
use freegrain::taxonomy::LabelPath;
use proptest::prelude::*;
use rand::Rng;

fn ce(z: &[f64], y: usize) -> f64 {
    z.iter().map(|x| x.exp()).sum::<f64>().ln() - z[y]
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| gaussian(rng)).collect()).unwrap()
}

#[test]
fn affinity_matches_triple_loop() {
    for trial in 0..100u64 {
        let mut rng = stage_rng(trial, "affinity");
        let n = rng.random_range(1..=16);
        let pseudo: Vec<Vec<Option<usize>>> = (0..3)
            .map(|_| {
                (0..n)
                    .map(|_| (rng.random::<f64>() < 0.75).then(|| rng.random_range(0..3)))
                    .collect()
            })
            .collect();
        let g = build_affinity(&pseudo).unwrap();
        for i in 0..n {
            for j in 0..n {
                let mut all = true;
                for (l, labels) in pseudo.iter().enumerate() {
                    let same = labels[i].is_some() && labels[i] == labels[j];
                    assert_eq!(g.level(l, i, j), same);
                    all = all && same;
                }
                assert_eq!(g.joint(i, j), all, "trial {trial} ({i}, {j})");
                assert_eq!(g.joint(i, j), g.joint(j, i));
            }
            let has_all = pseudo.iter().all(|l| l[i].is_some());
            assert_eq!(g.joint(i, i), has_all);
        }
    }
}

#[test]
fn mixed_granularity_batch_on_2_2_4() {
    let z0 = [[0.5, -0.5], [0.1, 0.3], [2.0, 0.0], [-1.0, 1.0]];
    let z1 = [[1.0, 0.0], [0.2, 0.9], [0.0, 0.0], [0.4, -0.4]];
    let z2 = [
        [1.0, 0.0, -1.0, 0.5],
        [0.0, 0.3, 0.1, 1.2],
        [9.0, 9.0, 9.0, 9.0],
        [0.7, 0.7, 0.0, 0.0],
    ];
    let labels = [
        LabelPath::full(&[0, 0, 0]),
        LabelPath::full(&[1, 1, 3]),
        LabelPath::new(vec![Some(0), None, None]).unwrap(),
        LabelPath::new(vec![Some(1), Some(1), None]).unwrap(),
    ];
    let level0 = (ce(&z0[0], 0) + ce(&z0[1], 1) + ce(&z0[2], 0) + ce(&z0[3], 1)) / 4.0;
    let level1 = (ce(&z1[0], 0) + ce(&z1[1], 1) + ce(&z1[3], 1)) / 3.0;
    let level2 = (ce(&z2[0], 0) + ce(&z2[1], 3)) / 2.0;

    let mut g = Graph::new();
    let vars: Vec<Var> = [
        Tensor::from_rows(&z0).unwrap(),
        Tensor::from_rows(&z1).unwrap(),
        Tensor::from_rows(&z2).unwrap(),
    ]
    .into_iter()
    .map(|z| g.leaf(z, true).unwrap())
    .collect();
    let h = hier_loss(&mut g, &vars, &labels).unwrap();
    let got: Vec<f64> = h.per_level.iter().map(|&v| g.value(v).item()).collect();
    for (a, b) in got.iter().zip([level0, level1, level2]) {
        assert!((a - b).abs() < 1e-14, "{a} vs {b}");
    }
    assert!((g.value(h.total).item() - (level0 + level1 + level2)).abs() < 1e-14);
}

/// Rows of the per-level logits that receive any gradient.
fn supervised_entries(labels: &[LabelPath], logits: &[Tensor]) -> usize {
    let mut g = Graph::new();
    let vars: Vec<Var> = logits.iter().map(|z| g.leaf(z.clone(), true).unwrap()).collect();
    let h = hier_loss(&mut g, &vars, labels).unwrap();
    g.backward(h.total).unwrap();
    vars.iter()
        .map(|&v| match g.grad(v) {
            None => 0,
            Some(grad) => (0..grad.rows()).filter(|&i| grad.row(i).iter().any(|&x| x != 0.0)).count(),
        })
        .sum()
}

proptest! {
    #[test]
    fn adding_a_label_never_removes_supervision(seed in any::<u64>()) {
        let mut rng = stage_rng(seed, "monotone");
        let sizes = [2, 3, 4];
        let n = rng.random_range(1..8);
        let mut labels: Vec<LabelPath> = (0..n)
            .map(|_| {
                let depth = rng.random_range(1..=3);
                LabelPath::new((0..3).map(|l| (l < depth).then(|| rng.random_range(0..sizes[l]))).collect()).unwrap()
            })
            .collect();
        let logits: Vec<Tensor> = sizes.iter().map(|&k| random_matrix(&mut rng, n, k)).collect();
        let before = supervised_entries(&labels, &logits);
        let i = rng.random_range(0..n);
        let depth = labels[i].depth();
        if depth < 3 {
            let mut l = labels[i].labels().to_vec();
            l[depth] = Some(rng.random_range(0..sizes[depth]));
            labels[i] = LabelPath::new(l).unwrap();
            prop_assert!(supervised_entries(&labels, &logits) > before);
        }
    }

    #[test]
    fn tacl_is_permutation_equivariant(seed in any::<u64>(), supcon in any::<bool>()) {
        let form = if supcon { TaclForm::Supcon } else { TaclForm::Printed };
        let mut rng = stage_rng(seed, "tacl-perm");
        let n = rng.random_range(2..12);
        let x = random_matrix(&mut rng, n, 4);
        let pseudo: Vec<Vec<Option<usize>>> = (0..3)
            .map(|_| (0..n).map(|_| (rng.random::<f64>() < 0.8).then(|| rng.random_range(0..2))).collect())
            .collect();
        let mut perm: Vec<usize> = (0..n).collect();
        shuffle(&mut rng, &mut perm);
        let run = |rows: &[usize]| {
            let data: Vec<f64> = rows.iter().flat_map(|&i| x.row(i).to_vec()).collect();
            let p: Vec<Vec<Option<usize>>> = pseudo.iter().map(|l| rows.iter().map(|&i| l[i]).collect()).collect();
            let mut g = Graph::new();
            let v = g.leaf(Tensor::matrix(n, 4, data).unwrap(), true).unwrap();
            let u = g.l2_normalize_rows(v).unwrap();
            let out = tacl_loss(&mut g, u, &build_affinity(&p).unwrap(), 0.5, form).unwrap();
            (g.value(out.loss).item(), out.per_anchor, out.valid_anchors)
        };
        let base: Vec<usize> = (0..n).collect();
        let (la, pa, va) = run(&base);
        let (lb, pb, vb) = run(&perm);
        prop_assert_eq!(va, vb);
        prop_assert!((la - lb).abs() <= 1e-12 * (1.0 + la.abs()));
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((pb[k] - pa[i]).abs() <= 1e-12 * (1.0 + pa[i].abs()));
        }
    }

    #[test]
    fn text_loss_is_invariant_to_joint_permutation(seed in any::<u64>()) {
        let mut rng = stage_rng(seed, "text-perm");
        let n = rng.random_range(1..10);
        let v = random_matrix(&mut rng, n, 5);
        let t = random_matrix(&mut rng, n, 5);
        let mut perm: Vec<usize> = (0..n).collect();
        shuffle(&mut rng, &mut perm);
        let run = |rows: &[usize]| {
            let pick = |m: &Tensor| Tensor::matrix(n, 5, rows.iter().flat_map(|&i| m.row(i).to_vec()).collect()).unwrap();
            let mut g = Graph::new();
            let a = g.leaf(pick(&v), true).unwrap();
            let b = g.constant(pick(&t)).unwrap();
            let l = text_loss(&mut g, a, b, 0.3).unwrap();
            g.value(l).item()
        };
        let base: Vec<usize> = (0..n).collect();
        let (a, b) = (run(&base), run(&perm));
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }

    #[test]
    fn breakdown_identity_is_exact(
        hier in -10.0f64..10.0,
        text in prop::option::of(-10.0f64..10.0),
        pl in prop::option::of(-10.0f64..10.0),
        tacl in prop::option::of(-10.0f64..10.0),
        alpha in 0.0f64..3.0,
        lambda_pl in 0.0f64..3.0,
        lambda_tacl in 0.0f64..3.0,
    ) {
        let mut g = Graph::new();
        let h = g.leaf(Tensor::scalar(hier), true).unwrap();
        let mut c = |x: Option<f64>| x.map(|x| g.leaf(Tensor::scalar(x), true).unwrap());
        let terms = ObjectiveTerms {
            hier: freegrain::losses::HierLoss { total: h, per_level: vec![h] },
            text: c(text),
            pl: c(pl),
            tacl: c(tacl),
        };
        let (_, b) = combine(&mut g, &terms, LossWeights { alpha, lambda_pl, lambda_tacl }).unwrap();
        prop_assert_eq!(b.total, b.recomputed_total());
        prop_assert_eq!(b.total, hier + alpha * text.unwrap_or(0.0) + lambda_pl * pl.unwrap_or(0.0) + lambda_tacl * tacl.unwrap_or(0.0));
    }
}
