//! Training objectives.
//!
//! * [`hier_loss`]: per-level cross-entropy counted only where a label exists.
//! * [`text_loss`]: image-to-text InfoNCE between projected features and text
//!   embeddings under cosine similarity and temperature `tau`.
//! * [`build_affinity`]: per-level pseudo-label agreement graphs and their
//!   conjunction across all levels.
//! * [`tacl_loss`]: taxonomy-aligned contrastive loss over the conjoined graph.
//! * [`pseudo_label_loss`]: confidence-thresholded weak-to-strong pseudo-labeling
//!   on the levels a sample has no label for.
//!
//! Every function records onto a [`Graph`], so gradients come from
//! [`Graph::backward`].

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{ensure_input, Result};
use crate::taxonomy::LabelPath;

/// Masked hierarchical cross-entropy: sum over levels of the mean CE of the
/// samples labeled at that level. Unlabeled levels contribute exactly 0.
#[derive(Debug, Clone)]
pub struct HierLoss {
    pub total: Var,
    pub per_level: Vec<Var>,
}

pub fn hier_loss(g: &mut Graph, logits: &[Var], labels: &[LabelPath]) -> Result<HierLoss> {
    let mut per_level = Vec::with_capacity(logits.len());
    for (level, &z) in logits.iter().enumerate() {
        let shape = g.value(z).shape().to_vec();
        ensure_input!(
            shape.len() == 2 && shape[0] == labels.len(),
            "level {level} logits of shape {shape:?} for {} labels",
            labels.len()
        );
        let classes = shape[1];
        let mut idx = Vec::with_capacity(labels.len());
        let mut mask = Vec::with_capacity(labels.len());
        for p in labels {
            ensure_input!(
                p.num_levels() == logits.len(),
                "label path has {} levels, model has {}",
                p.num_levels(),
                logits.len()
            );
            match p.get(level) {
                Some(c) => {
                    ensure_input!(c < classes, "label {c} out of range at level {level}");
                    idx.push(c);
                    mask.push(true);
                }
                None => {
                    idx.push(0);
                    mask.push(false);
                }
            }
        }
        per_level.push(masked_ce(g, z, &idx, &mask)?);
    }
    let total = sum_scalars(g, &per_level)?;
    Ok(HierLoss { total, per_level })
}

/// Mean over masked rows of `-log softmax(z)[target]`.
fn masked_ce(g: &mut Graph, z: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let lp = g.row_log_softmax(z)?;
    let picked = g.pick(lp, targets)?;
    let mean = g.masked_mean(picked, mask)?;
    g.scale(mean, -1.0)
}

fn sum_scalars(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = match terms.first() {
        Some(&v) => v,
        None => return g.constant(Tensor::scalar(0.0)),
    };
    for &v in &terms[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

/// `-(1/N) sum_i log( exp(cos(v_i, t_i)/tau) / sum_j exp(cos(v_i, t_j)/tau) )`.
///
/// The denominator runs over every text row, including `j = i`.
pub fn text_loss(g: &mut Graph, projected: Var, text: Var, tau: f64) -> Result<Var> {
    ensure_input!(tau > 0.0 && tau.is_finite(), "temperature must be positive, got {tau}");
    let n = g.value(projected).rows();
    ensure_input!(
        g.value(projected).shape().len() == 2 && n > 0,
        "text loss needs a non-empty batch"
    );
    ensure_input!(
        g.value(text).shape() == g.value(projected).shape(),
        "image and text batches differ: {:?} vs {:?}",
        g.value(projected).shape(),
        g.value(text).shape()
    );
    let sim = g.cosine_similarity_matrix(projected, text)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    let lp = g.row_log_softmax(logits)?;
    let diag: Vec<usize> = (0..n).collect();
    let matched = g.pick(lp, &diag)?;
    g.weighted_sum(matched, &vec![-1.0 / n as f64; n])
}

/// Pairwise pseudo-label agreement for one mini-batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AffinityGraphSet {
    n: usize,
    /// Row-major `n x n` agreement matrix per level.
    pub per_level: Vec<Vec<bool>>,
    /// Elementwise AND of all per-level matrices.
    pub conjunction: Vec<bool>,
    /// `[level][sample]` pseudo-labels the graphs were built from.
    pub pseudo_labels: Vec<Vec<Option<usize>>>,
}

impl AffinityGraphSet {
    pub fn batch_size(&self) -> usize {
        self.n
    }

    pub fn num_levels(&self) -> usize {
        self.per_level.len()
    }

    pub fn level(&self, level: usize, i: usize, j: usize) -> bool {
        self.per_level[level][i * self.n + j]
    }

    pub fn joint(&self, i: usize, j: usize) -> bool {
        self.conjunction[i * self.n + j]
    }
}

/// `W^l[i][j]` is set iff samples `i` and `j` both have a level-`l` pseudo-label
/// and the labels agree; `W` is the AND over levels.
pub fn build_affinity(pseudo_labels: &[Vec<Option<usize>>]) -> Result<AffinityGraphSet> {
    let n = pseudo_labels.first().map(Vec::len).unwrap_or(0);
    ensure_input!(
        pseudo_labels.iter().all(|l| l.len() == n),
        "all levels need the same batch size"
    );
    let per_level: Vec<Vec<bool>> = pseudo_labels
        .iter()
        .map(|labels| {
            let mut w = vec![false; n * n];
            for (i, a) in labels.iter().enumerate() {
                for (j, b) in labels.iter().enumerate() {
                    w[i * n + j] = matches!((a, b), (Some(x), Some(y)) if x == y);
                }
            }
            w
        })
        .collect();
    let conjunction = (0..n * n)
        .map(|k| !per_level.is_empty() && per_level.iter().all(|w| w[k]))
        .collect();
    Ok(AffinityGraphSet {
        n,
        per_level,
        conjunction,
        pseudo_labels: pseudo_labels.to_vec(),
    })
}

/// Which form of the taxonomy-aligned contrastive loss to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaclForm {
    /// For anchor `i` with positives `P(i)` and negatives `N(i)` (self excluded):
    /// `-(L / |P(i)|) * [ log sum_{P(i)} e^{s/t} - log sum_{N(i)} e^{s/t} ]`.
    #[default]
    Printed,
    /// Supervised-contrastive form: `-(1/|P(i)|) sum_{p in P(i)} log( e^{s_ip/t} / sum_{k != i} e^{s_ik/t} )`.
    Supcon,
}

#[derive(Debug, Clone)]
pub struct TaclLoss {
    pub loss: Var,
    /// Contribution of each anchor before averaging; 0 for skipped anchors.
    pub per_anchor: Vec<f64>,
    pub valid_anchors: usize,
}

/// Taxonomy-aligned contrastive loss on unit-norm projections.
///
/// Similarities are plain dot products divided by `t`. The batch loss is the
/// mean over anchors that have at least one positive (and, for the printed
/// form, at least one negative); other anchors contribute 0.
pub fn tacl_loss(
    g: &mut Graph,
    projected: Var,
    graphs: &AffinityGraphSet,
    t: f64,
    form: TaclForm,
) -> Result<TaclLoss> {
    ensure_input!(t > 0.0 && t.is_finite(), "temperature must be positive, got {t}");
    let n = graphs.batch_size();
    ensure_input!(
        g.value(projected).rows() == n && g.value(projected).shape().len() == 2,
        "projections of shape {:?} for a batch of {n}",
        g.value(projected).shape()
    );
    let levels = graphs.num_levels() as f64;
    let pt = g.transpose(projected)?;
    let dots = g.matmul(projected, pt)?;
    let s = g.scale(dots, 1.0 / t)?;

    let mut pos = vec![false; n * n];
    let mut neg = vec![false; n * n];
    let mut others = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let k = i * n + j;
                pos[k] = graphs.joint(i, j);
                neg[k] = !pos[k];
                others[k] = true;
            }
        }
    }
    let count = |m: &[bool], i: usize| m[i * n..(i + 1) * n].iter().filter(|&&x| x).count();
    let valid: Vec<bool> = (0..n)
        .map(|i| {
            count(&pos, i) > 0
                && match form {
                    TaclForm::Printed => count(&neg, i) > 0,
                    TaclForm::Supcon => true,
                }
        })
        .collect();
    let n_valid = valid.iter().filter(|&&v| v).count();
    let denom = n_valid.max(1) as f64;

    let (loss, per_anchor) = match form {
        TaclForm::Printed => {
            let lse_pos = g.masked_logsumexp_rows(s, &pos)?;
            let lse_neg = g.masked_logsumexp_rows(s, &neg)?;
            let diff = g.sub(lse_pos, lse_neg)?;
            let coef: Vec<f64> = (0..n)
                .map(|i| {
                    if valid[i] {
                        -levels / count(&pos, i) as f64
                    } else {
                        0.0
                    }
                })
                .collect();
            let per_anchor: Vec<f64> = g
                .value(diff)
                .data()
                .iter()
                .zip(&coef)
                .map(|(d, c)| c * d)
                .collect();
            let weights: Vec<f64> = coef.iter().map(|c| c / denom).collect();
            (g.weighted_sum(diff, &weights)?, per_anchor)
        }
        TaclForm::Supcon => {
            let lse_all = g.masked_logsumexp_rows(s, &others)?;
            let mut pair_w = vec![0.0; n * n];
            for i in (0..n).filter(|&i| valid[i]) {
                let p = count(&pos, i) as f64;
                for j in 0..n {
                    if pos[i * n + j] {
                        pair_w[i * n + j] = -1.0 / p;
                    }
                }
            }
            let sv = g.value(s).data().to_vec();
            let lse = g.value(lse_all).data().to_vec();
            let per_anchor: Vec<f64> = (0..n)
                .map(|i| {
                    if !valid[i] {
                        return 0.0;
                    }
                    let attract: f64 = (0..n).map(|j| pair_w[i * n + j] * sv[i * n + j]).sum();
                    attract + lse[i]
                })
                .collect();
            let pair_w: Vec<f64> = pair_w.iter().map(|w| w / denom).collect();
            let anchor_w: Vec<f64> = valid.iter().map(|&v| if v { 1.0 / denom } else { 0.0 }).collect();
            let attract = g.weighted_sum(s, &pair_w)?;
            let repel = g.weighted_sum(lse_all, &anchor_w)?;
            (g.add(attract, repel)?, per_anchor)
        }
    };
    Ok(TaclLoss {
        loss,
        per_anchor,
        valid_anchors: n_valid,
    })
}

#[derive(Debug, Clone)]
pub struct PseudoLabelOutput {
    pub loss: Var,
    pub per_level: Vec<Var>,
    /// `[level][sample]`: true labels where present, accepted pseudo-labels
    /// elsewhere, `None` for rejected entries.
    pub pseudo_labels: Vec<Vec<Option<usize>>>,
    /// Accepted pseudo-labels per level (true labels not counted).
    pub accepted: Vec<usize>,
    /// Weak-view max-softmax confidence of every unlabeled entry, per level.
    pub confidences: Vec<Vec<f64>>,
}

/// Weak-to-strong pseudo-labeling on missing levels.
///
/// For each (sample, level) without a label, the weak-view softmax gives a
/// confidence and a class; the entry is accepted when the confidence reaches
/// the level threshold, and a threshold of 1 or more accepts nothing. Accepted
/// entries contribute cross-entropy of the strong-view logits against the
/// weak-view class, averaged per level and summed over levels. Weak logits
/// are plain values, so no gradient flows through them.
pub fn pseudo_label_loss(
    g: &mut Graph,
    weak_logits: &[Tensor],
    strong_logits: &[Var],
    thresholds: &[f64],
    labels: &[LabelPath],
) -> Result<PseudoLabelOutput> {
    let levels = strong_logits.len();
    ensure_input!(
        weak_logits.len() == levels && thresholds.len() == levels,
        "need weak logits and a threshold for each of {levels} levels"
    );
    ensure_input!(
        thresholds.iter().all(|t| (0.0..=1.0).contains(t)),
        "thresholds must lie in [0, 1], got {thresholds:?}"
    );
    let mut per_level = Vec::with_capacity(levels);
    let mut pseudo_labels = Vec::with_capacity(levels);
    let mut accepted = Vec::with_capacity(levels);
    let mut confidences = Vec::with_capacity(levels);
    for level in 0..levels {
        let weak = &weak_logits[level];
        let strong_shape = g.value(strong_logits[level]).shape().to_vec();
        ensure_input!(
            weak.shape() == strong_shape.as_slice() && weak.rows() == labels.len(),
            "weak logits {:?} and strong logits {strong_shape:?} disagree at level {level}",
            weak.shape()
        );
        let thr = thresholds[level];
        let mut targets = Vec::with_capacity(labels.len());
        let mut mask = Vec::with_capacity(labels.len());
        let mut plabels = Vec::with_capacity(labels.len());
        let mut confs = Vec::new();
        let mut n_acc = 0;
        for (i, path) in labels.iter().enumerate() {
            if let Some(c) = path.get(level) {
                plabels.push(Some(c));
                targets.push(0);
                mask.push(false);
                continue;
            }
            let (cls, conf) = softmax_max(weak.row(i));
            confs.push(conf);
            if thr < 1.0 && conf >= thr {
                plabels.push(Some(cls));
                targets.push(cls);
                mask.push(true);
                n_acc += 1;
            } else {
                plabels.push(None);
                targets.push(0);
                mask.push(false);
            }
        }
        per_level.push(masked_ce(g, strong_logits[level], &targets, &mask)?);
        pseudo_labels.push(plabels);
        accepted.push(n_acc);
        confidences.push(confs);
    }
    let loss = sum_scalars(g, &per_level)?;
    Ok(PseudoLabelOutput {
        loss,
        per_level,
        pseudo_labels,
        accepted,
        confidences,
    })
}

/// Argmax class and its softmax probability; ties go to the lower index.
pub fn softmax_max(row: &[f64]) -> (usize, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
    let cls = row.iter().position(|&x| x == max).unwrap_or(0);
    (cls, 1.0 / z)
}

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda_pl: f64,
    pub lambda_tacl: f64,
}

/// Values of each objective term and their weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub hier: f64,
    pub text: f64,
    pub tacl: f64,
    pub pl: f64,
    pub total: f64,
    pub alpha: f64,
    pub lambda_pl: f64,
    pub lambda_tacl: f64,
    pub hier_per_level: Vec<f64>,
}

impl LossBreakdown {
    /// `hier + alpha * text + lambda_pl * pl + lambda_tacl * tacl`, evaluated
    /// in the same order as the recorded total.
    pub fn recomputed_total(&self) -> f64 {
        self.hier + self.alpha * self.text + self.lambda_pl * self.pl + self.lambda_tacl * self.tacl
    }
}

/// Terms of one step's objective; absent terms count as 0.
#[derive(Debug, Clone)]
pub struct ObjectiveTerms {
    pub hier: HierLoss,
    pub text: Option<Var>,
    pub pl: Option<Var>,
    pub tacl: Option<Var>,
}

/// Record the weighted total and return it with its breakdown.
pub fn combine(g: &mut Graph, terms: &ObjectiveTerms, w: LossWeights) -> Result<(Var, LossBreakdown)> {
    let scalar = |v: Option<Var>, g: &mut Graph| -> Result<Var> {
        match v {
            Some(v) => Ok(v),
            None => g.constant(Tensor::scalar(0.0)),
        }
    };
    let text = scalar(terms.text, g)?;
    let pl = scalar(terms.pl, g)?;
    let tacl = scalar(terms.tacl, g)?;
    let wt = g.scale(text, w.alpha)?;
    let total = g.add(terms.hier.total, wt)?;
    let wp = g.scale(pl, w.lambda_pl)?;
    let total = g.add(total, wp)?;
    let wc = g.scale(tacl, w.lambda_tacl)?;
    let total = g.add(total, wc)?;
    let breakdown = LossBreakdown {
        hier: g.value(terms.hier.total).item(),
        text: g.value(text).item(),
        tacl: g.value(tacl).item(),
        pl: g.value(pl).item(),
        total: g.value(total).item(),
        alpha: w.alpha,
        lambda_pl: w.lambda_pl,
        lambda_tacl: w.lambda_tacl,
        hier_per_level: terms.hier.per_level.iter().map(|&v| g.value(v).item()).collect(),
    };
    Ok((total, breakdown))
}
