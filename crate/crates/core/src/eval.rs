//! Hierarchical metrics and consistency-based stopping.
//!
//! * Level accuracy: per level, the fraction of samples whose predicted class
//!   equals the truth.
//! * TICE: fraction of samples whose predicted tuple breaks any parent-child
//!   link of the taxonomy.
//! * FPA: fraction of samples correct at every level.
//!
//! Stopping inference emits, per sample, the longest prefix of the predicted
//! tuple in which every label is a child of the one before it.

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{ensure_input, Result};
use crate::taxonomy::{LabelPath, Taxonomy};

/// Predicted class per sample and level, `[sample][level]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionMatrix {
    labels: Vec<Vec<usize>>,
}

impl PredictionMatrix {
    pub fn from_labels(labels: Vec<Vec<usize>>) -> Result<Self> {
        if let Some(first) = labels.first() {
            ensure_input!(!first.is_empty(), "predictions need at least one level");
            ensure_input!(
                labels.iter().all(|r| r.len() == first.len()),
                "every prediction needs the same number of levels"
            );
        }
        Ok(Self { labels })
    }

    /// Row-wise argmax of per-level logit matrices; ties go to the lower index.
    pub fn from_logits(logits: &[Tensor]) -> Result<Self> {
        ensure_input!(!logits.is_empty(), "predictions need at least one level");
        let n = logits[0].rows();
        ensure_input!(
            logits.iter().all(|z| z.shape().len() == 2 && z.rows() == n && z.cols() > 0),
            "per-level logits must be non-empty matrices with the same row count"
        );
        let labels = (0..n)
            .map(|i| logits.iter().map(|z| argmax(z.row(i))).collect())
            .collect();
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_levels(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.labels[i]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.labels
    }

    fn check(&self, t: &Taxonomy) -> Result<()> {
        for (i, row) in self.labels.iter().enumerate() {
            ensure_input!(
                row.len() == t.num_levels(),
                "prediction {i} has {} levels, taxonomy has {}",
                row.len(),
                t.num_levels()
            );
            for (level, &c) in row.iter().enumerate() {
                ensure_input!(
                    c < t.level_size(level),
                    "prediction {i} class {c} out of range at level {level}"
                );
            }
        }
        Ok(())
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub level_accuracy: Vec<f64>,
    pub fpa: f64,
    pub tice: f64,
}

pub fn evaluate(preds: &PredictionMatrix, truths: &[LabelPath], t: &Taxonomy) -> Result<EvalReport> {
    ensure_input!(
        preds.len() == truths.len(),
        "{} predictions for {} truths",
        preds.len(),
        truths.len()
    );
    ensure_input!(!truths.is_empty(), "cannot evaluate an empty set");
    preds.check(t)?;
    let levels = t.num_levels();
    let mut correct = vec![0usize; levels];
    let mut all_correct = 0usize;
    let mut inconsistent = 0usize;
    for (row, truth) in preds.rows().iter().zip(truths) {
        truth.validate(t)?;
        ensure_input!(truth.is_full(), "evaluation needs fully labeled truths");
        let mut every = true;
        for (level, &p) in row.iter().enumerate() {
            if truth.get(level) == Some(p) {
                correct[level] += 1;
            } else {
                every = false;
            }
        }
        all_correct += every as usize;
        inconsistent += !t.is_consistent_path(row)? as usize;
    }
    let n = truths.len();
    Ok(EvalReport {
        n,
        level_accuracy: correct.iter().map(|&c| c as f64 / n as f64).collect(),
        fpa: all_correct as f64 / n as f64,
        tice: inconsistent as f64 / n as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoppedPrediction {
    /// Number of levels emitted, at least 1.
    pub stop_depth: usize,
    pub labels: Vec<usize>,
}

pub fn stopping_infer(preds: &PredictionMatrix, t: &Taxonomy) -> Result<Vec<StoppedPrediction>> {
    preds.check(t)?;
    Ok(preds
        .rows()
        .iter()
        .map(|row| {
            let depth = 1 + (1..row.len())
                .take_while(|&l| t.parent(l, row[l]).ok() == Some(row[l - 1]))
                .count();
            StoppedPrediction {
                stop_depth: depth,
                labels: row[..depth].to_vec(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingReport {
    /// `histogram[d - 1]` samples stopped at depth `d`.
    pub histogram: Vec<usize>,
    /// Samples at each depth whose whole emitted prefix is correct.
    pub correct: Vec<usize>,
    /// `correct / histogram` per depth; `None` where no sample stopped.
    pub correctness: Vec<Option<f64>>,
}

pub fn stopping_report(
    stopped: &[StoppedPrediction],
    truths: &[LabelPath],
    t: &Taxonomy,
) -> Result<StoppingReport> {
    ensure_input!(
        stopped.len() == truths.len(),
        "{} stopped outputs for {} truths",
        stopped.len(),
        truths.len()
    );
    let levels = t.num_levels();
    let mut histogram = vec![0usize; levels];
    let mut correct = vec![0usize; levels];
    for (s, truth) in stopped.iter().zip(truths) {
        ensure_input!(
            (1..=levels).contains(&s.stop_depth) && s.labels.len() == s.stop_depth,
            "stopped output with depth {} and {} labels",
            s.stop_depth,
            s.labels.len()
        );
        ensure_input!(truth.is_full(), "stopping report needs fully labeled truths");
        histogram[s.stop_depth - 1] += 1;
        let ok = s.labels.iter().enumerate().all(|(l, &c)| truth.get(l) == Some(c));
        correct[s.stop_depth - 1] += ok as usize;
    }
    let correctness = histogram
        .iter()
        .zip(&correct)
        .map(|(&h, &c)| (h > 0).then(|| c as f64 / h as f64))
        .collect();
    Ok(StoppingReport {
        histogram,
        correct,
        correctness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dogs() -> Taxonomy {
        // 0 dog, 1 cat / 0 hound, 1 terrier, 2 tabby / 0 beagle, 1 bloodhound, 2 westie, 3 tabby-x
        Taxonomy::new(vec![2, 3, 4], vec![vec![0, 0, 1], vec![0, 0, 1, 2]]).unwrap()
    }

    #[test]
    fn perfect_predictions() {
        let t = toy_dogs();
        let truths = vec![LabelPath::full(&[0, 0, 1]), LabelPath::full(&[1, 2, 3])];
        let p = PredictionMatrix::from_labels(vec![vec![0, 0, 1], vec![1, 2, 3]]).unwrap();
        let r = evaluate(&p, &truths, &t).unwrap();
        assert_eq!((r.fpa, r.tice), (1.0, 0.0));
        assert_eq!(r.level_accuracy, vec![1.0; 3]);
    }

    #[test]
    fn consistent_but_wrong_leaf() {
        let t = toy_dogs();
        let truths = vec![LabelPath::full(&[0, 0, 1])];
        let p = PredictionMatrix::from_labels(vec![vec![0, 0, 0]]).unwrap();
        let r = evaluate(&p, &truths, &t).unwrap();
        assert_eq!((r.fpa, r.tice), (0.0, 0.0));
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let t = toy_dogs();
        let p = PredictionMatrix::from_labels(vec![vec![0, 0, 0]]).unwrap();
        assert!(evaluate(&p, &[], &t).is_err());
        let bad = PredictionMatrix::from_labels(vec![vec![0, 0, 9]]).unwrap();
        assert!(evaluate(&bad, &[LabelPath::full(&[0, 0, 0])], &t).is_err());
    }

    #[test]
    fn stops_at_hound() {
        let t = toy_dogs();
        let p = PredictionMatrix::from_labels(vec![vec![0, 0, 2]]).unwrap();
        let s = stopping_infer(&p, &t).unwrap();
        assert_eq!(s[0].stop_depth, 2);
        assert_eq!(s[0].labels, vec![0, 0]);
    }

    #[test]
    fn fully_consistent_reaches_bottom() {
        let t = toy_dogs();
        let p = PredictionMatrix::from_labels(vec![vec![1, 2, 3]]).unwrap();
        assert_eq!(stopping_infer(&p, &t).unwrap()[0].stop_depth, 3);
    }

    #[test]
    fn depth_one_stop_with_correct_basic() {
        let t = toy_dogs();
        let stopped = vec![StoppedPrediction {
            stop_depth: 1,
            labels: vec![1],
        }];
        let r = stopping_report(&stopped, &[LabelPath::full(&[1, 2, 3])], &t).unwrap();
        assert_eq!(r.histogram, vec![1, 0, 0]);
        assert_eq!(r.correctness, vec![Some(1.0), None, None]);
    }

    #[test]
    fn logits_argmax() {
        let z = Tensor::from_rows(&[[0.1, 0.9], [0.5, 0.5]]).unwrap();
        let p = PredictionMatrix::from_logits(&[z]).unwrap();
        assert_eq!(p.rows(), &[vec![1], vec![0]]);
    }
}
