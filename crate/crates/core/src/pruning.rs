//! Turning fully labeled datasets into free-grain ones.
//!
//! Two protocols are provided. [`semantic_prune`] keeps labels according to
//! per-sample correctness of an external zero-shot classifier at the fine and
//! subordinate levels, then removes extra subordinate labels in proportion
//! to each fine class's removal rate. [`random_prune`] keeps an exact number
//! of labels per level given as `a-b-c` retention percentages.
//!
//! Pruning only ever shortens a sample's label path. Features, ids, text
//! embeddings, and the surviving label values are never touched.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_input, Error, Result};
use crate::rng::{shuffle, stage_rng};
use crate::synthgen::Dataset;

/// Zero-shot correctness of one sample at the fine and subordinate levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectnessFlag {
    pub id: u64,
    pub fine_correct: bool,
    pub sub_correct: bool,
}

/// Per-level retention percentages, coarsest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    percentages: Vec<f64>,
}

impl PruneSpec {
    pub fn new(percentages: Vec<f64>) -> Result<Self> {
        ensure_input!(!percentages.is_empty(), "prune spec needs at least one level");
        ensure_input!(
            percentages.iter().all(|p| p.is_finite() && (0.0..=100.0).contains(p)),
            "retention percentages must lie in [0, 100]"
        );
        ensure_input!(
            percentages[0] == 100.0,
            "coarsest level must be fully retained (got {})",
            percentages[0]
        );
        for (l, w) in percentages.windows(2).enumerate() {
            ensure_input!(
                w[1] <= w[0],
                "retention increases from level {l} ({}) to level {} ({})",
                w[0],
                l + 1,
                w[1]
            );
        }
        Ok(Self { percentages })
    }

    pub fn percentages(&self) -> &[f64] {
        &self.percentages
    }

    pub fn num_levels(&self) -> usize {
        self.percentages.len()
    }

    /// `floor(pct * n / 100)`: samples that keep at least `level + 1` levels.
    pub fn keep_count(&self, level: usize, n: usize) -> usize {
        // The epsilon absorbs binary rounding of decimal percentages.
        (self.percentages[level] * n as f64 / 100.0 + 1e-9).floor() as usize
    }
}

impl FromStr for PruneSpec {
    type Err = Error;

    /// Parses `"100-50-10"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts = s
            .split('-')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::input(format!("bad percentage {p:?} in spec {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        PruneSpec::new(parts)
    }
}

impl std::fmt::Display for PruneSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.percentages.iter().map(|p| p.to_string()).collect();
        f.write_str(&parts.join("-"))
    }
}

/// How [`random_prune`] distributes the kept labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratify {
    /// Each finest class receives its proportional share.
    #[default]
    On,
    /// One global shuffle.
    Off,
}

/// Number of samples whose deepest labeled level is `l`, indexed by `l`.
pub fn granularity_histogram(d: &Dataset) -> Vec<usize> {
    let mut hist = vec![0; d.num_levels()];
    for s in &d.samples {
        let depth = s.label.depth();
        if depth > 0 {
            hist[depth - 1] += 1;
        }
    }
    hist
}

/// Derive correctness flags from zero-shot scores by comparing argmax with
/// the sample's own labels at the finest and subordinate levels.
pub fn flags_from_scores(d: &Dataset, scores: &[ScoreRecord]) -> Result<Vec<CorrectnessFlag>> {
    ensure_input!(d.num_levels() == 3, "score-derived flags need a 3-level taxonomy");
    let by_id: BTreeMap<u64, &ScoreRecord> = scores.iter().map(|r| (r.id, r)).collect();
    d.samples
        .iter()
        .map(|s| {
            let r = by_id
                .get(&s.id)
                .ok_or_else(|| Error::input(format!("no scores for sample {}", s.id)))?;
            let fine = s.label.get(2).ok_or_else(|| Error::input("flags need full labels"))?;
            let sub = s.label.get(1).ok_or_else(|| Error::input("flags need full labels"))?;
            Ok(CorrectnessFlag {
                id: s.id,
                fine_correct: argmax(&r.fine_scores) == Some(fine),
                sub_correct: argmax(&r.sub_scores) == Some(sub),
            })
        })
        .collect()
}

/// Zero-shot scores for one sample at the fine and subordinate levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: u64,
    pub fine_scores: Vec<f64>,
    pub sub_scores: Vec<f64>,
}

fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i)
}

/// Correctness-driven pruning of a 3-level dataset.
///
/// Rule depths: both correct keeps three levels, only subordinate correct
/// keeps two, anything else keeps the basic level. Then, per finest class,
/// with `r` the fraction of the class that lost its fine label in this pass,
/// `floor(r * m)` of the class's `m` remaining two-level samples also lose
/// the subordinate label, taken in seeded order. Samples that already lack a
/// fine label form their own groups and are never pruned further by the
/// proportional step, so re-applying with all-true flags is a no-op.
pub fn semantic_prune(d: &Dataset, flags: &[CorrectnessFlag], seed: u64) -> Result<Dataset> {
    if d.num_levels() != 3 {
        return Err(Error::UnsupportedShape(format!(
            "semantic pruning needs 3 levels, dataset has {}",
            d.num_levels()
        )));
    }
    ensure_input!(
        flags.len() == d.len(),
        "{} flags for {} samples",
        flags.len(),
        d.len()
    );
    let mut by_id = BTreeMap::new();
    for f in flags {
        ensure_input!(by_id.insert(f.id, *f).is_none(), "duplicate flag for id {}", f.id);
    }
    let mut out = d.clone();
    // Group key: deepest labeled (level, class); a full path groups by fine class.
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    let mut removed_fine: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (i, s) in out.samples.iter_mut().enumerate() {
        let f = by_id
            .get(&s.id)
            .ok_or_else(|| Error::input(format!("no correctness flag for sample {}", s.id)))?;
        let depth = s.label.depth();
        let key = (depth - 1, s.label.get(depth - 1).unwrap_or_default());
        let rule_depth = match (f.fine_correct, f.sub_correct) {
            (true, true) => 3,
            (_, true) => 2,
            _ => 1,
        };
        let new_depth = depth.min(rule_depth);
        if depth == 3 && new_depth < 3 {
            *removed_fine.entry(key).or_default() += 1;
        }
        s.label = s.label.truncated(new_depth);
        groups.entry(key).or_default().push(i);
    }
    let mut rng = stage_rng(seed, "prune/semantic");
    for (key, members) in &groups {
        let removed = removed_fine.get(key).copied().unwrap_or(0);
        let mut two_level: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&i| out.samples[i].label.depth() == 2)
            .collect();
        let extra = removed * two_level.len() / members.len();
        shuffle(&mut rng, &mut two_level);
        for &i in &two_level[..extra] {
            out.samples[i].label = out.samples[i].label.truncated(1);
        }
    }
    Ok(out)
}

/// Exact-count random pruning with `a-b-c` retention.
///
/// Exactly `floor(p_L * n)` samples keep all levels and exactly
/// `floor(p_l * n) - floor(p_{l+1} * n)` stop at level `l`. With
/// [`Stratify::On`] each finest class gets its proportional share of every
/// level's count (floors first, remainders one by one in a seeded class order,
/// never exceeding the class's share at the coarser level).
pub fn random_prune(d: &Dataset, spec: &PruneSpec, seed: u64, stratify: Stratify) -> Result<Dataset> {
    let levels = d.num_levels();
    ensure_input!(
        spec.num_levels() == levels,
        "spec has {} levels, dataset has {levels}",
        spec.num_levels()
    );
    for s in &d.samples {
        ensure_input!(s.label.is_full(), "random pruning needs full labels (sample {})", s.id);
    }
    let n = d.len();
    let targets: Vec<usize> = (0..levels).map(|l| spec.keep_count(l, n)).collect();
    let mut rng = stage_rng(seed, "prune/random");
    let mut depth_of = vec![1usize; n];

    match stratify {
        Stratify::Off => {
            let mut order: Vec<usize> = (0..n).collect();
            shuffle(&mut rng, &mut order);
            assign_depths(&order, &targets, &mut depth_of);
        }
        Stratify::On => {
            let finest = d.taxonomy.finest_level();
            let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, s) in d.samples.iter().enumerate() {
                classes
                    .entry(s.label.get(finest).unwrap_or_default())
                    .or_default()
                    .push(i);
            }
            let members: Vec<Vec<usize>> = classes.into_values().collect();
            let mut class_order: Vec<usize> = (0..members.len()).collect();
            shuffle(&mut rng, &mut class_order);
            // alloc[l][c]: samples of class c keeping at least l + 1 levels.
            let mut alloc: Vec<Vec<usize>> = vec![members.iter().map(Vec::len).collect()];
            for &target in &targets[1..] {
                let prev = alloc.last().cloned().unwrap_or_default();
                let mut cur: Vec<usize> = members
                    .iter()
                    .zip(&prev)
                    .map(|(m, &cap)| (target * m.len() / n).min(cap))
                    .collect();
                let mut remaining = target - cur.iter().sum::<usize>();
                while remaining > 0 {
                    let before = remaining;
                    for &c in &class_order {
                        if remaining == 0 {
                            break;
                        }
                        if cur[c] < prev[c] {
                            cur[c] += 1;
                            remaining -= 1;
                        }
                    }
                    debug_assert!(remaining < before, "coarser allocation must have room");
                    if remaining == before {
                        break;
                    }
                }
                alloc.push(cur);
            }
            for (c, idx) in members.iter().enumerate() {
                let mut order = idx.clone();
                shuffle(&mut rng, &mut order);
                let class_targets: Vec<usize> = alloc.iter().map(|a| a[c]).collect();
                assign_depths(&order, &class_targets, &mut depth_of);
            }
        }
    }

    let mut out = d.clone();
    for (s, &depth) in out.samples.iter_mut().zip(&depth_of) {
        s.label = s.label.truncated(depth);
    }
    Ok(out)
}

/// The first `targets[l]` entries of `order` keep at least `l + 1` levels.
fn assign_depths(order: &[usize], targets: &[usize], depth_of: &mut [usize]) {
    for (rank, &i) in order.iter().enumerate() {
        depth_of[i] = targets.iter().take_while(|&&t| rank < t).count().max(1);
    }
}
