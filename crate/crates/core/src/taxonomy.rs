//! L-level class taxonomies and partial label paths.
//!
//! Levels are numbered from 0 (coarsest) to `L - 1` (finest). Class indices
//! are dense and 0-based within each level. A taxonomy is a forest: level 0
//! may hold several roots, and every class below level 0 has exactly one
//! parent on the level directly above it.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_input, Error, Result};

/// An immutable L-level tree of classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    level_sizes: Vec<usize>,
    /// `parents[k][c]` is the level-`k` parent of class `c` at level `k + 1`.
    parents: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    names: Option<Vec<Vec<String>>>,
}

/// A single broken invariant found by [`Taxonomy::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoLevels,
    EmptyLevel { level: usize },
    ParentMapCount { expected: usize, found: usize },
    ParentMapLength { level: usize, expected: usize, found: usize },
    ParentOutOfRange { level: usize, class: usize, parent: usize },
    ChildlessInternal { level: usize, class: usize },
    NamesShape { level: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoLevels => write!(f, "taxonomy has no levels"),
            Violation::EmptyLevel { level } => write!(f, "level {level} has no classes"),
            Violation::ParentMapCount { expected, found } => {
                write!(f, "expected {expected} parent maps, found {found}")
            }
            Violation::ParentMapLength {
                level,
                expected,
                found,
            } => write!(
                f,
                "parent map for level {level} has {found} entries, expected {expected}"
            ),
            Violation::ParentOutOfRange {
                level,
                class,
                parent,
            } => write!(
                f,
                "parent out of range: class {class} at level {level} points to {parent}"
            ),
            Violation::ChildlessInternal { level, class } => {
                write!(f, "childless internal node: class {class} at level {level}")
            }
            Violation::NamesShape { level } => {
                write!(f, "names for level {level} do not match the level size")
            }
        }
    }
}

impl Taxonomy {
    /// Build and validate. Any violation becomes an input error.
    pub fn new(level_sizes: Vec<usize>, parents: Vec<Vec<usize>>) -> Result<Self> {
        let t = Self::from_parts(level_sizes, parents, None);
        t.ensure_valid()?;
        Ok(t)
    }

    /// Build without validation; use [`Taxonomy::validate`] to inspect it.
    pub fn from_parts(
        level_sizes: Vec<usize>,
        parents: Vec<Vec<usize>>,
        names: Option<Vec<Vec<String>>>,
    ) -> Self {
        Self {
            level_sizes,
            parents,
            names,
        }
    }

    pub fn with_names(mut self, names: Vec<Vec<String>>) -> Result<Self> {
        self.names = Some(names);
        self.ensure_valid()?;
        Ok(self)
    }

    /// Each class at level `l` gets parent `c * |level l-1| / |level l|`.
    ///
    /// Requires non-decreasing level sizes so every internal node keeps a child.
    pub fn balanced(level_sizes: &[usize]) -> Result<Self> {
        ensure_input!(!level_sizes.is_empty(), "taxonomy needs at least one level");
        let parents = level_sizes
            .windows(2)
            .map(|w| (0..w[1]).map(|c| c * w[0] / w[1]).collect())
            .collect();
        Self::new(level_sizes.to_vec(), parents)
    }

    /// Random tree: every parent receives at least one child, the remaining
    /// children are attached uniformly at random.
    pub fn random<R: Rng + ?Sized>(level_sizes: &[usize], rng: &mut R) -> Result<Self> {
        ensure_input!(!level_sizes.is_empty(), "taxonomy needs at least one level");
        let mut parents = Vec::with_capacity(level_sizes.len().saturating_sub(1));
        for w in level_sizes.windows(2) {
            let (up, down) = (w[0], w[1]);
            ensure_input!(
                down >= up && up > 0,
                "level sizes must be positive and non-decreasing, got {up} then {down}"
            );
            let mut map: Vec<usize> = (0..down)
                .map(|c| if c < up { c } else { rng.random_range(0..up) })
                .collect();
            crate::rng::shuffle(rng, &mut map);
            parents.push(map);
        }
        Self::new(level_sizes.to_vec(), parents)
    }

    pub fn num_levels(&self) -> usize {
        self.level_sizes.len()
    }

    pub fn level_sizes(&self) -> &[usize] {
        &self.level_sizes
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.level_sizes[level]
    }

    pub fn finest_level(&self) -> usize {
        self.level_sizes.len() - 1
    }

    pub fn num_leaves(&self) -> usize {
        *self.level_sizes.last().unwrap_or(&0)
    }

    /// Parent maps, one per level below the root level.
    pub fn parent_maps(&self) -> &[Vec<usize>] {
        &self.parents
    }

    pub fn names(&self) -> Option<&[Vec<String>]> {
        self.names.as_deref()
    }

    /// Every invariant violation, in level order. Empty means valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let levels = self.level_sizes.len();
        if levels == 0 {
            out.push(Violation::NoLevels);
            return out;
        }
        for (level, &size) in self.level_sizes.iter().enumerate() {
            if size == 0 {
                out.push(Violation::EmptyLevel { level });
            }
        }
        if self.parents.len() != levels - 1 {
            out.push(Violation::ParentMapCount {
                expected: levels - 1,
                found: self.parents.len(),
            });
            return out;
        }
        let mut has_child: Vec<Vec<bool>> = self.level_sizes[..levels - 1]
            .iter()
            .map(|&n| vec![false; n])
            .collect();
        for (k, map) in self.parents.iter().enumerate() {
            let level = k + 1;
            if map.len() != self.level_sizes[level] {
                out.push(Violation::ParentMapLength {
                    level,
                    expected: self.level_sizes[level],
                    found: map.len(),
                });
            }
            for (class, &parent) in map.iter().enumerate() {
                if parent >= self.level_sizes[k] {
                    out.push(Violation::ParentOutOfRange {
                        level,
                        class,
                        parent,
                    });
                } else {
                    has_child[k][parent] = true;
                }
            }
        }
        for (level, flags) in has_child.iter().enumerate() {
            for (class, &ok) in flags.iter().enumerate() {
                if !ok {
                    out.push(Violation::ChildlessInternal { level, class });
                }
            }
        }
        if let Some(names) = &self.names {
            for level in 0..levels {
                if names.get(level).map(|n| n.len()) != Some(self.level_sizes[level]) {
                    out.push(Violation::NamesShape { level });
                }
            }
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let report = self.validate();
        if report.is_empty() {
            Ok(())
        } else {
            let msgs: Vec<String> = report.iter().map(|v| v.to_string()).collect();
            Err(Error::input(format!("invalid taxonomy: {}", msgs.join("; "))))
        }
    }

    fn check_class(&self, level: usize, class: usize) -> Result<()> {
        ensure_input!(
            level < self.num_levels(),
            "level {level} out of range for a {}-level taxonomy",
            self.num_levels()
        );
        ensure_input!(
            class < self.level_sizes[level],
            "class {class} out of range at level {level} (size {})",
            self.level_sizes[level]
        );
        Ok(())
    }

    /// Parent of `class` at `level` (which must be at least 1).
    pub fn parent(&self, level: usize, class: usize) -> Result<usize> {
        self.check_class(level, class)?;
        ensure_input!(level >= 1, "level 0 classes have no parent");
        let p = self.parents[level - 1][class];
        ensure_input!(
            p < self.level_sizes[level - 1],
            "parent {p} of class {class} at level {level} is out of range"
        );
        Ok(p)
    }

    /// Ancestor of `class` at `level_from`, found by walking parent links up
    /// to `level_to`. Identity when the two levels coincide.
    pub fn ancestor_at(&self, level_from: usize, class: usize, level_to: usize) -> Result<usize> {
        self.check_class(level_from, class)?;
        ensure_input!(
            level_to <= level_from,
            "target level {level_to} is finer than source level {level_from}"
        );
        let mut c = class;
        for level in (level_to + 1..=level_from).rev() {
            c = self.parent(level, c)?;
        }
        Ok(c)
    }

    /// Root-to-node path ending at `class` on `level`.
    pub fn path_to(&self, level: usize, class: usize) -> Result<Vec<usize>> {
        self.check_class(level, class)?;
        let mut path = vec![class; level + 1];
        for l in (0..level).rev() {
            path[l] = self.parent(l + 1, path[l + 1])?;
        }
        Ok(path)
    }

    /// Full root-to-leaf path of a finest-level class.
    pub fn leaf_path(&self, leaf: usize) -> Result<Vec<usize>> {
        self.path_to(self.finest_level(), leaf)
    }

    /// True iff every adjacent pair of `pred` respects the parent relation.
    pub fn is_consistent_path(&self, pred: &[usize]) -> Result<bool> {
        ensure_input!(
            pred.len() == self.num_levels(),
            "prediction has {} levels, taxonomy has {}",
            pred.len(),
            self.num_levels()
        );
        for (level, &c) in pred.iter().enumerate() {
            self.check_class(level, c)?;
        }
        for level in 1..pred.len() {
            if self.parent(level, pred[level])? != pred[level - 1] {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Classes at `level + 1` whose parent is `class`.
    pub fn children(&self, level: usize, class: usize) -> Vec<usize> {
        match self.parents.get(level) {
            Some(map) => map
                .iter()
                .enumerate()
                .filter(|(_, &p)| p == class)
                .map(|(c, _)| c)
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::input(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Taxonomy =
            serde_json::from_str(text).map_err(|e| Error::input(format!("taxonomy json: {e}")))?;
        t.ensure_valid()?;
        Ok(t)
    }
}

/// Labels of one sample, coarsest first; `None` marks a missing level.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelPath(Vec<Option<usize>>);

impl LabelPath {
    pub fn new(labels: Vec<Option<usize>>) -> Result<Self> {
        let p = LabelPath(labels);
        p.check_prefix()?;
        Ok(p)
    }

    pub fn full(labels: &[usize]) -> Self {
        LabelPath(labels.iter().copied().map(Some).collect())
    }

    pub fn num_levels(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, level: usize) -> Option<usize> {
        self.0.get(level).copied().flatten()
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.0
    }

    /// Number of labeled levels; the deepest labeled level is `depth() - 1`.
    pub fn depth(&self) -> usize {
        self.0.iter().take_while(|l| l.is_some()).count()
    }

    pub fn is_full(&self) -> bool {
        self.depth() == self.0.len()
    }

    /// Copy keeping only the first `depth` levels.
    pub fn truncated(&self, depth: usize) -> LabelPath {
        LabelPath(
            self.0
                .iter()
                .enumerate()
                .map(|(l, v)| if l < depth { *v } else { None })
                .collect(),
        )
    }

    /// All labels, failing if any level is missing.
    pub fn full_labels(&self) -> Result<Vec<usize>> {
        self.0
            .iter()
            .enumerate()
            .map(|(l, v)| v.ok_or_else(|| Error::input(format!("label missing at level {l}"))))
            .collect()
    }

    fn check_prefix(&self) -> Result<()> {
        ensure_input!(!self.0.is_empty(), "label path is empty");
        ensure_input!(self.0[0].is_some(), "coarsest label is missing");
        let depth = self.depth();
        ensure_input!(
            self.0[depth..].iter().all(Option::is_none),
            "label path {:?} breaks the prefix property",
            self.0
        );
        Ok(())
    }

    /// Prefix property, range checks, and parent consistency against `t`.
    pub fn validate(&self, t: &Taxonomy) -> Result<()> {
        ensure_input!(
            self.0.len() == t.num_levels(),
            "label path has {} levels, taxonomy has {}",
            self.0.len(),
            t.num_levels()
        );
        self.check_prefix()?;
        let depth = self.depth();
        for level in 0..depth {
            let c = self.0[level].unwrap_or_default();
            t.check_class(level, c)?;
            if level > 0 {
                let up = self.0[level - 1].unwrap_or_default();
                ensure_input!(
                    t.parent(level, c)? == up,
                    "label {c} at level {level} is not a child of {up}"
                );
            }
        }
        Ok(())
    }
}
