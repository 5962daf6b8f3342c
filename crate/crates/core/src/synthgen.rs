//! Synthetic hierarchically clustered datasets.
//!
//! Class means are built top-down: level-0 means are random unit vectors and
//! every deeper class mean mixes its parent's mean with its own random unit
//! offset, `mean = hier_corr * parent_mean + (1 - hier_corr) * offset`.
//! Samples of a leaf scatter around its mean with isotropic Gaussian noise
//! whose expected Euclidean norm is `noise_scale` (per-coordinate standard
//! deviation `noise_scale / sqrt(D)`), so noise and unit-norm means share a
//! scale regardless of the feature dimension.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_input, Result};
use crate::rng::{gaussian_vec, stage_rng, unit_vector};
use crate::taxonomy::{LabelPath, Taxonomy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    #[serde(rename = "labels")]
    pub label: LabelPath,
    /// Unit-norm text embedding paired with the sample, if attached.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub taxonomy: Taxonomy,
    pub samples: Vec<Sample>,
    pub feature_dim: usize,
    pub text_dim: Option<usize>,
    pub seed: u64,
}

/// Parameters of [`generate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub per_leaf: usize,
    pub feature_dim: usize,
    pub noise_scale: f64,
    pub hier_corr: f64,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            per_leaf: 60,
            feature_dim: 64,
            noise_scale: 0.3,
            hier_corr: 0.6,
            seed: 0,
        }
    }
}

/// Default taxonomy shape for desk-scale experiments.
pub const DEFAULT_LEVEL_SIZES: [usize; 3] = [4, 12, 48];
pub const DEFAULT_TEXT_DIM: usize = 32;

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_levels(&self) -> usize {
        self.taxonomy.num_levels()
    }

    /// Dimensions, finiteness, text norms, and every label against the taxonomy.
    pub fn validate(&self) -> Result<()> {
        self.taxonomy.ensure_valid()?;
        self.samples.iter().try_for_each(|s| self.validate_sample(s))
    }

    /// Check one sample against this dataset's dimensions and taxonomy.
    pub fn validate_sample(&self, s: &Sample) -> Result<()> {
        ensure_input!(
            s.features.len() == self.feature_dim,
            "sample {} has {} features, expected {}",
            s.id,
            s.features.len(),
            self.feature_dim
        );
        ensure_input!(
            s.features.iter().all(|x| x.is_finite()),
            "sample {} has non-finite features",
            s.id
        );
        s.label.validate(&self.taxonomy)?;
        match (&s.text, self.text_dim) {
            (Some(t), Some(dim)) => {
                ensure_input!(t.len() == dim, "sample {} text has wrong width", s.id);
                let n = t.iter().map(|x| x * x).sum::<f64>().sqrt();
                ensure_input!(
                    (n - 1.0).abs() <= 1e-6,
                    "sample {} text embedding has norm {n}",
                    s.id
                );
            }
            (None, None) => {}
            _ => {
                return Err(crate::Error::Input(format!(
                    "sample {} text presence disagrees with dataset text_dim",
                    s.id
                )))
            }
        }
        Ok(())
    }

    /// Copy holding only the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            taxonomy: self.taxonomy.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            feature_dim: self.feature_dim,
            text_dim: self.text_dim,
            seed: self.seed,
        }
    }
}

/// Mean vectors for every class, indexed `[level][class]`.
pub fn class_means(t: &Taxonomy, feature_dim: usize, hier_corr: f64, seed: u64) -> Vec<Vec<Vec<f64>>> {
    let mut rng = stage_rng(seed, "synthgen/means");
    let mut means: Vec<Vec<Vec<f64>>> = Vec::with_capacity(t.num_levels());
    means.push(
        (0..t.level_size(0))
            .map(|_| unit_vector(&mut rng, feature_dim))
            .collect(),
    );
    for level in 1..t.num_levels() {
        let parents = &t.parent_maps()[level - 1];
        let layer = (0..t.level_size(level))
            .map(|c| {
                let offset = unit_vector(&mut rng, feature_dim);
                let parent = &means[level - 1][parents[c]];
                parent
                    .iter()
                    .zip(&offset)
                    .map(|(p, o)| hier_corr * p + (1.0 - hier_corr) * o)
                    .collect()
            })
            .collect();
        means.push(layer);
    }
    means
}

/// Fully labeled dataset with `per_leaf` samples for every finest class.
pub fn generate(t: &Taxonomy, params: &GenParams) -> Result<Dataset> {
    t.ensure_valid()?;
    ensure_input!(params.per_leaf >= 1, "per_leaf must be at least 1");
    ensure_input!(params.feature_dim >= 1, "feature_dim must be at least 1");
    ensure_input!(
        params.noise_scale >= 0.0 && params.noise_scale.is_finite(),
        "noise_scale must be finite and non-negative"
    );
    ensure_input!(
        (0.0..=1.0).contains(&params.hier_corr),
        "hier_corr must lie in [0, 1]"
    );
    let means = class_means(t, params.feature_dim, params.hier_corr, params.seed);
    let leaf_means = &means[t.finest_level()];
    let sigma = params.noise_scale / (params.feature_dim as f64).sqrt();
    let mut rng = stage_rng(params.seed, "synthgen/samples");
    let mut samples = Vec::with_capacity(t.num_leaves() * params.per_leaf);
    for (leaf, mean) in leaf_means.iter().enumerate() {
        let label = LabelPath::full(&t.leaf_path(leaf)?);
        for _ in 0..params.per_leaf {
            let noise = gaussian_vec(&mut rng, params.feature_dim);
            let features = mean.iter().zip(&noise).map(|(m, n)| m + sigma * n).collect();
            samples.push(Sample {
                id: samples.len() as u64,
                features,
                label: label.clone(),
                text: None,
            });
        }
    }
    Ok(Dataset {
        taxonomy: t.clone(),
        samples,
        feature_dim: params.feature_dim,
        text_dim: None,
        seed: params.seed,
    })
}

/// One unit text anchor per finest class: the normalized sum of a random unit
/// vector for each class on the leaf's path, so leaves sharing ancestors
/// share part of their description.
pub fn text_anchors(t: &Taxonomy, text_dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = stage_rng(seed, "text/anchors");
    let parts: Vec<Vec<Vec<f64>>> = t
        .level_sizes()
        .iter()
        .map(|&k| (0..k).map(|_| unit_vector(&mut rng, text_dim)).collect())
        .collect();
    (0..t.num_leaves())
        .map(|leaf| {
            let path = t.leaf_path(leaf)?;
            let mut v = vec![0.0; text_dim];
            for (level, &c) in path.iter().enumerate() {
                v.iter_mut().zip(&parts[level][c]).for_each(|(a, b)| *a += b);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                // The path parts cancelled; fall back to the leaf's own part.
                return Ok(parts[t.finest_level()][leaf].clone());
            }
            v.iter_mut().for_each(|x| *x /= norm);
            Ok(v)
        })
        .collect()
}

/// Attach a unit text embedding to every sample:
/// `normalize(informativeness * anchor(leaf) + (1 - informativeness) * noise)`,
/// with anchors from [`text_anchors`] and noise drawn from `N(0, I / text_dim)`.
pub fn attach_synthetic_text(
    d: &Dataset,
    text_dim: usize,
    informativeness: f64,
    seed: u64,
) -> Result<Dataset> {
    ensure_input!(text_dim >= 1, "text_dim must be at least 1");
    ensure_input!(
        (0.0..=1.0).contains(&informativeness),
        "informativeness must lie in [0, 1]"
    );
    ensure_input!(
        d.text_dim.is_none() && d.samples.iter().all(|s| s.text.is_none()),
        "dataset already carries text embeddings"
    );
    let t = &d.taxonomy;
    let anchors = text_anchors(t, text_dim, seed)?;
    let scale = 1.0 / (text_dim as f64).sqrt();
    let mut noise_rng = stage_rng(seed, "text/noise");
    let mut out = d.clone();
    out.text_dim = Some(text_dim);
    for s in &mut out.samples {
        let leaf = s.label.get(t.finest_level()).ok_or_else(|| {
            crate::Error::Input(format!(
                "sample {} lacks a finest-level label; attach text before pruning",
                s.id
            ))
        })?;
        let noise = gaussian_vec(&mut noise_rng, text_dim);
        let mut v: Vec<f64> = anchors[leaf]
            .iter()
            .zip(&noise)
            .map(|(a, n)| informativeness * a + (1.0 - informativeness) * scale * n)
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            v = anchors[leaf].clone();
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        s.text = Some(v);
    }
    Ok(out)
}
