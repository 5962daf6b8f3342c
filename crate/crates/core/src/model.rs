//! Hierarchical MLP classifier: a ReLU trunk, one linear head per taxonomy
//! level, and a projection head whose rows are L2-normalized.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{ensure_input, Error, Result};
use crate::rng::stage_rng;
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub level_sizes: Vec<usize>,
    /// Width of the projection head; matches the text width when text is used.
    pub proj_dim: usize,
    /// For each level, the 1-based trunk layer whose output feeds its head.
    pub head_layers: Vec<usize>,
    pub init_seed: u64,
}

impl ModelConfig {
    /// All heads on the top trunk layer.
    pub fn new(
        t: &Taxonomy,
        feature_dim: usize,
        hidden_dims: Vec<usize>,
        proj_dim: usize,
        init_seed: u64,
    ) -> Self {
        let top = hidden_dims.len();
        Self {
            feature_dim,
            level_sizes: t.level_sizes().to_vec(),
            head_layers: vec![top; t.num_levels()],
            hidden_dims,
            proj_dim,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_input!(self.feature_dim > 0, "feature_dim must be positive");
        ensure_input!(!self.hidden_dims.is_empty(), "the trunk needs at least one hidden layer");
        ensure_input!(
            self.hidden_dims.iter().all(|&h| h > 0),
            "hidden widths must be positive"
        );
        ensure_input!(self.proj_dim > 0, "projection width must be positive");
        ensure_input!(!self.level_sizes.is_empty(), "model needs at least one level");
        ensure_input!(
            self.level_sizes.iter().all(|&k| k > 0),
            "level sizes must be positive"
        );
        ensure_input!(
            self.head_layers.len() == self.level_sizes.len(),
            "{} head layers for {} levels",
            self.head_layers.len(),
            self.level_sizes.len()
        );
        ensure_input!(
            self.head_layers
                .iter()
                .all(|&k| k >= 1 && k <= self.hidden_dims.len()),
            "head layers must lie in 1..={}",
            self.hidden_dims.len()
        );
        Ok(())
    }
}

/// Dense layer `y = x W + b` with `W` of shape `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Weights uniform in `[-1/sqrt(in), 1/sqrt(in)]`, zero bias.
    fn init<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], w).expect("linear shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    pub trunk: Vec<Linear>,
    pub heads: Vec<Linear>,
    pub projection: Linear,
}

/// Parameter variables of one graph, in [`ModelParams::tensors`] order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub trunk: Vec<(Var, Var)>,
    pub heads: Vec<(Var, Var)>,
    pub projection: (Var, Var),
}

impl BoundParams {
    pub fn vars(&self) -> Vec<Var> {
        self.trunk
            .iter()
            .chain(&self.heads)
            .chain(std::iter::once(&self.projection))
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }

    pub fn head_vars(&self, level: usize) -> [Var; 2] {
        let (w, b) = self.heads[level];
        [w, b]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `batch x |level l|` logits, one per level.
    pub logits: Vec<Var>,
    /// `batch x proj_dim`, unit rows.
    pub projected: Var,
    /// Output of the top trunk layer.
    pub trunk_features: Var,
}

pub fn init(config: ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = stage_rng(config.init_seed, "model/init");
    let mut trunk = Vec::with_capacity(config.hidden_dims.len());
    let mut fan_in = config.feature_dim;
    for &h in &config.hidden_dims {
        trunk.push(Linear::init(&mut rng, fan_in, h));
        fan_in = h;
    }
    let heads = config
        .level_sizes
        .iter()
        .zip(&config.head_layers)
        .map(|(&k, &layer)| Linear::init(&mut rng, config.hidden_dims[layer - 1], k))
        .collect();
    let top = *config.hidden_dims.last().unwrap_or(&0);
    let projection = Linear::init(&mut rng, top, config.proj_dim);
    Ok(ModelParams {
        config,
        trunk,
        heads,
        projection,
    })
}

impl ModelParams {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_levels(&self) -> usize {
        self.heads.len()
    }

    /// Every parameter tensor: trunk, then heads, then projection; weight before bias.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.trunk
            .iter()
            .chain(&self.heads)
            .chain(std::iter::once(&self.projection))
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.trunk
            .iter_mut()
            .chain(self.heads.iter_mut())
            .chain(std::iter::once(&mut self.projection))
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.trunk.len() {
            names.push(format!("trunk.{i}.weight"));
            names.push(format!("trunk.{i}.bias"));
        }
        for i in 0..self.heads.len() {
            names.push(format!("head.{i}.weight"));
            names.push(format!("head.{i}.bias"));
        }
        names.push("projection.weight".into());
        names.push("projection.bias".into());
        names
    }

    /// Index range of the head-`level` tensors within [`ModelParams::tensors`].
    pub fn head_tensor_indices(&self, level: usize) -> [usize; 2] {
        let base = 2 * (self.trunk.len() + level);
        [base, base + 1]
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Result<BoundParams> {
        let mut bind_layer = |l: &Linear| -> Result<(Var, Var)> {
            Ok((
                g.leaf(l.weight.clone(), requires_grad)?,
                g.leaf(l.bias.clone(), requires_grad)?,
            ))
        };
        let trunk = self.trunk.iter().map(&mut bind_layer).collect::<Result<_>>()?;
        let heads = self.heads.iter().map(&mut bind_layer).collect::<Result<_>>()?;
        let projection = bind_layer(&self.projection)?;
        Ok(BoundParams {
            trunk,
            heads,
            projection,
        })
    }

    /// Record the forward pass of `x` (`batch x feature_dim`) on `g`.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<ForwardOutput> {
        let shape = g.value(x).shape().to_vec();
        ensure_input!(
            shape.len() == 2 && shape[1] == self.config.feature_dim,
            "batch of shape {shape:?} for feature width {}",
            self.config.feature_dim
        );
        let mut hidden = Vec::with_capacity(p.trunk.len());
        let mut h = x;
        for &(w, b) in &p.trunk {
            let z = g.matmul(h, w)?;
            let z = g.add_row(z, b)?;
            h = g.relu(z)?;
            hidden.push(h);
        }
        let logits = p
            .heads
            .iter()
            .zip(&self.config.head_layers)
            .map(|(&(w, b), &layer)| {
                let z = g.matmul(hidden[layer - 1], w)?;
                g.add_row(z, b)
            })
            .collect::<Result<Vec<_>>>()?;
        let (pw, pb) = p.projection;
        let z = g.matmul(h, pw)?;
        let z = g.add_row(z, pb)?;
        let projected = g.l2_normalize_rows(z)?;
        Ok(ForwardOutput {
            logits,
            projected,
            trunk_features: h,
        })
    }

    /// Per-level logits for a feature matrix, without recording gradients.
    pub fn predict_logits(&self, features: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false)?;
        let x = g.constant(features.clone())?;
        let out = self.forward(&mut g, &p, x)?;
        Ok(out.logits.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// Write the checkpoint: magic, header length, JSON header, little-endian
    /// f64 blob of every tensor in [`ModelParams::tensors`] order.
    pub fn save<W: Write>(&self, mut w: W, meta: &CheckpointMeta) -> std::io::Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            model: self.config.clone(),
            tensors: self
                .tensor_names()
                .into_iter()
                .zip(self.tensors())
                .map(|(name, t)| TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
            meta: meta.clone(),
        };
        let header = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for t in self.tensors() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<(ModelParams, CheckpointMeta)> {
        let bad = |m: &str| Error::Input(format!("checkpoint: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| bad(&e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(bad("unknown format"));
        }
        let mut params = init(header.model)?;
        let names = params.tensor_names();
        ensure_input!(
            header.tensors.len() == names.len(),
            "checkpoint lists {} tensors, model has {}",
            header.tensors.len(),
            names.len()
        );
        for ((entry, name), t) in header.tensors.iter().zip(&names).zip(params.tensors_mut()) {
            ensure_input!(
                &entry.name == name && entry.shape == t.shape(),
                "checkpoint tensor {} does not match the model",
                entry.name
            );
            let mut buf = [0u8; 8];
            for v in t.data_mut() {
                r.read_exact(&mut buf).map_err(|_| bad("truncated blob"))?;
                *v = f64::from_le_bytes(buf);
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|_| bad("read error"))?;
        ensure_input!(rest.is_empty(), "checkpoint has {} trailing bytes", rest.len());
        Ok((params, header.meta))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FGCKPT01";
const CHECKPOINT_FORMAT: &str = "freegrain-checkpoint-v1";

/// Provenance stored with a checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// SHA-256 of the training configuration JSON.
    pub config_hash: String,
    pub epochs_completed: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
    meta: CheckpointMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}
