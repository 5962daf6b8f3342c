//! Mini-batch training under four regimes.
//!
//! | regime      | objective                                         |
//! |-------------|---------------------------------------------------|
//! | `hier-only` | `L_hier`                                          |
//! | `textattr`  | `L_hier + alpha * L_text`                         |
//! | `taxonssl`  | `L_hier + lambda_pl * L_pl + lambda_tacl * L_tacl` |
//! | `combined`  | every term                                        |
//!
//! Self-training regimes see two augmented views of each batch. The weak
//! view carries the supervised terms and supplies pseudo-labels; the strong
//! view is fit to those pseudo-labels and feeds the contrastive term.
//! Confidence thresholds come from a per-level memory bank of recent weak-view
//! confidences on unlabeled entries, queried at a linearly scheduled
//! percentile at the start of each epoch.
//!
//! Any parameter tensor whose gradient is exactly zero in a step is left
//! untouched by that step, including weight decay and optimizer state.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor};
use crate::error::{ensure_input, Error, Result};
use crate::eval::{evaluate, EvalReport, PredictionMatrix};
use crate::losses::{
    build_affinity, combine, hier_loss, pseudo_label_loss, tacl_loss, text_loss, LossBreakdown,
    LossWeights, ObjectiveTerms, TaclForm,
};
use crate::model::{init, ModelConfig, ModelParams};
use crate::rng::{derive_seed, gaussian, shuffle, stage_rng};
use crate::synthgen::Dataset;
use crate::taxonomy::LabelPath;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "hier-only")]
    HierOnly,
    #[serde(rename = "textattr")]
    TextAttr,
    #[serde(rename = "taxonssl")]
    TaxonSsl,
    #[serde(rename = "combined")]
    Combined,
}

impl Regime {
    pub fn uses_text(self) -> bool {
        matches!(self, Regime::TextAttr | Regime::Combined)
    }

    pub fn uses_ssl(self) -> bool {
        matches!(self, Regime::TaxonSsl | Regime::Combined)
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::input(format!("unknown regime {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Train under `first` before `switch_epoch`, under the main regime after.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoStage {
    pub first: Regime,
    pub switch_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// SGD momentum, also Adam's first-moment decay.
    pub momentum: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub cosine_decay: bool,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    /// Temperature of the text alignment loss.
    pub tau: f64,
    /// Temperature of the taxonomy-aligned contrastive loss.
    pub tacl_temperature: f64,
    pub tacl_form: TaclForm,
    pub alpha: f64,
    pub lambda_pl: f64,
    pub lambda_tacl: f64,
    /// Percent of banked confidences accepted at the first epoch.
    pub k_start: f64,
    /// Percent accepted at the end of training.
    pub k_end: f64,
    pub memory_bank_size: usize,
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub strong_dropout: f64,
    pub hidden_dims: Vec<usize>,
    /// Projection width; defaults to the text width, or 32 without text.
    pub proj_dim: Option<usize>,
    /// 1-based trunk layer feeding each head; defaults to the top layer.
    pub head_layers: Option<Vec<usize>>,
    pub heldout_fraction: f64,
    pub two_stage: Option<TwoStage>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_regime(Regime::HierOnly)
    }
}

impl TrainConfig {
    /// Defaults for a regime: SGD with momentum for `taxonssl`, Adam with a
    /// short warmup otherwise.
    pub fn for_regime(regime: Regime) -> Self {
        let sgd = regime == Regime::TaxonSsl;
        Self {
            regime,
            epochs: 100,
            batch_size: 64,
            optimizer: if sgd { OptimizerKind::Sgd } else { OptimizerKind::Adam },
            learning_rate: if sgd { 1e-3 } else { 5e-4 },
            weight_decay: 0.05,
            momentum: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            cosine_decay: true,
            warmup_epochs: if sgd { 0 } else { 5 },
            warmup_lr: 1e-6,
            tau: 0.07,
            tacl_temperature: 0.1,
            tacl_form: TaclForm::Printed,
            alpha: 1.0,
            lambda_pl: 1.0,
            lambda_tacl: 1.0,
            k_start: 20.0,
            k_end: 80.0,
            memory_bank_size: 1024,
            weak_sigma: 0.01,
            strong_sigma: 0.03,
            strong_dropout: 0.2,
            hidden_dims: vec![128, 128],
            proj_dim: None,
            head_layers: None,
            heldout_fraction: 0.2,
            two_stage: None,
            seed: 0,
        }
    }

    /// Parse a JSON object; missing fields take the defaults of its regime.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::input(format!("config json: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::input("config must be a JSON object"))?;
        let regime = match obj.get("regime") {
            Some(r) => serde_json::from_value(r.clone())
                .map_err(|e| Error::input(format!("config regime: {e}")))?,
            None => Regime::HierOnly,
        };
        let mut base = serde_json::to_value(Self::for_regime(regime)).expect("config serializes");
        let fields = base.as_object_mut().expect("config is an object");
        for (k, v) in obj {
            fields.insert(k.clone(), v.clone());
        }
        let cfg: Self =
            serde_json::from_value(base).map_err(|e| Error::input(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_input!(self.epochs > 0, "epochs must be positive");
        ensure_input!(self.batch_size > 0, "batch_size must be positive");
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("warmup_lr", self.warmup_lr),
            ("tau", self.tau),
            ("tacl_temperature", self.tacl_temperature),
            ("adam_eps", self.adam_eps),
        ] {
            ensure_input!(v > 0.0 && v.is_finite(), "{name} must be positive, got {v}");
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("alpha", self.alpha),
            ("lambda_pl", self.lambda_pl),
            ("lambda_tacl", self.lambda_tacl),
            ("weak_sigma", self.weak_sigma),
            ("strong_sigma", self.strong_sigma),
        ] {
            ensure_input!(v >= 0.0 && v.is_finite(), "{name} must be non-negative, got {v}");
        }
        ensure_input!((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)");
        ensure_input!((0.0..1.0).contains(&self.adam_beta2), "adam_beta2 must lie in [0, 1)");
        ensure_input!(
            (0.0..1.0).contains(&self.strong_dropout),
            "strong_dropout must lie in [0, 1)"
        );
        ensure_input!(
            (0.0..1.0).contains(&self.heldout_fraction),
            "heldout_fraction must lie in [0, 1)"
        );
        for k in [self.k_start, self.k_end] {
            ensure_input!((0.0..=100.0).contains(&k), "K must lie in [0, 100], got {k}");
        }
        ensure_input!(self.memory_bank_size > 0, "memory_bank_size must be positive");
        ensure_input!(
            self.warmup_epochs <= self.epochs,
            "warmup_epochs exceeds epochs"
        );
        ensure_input!(
            !self.hidden_dims.is_empty() && self.hidden_dims.iter().all(|&h| h > 0),
            "hidden_dims must be non-empty and positive"
        );
        if let Some(ts) = self.two_stage {
            ensure_input!(
                ts.switch_epoch <= self.epochs,
                "two_stage switch_epoch {} exceeds epochs {}",
                ts.switch_epoch,
                self.epochs
            );
        }
        Ok(())
    }

    /// Regime in force during `epoch`.
    pub fn regime_at(&self, epoch: usize) -> Regime {
        match self.two_stage {
            Some(ts) if epoch < ts.switch_epoch => ts.first,
            _ => self.regime,
        }
    }

    fn any_regime(&self, f: impl Fn(Regime) -> bool) -> bool {
        f(self.regime) || self.two_stage.is_some_and(|ts| ts.switch_epoch > 0 && f(ts.first))
    }

    /// Learning rate of optimizer step `step` out of `total`.
    pub fn lr_at(&self, step: usize, total: usize, steps_per_epoch: usize) -> f64 {
        let warm = self.warmup_epochs * steps_per_epoch;
        if step < warm {
            let frac = step as f64 / warm as f64;
            return self.warmup_lr + (self.learning_rate - self.warmup_lr) * frac;
        }
        if !self.cosine_decay || total <= warm {
            return self.learning_rate;
        }
        let progress = (step - warm) as f64 / (total - warm) as f64;
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// Percent of banked confidences accepted at `epoch`.
    pub fn k_at(&self, epoch: usize) -> f64 {
        self.k_start + (self.k_end - self.k_start) * epoch as f64 / self.epochs as f64
    }
}

/// Per-level ring buffers of weak-view confidences on unlabeled entries.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    levels: Vec<VecDeque<f64>>,
}

impl MemoryBank {
    pub fn new(num_levels: usize, capacity: usize) -> Self {
        Self {
            capacity,
            levels: vec![VecDeque::with_capacity(capacity); num_levels],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self, level: usize) -> usize {
        self.levels[level].len()
    }

    pub fn is_empty(&self, level: usize) -> bool {
        self.levels[level].is_empty()
    }

    pub fn values(&self, level: usize) -> impl Iterator<Item = f64> + '_ {
        self.levels[level].iter().copied()
    }

    /// Append, evicting the oldest entries beyond capacity.
    pub fn push(&mut self, level: usize, confidences: &[f64]) {
        let buf = &mut self.levels[level];
        for &c in confidences {
            if buf.len() == self.capacity {
                buf.pop_front();
            }
            buf.push_back(c);
        }
    }

    /// Nearest-rank `p`-th percentile: the value at rank `ceil(p/100 * n)`
    /// (at least 1) of the sorted entries; 1.0 for an empty level.
    pub fn percentile(&self, level: usize, p: f64) -> f64 {
        let mut v: Vec<f64> = self.values(level).collect();
        if v.is_empty() {
            return 1.0;
        }
        v.sort_by(f64::total_cmp);
        let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
        v[rank.clamp(1, v.len()) - 1]
    }
}

/// Per-level thresholds at `epoch`: the `(100 - K)`-th percentile of banked
/// confidences, so roughly the top `K` percent are accepted.
pub fn update_thresholds(bank: &MemoryBank, epoch: usize, cfg: &TrainConfig) -> Vec<f64> {
    let k = cfg.k_at(epoch);
    (0..bank.levels.len())
        .map(|l| bank.percentile(l, 100.0 - k))
        .collect()
}

/// Feature-space augmentation: Gaussian noise of standard deviation `sigma`
/// per coordinate, then inverted dropout at rate `dropout`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub sigma: f64,
    pub dropout: f64,
}

impl TrainConfig {
    pub fn weak_augmentation(&self) -> Augmentation {
        Augmentation {
            sigma: self.weak_sigma,
            dropout: 0.0,
        }
    }

    pub fn strong_augmentation(&self) -> Augmentation {
        Augmentation {
            sigma: self.strong_sigma,
            dropout: self.strong_dropout,
        }
    }
}

pub fn augment(batch: &Tensor, aug: Augmentation, seed: u64) -> Tensor {
    if aug.sigma == 0.0 && aug.dropout == 0.0 {
        return batch.clone();
    }
    let mut rng = stage_rng(seed, "augment");
    let keep = 1.0 - aug.dropout;
    let data = batch
        .data()
        .iter()
        .map(|&x| {
            let noisy = x + aug.sigma * gaussian(&mut rng);
            if aug.dropout > 0.0 {
                if rand::Rng::random::<f64>(&mut rng) < aug.dropout {
                    0.0
                } else {
                    noisy / keep
                }
            } else {
                noisy
            }
        })
        .collect();
    Tensor::new(batch.shape().to_vec(), data).expect("shape unchanged")
}

/// Stratified split by deepest labeled class: about `fraction` of each class
/// goes to the second set. Both keep the input order.
pub fn split_holdout(d: &Dataset, fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, s) in d.samples.iter().enumerate() {
        let depth = s.label.depth();
        let class = s.label.get(depth - 1).expect("labeled prefix");
        groups.entry((depth - 1, class)).or_default().push(i);
    }
    let mut rng = stage_rng(seed, "split");
    let mut held = vec![false; d.len()];
    for idx in groups.values_mut() {
        shuffle(&mut rng, idx);
        let take = (fraction * idx.len() as f64 + 0.5).floor() as usize;
        for &i in &idx[..take.min(idx.len())] {
            held[i] = true;
        }
    }
    let (a, b): (Vec<usize>, Vec<usize>) = (0..d.len()).partition(|&i| !held[i]);
    (d.subset(&a), d.subset(&b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub regime: Regime,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub regime: Regime,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Per-term means over the epoch's steps.
    pub loss: LossBreakdown,
    pub thresholds: Vec<f64>,
    /// Pseudo-labels accepted per level over the epoch.
    pub accepted: Vec<usize>,
    /// Held-out metrics; absent when no held-out sample is fully labeled.
    pub metrics: Option<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: ModelParams,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
}

/// Split off a stratified held-out set and train on the rest.
pub fn train(d: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    ensure_input!(!d.is_empty(), "cannot train on an empty dataset");
    let (tr, held) = split_holdout(d, cfg.heldout_fraction, derive_seed(cfg.seed, "heldout"));
    train_with_heldout(&tr, &held, cfg)
}

/// Model configuration `train` builds for a dataset.
pub fn model_config(d: &Dataset, cfg: &TrainConfig) -> Result<ModelConfig> {
    let proj = cfg.proj_dim.or(d.text_dim).unwrap_or(32);
    let mut mc = ModelConfig::new(
        &d.taxonomy,
        d.feature_dim,
        cfg.hidden_dims.clone(),
        proj,
        derive_seed(cfg.seed, "model"),
    );
    if let Some(h) = &cfg.head_layers {
        mc.head_layers = h.clone();
    }
    mc.validate()?;
    Ok(mc)
}

pub fn train_with_heldout(d: &Dataset, heldout: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    ensure_input!(!d.is_empty(), "cannot train on an empty dataset");
    d.validate()?;
    if cfg.any_regime(Regime::uses_text) {
        ensure_input!(
            d.samples.iter().all(|s| s.text.is_some()),
            "regime {:?} needs text embeddings on every sample",
            cfg.regime
        );
        let proj = cfg.proj_dim.or(d.text_dim).unwrap_or(32);
        ensure_input!(
            d.text_dim == Some(proj),
            "projection width {proj} differs from text width {:?}",
            d.text_dim
        );
    }
    let mut model = init(model_config(d, cfg)?)?;
    let mut opt = Optimizer::new(cfg, &model);
    let mut bank = MemoryBank::new(d.num_levels(), cfg.memory_bank_size);
    let steps_per_epoch = d.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let eval_rows: Vec<usize> = (0..heldout.len())
        .filter(|&i| heldout.samples[i].label.is_full())
        .collect();
    let eval_set = heldout.subset(&eval_rows);

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::with_capacity(total_steps);
    let mut global = 0;
    for epoch in 0..cfg.epochs {
        let regime = cfg.regime_at(epoch);
        let thresholds = update_thresholds(&bank, epoch, cfg);
        let mut order: Vec<usize> = (0..d.len()).collect();
        shuffle(&mut stage_rng(cfg.seed, &format!("shuffle/{epoch}")), &mut order);
        let mut accepted = vec![0; d.num_levels()];
        let mut sums: Option<LossBreakdown> = None;
        let mut lr = cfg.learning_rate;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            lr = cfg.lr_at(global, total_steps, steps_per_epoch);
            let seed = derive_seed(cfg.seed, &format!("augment/{epoch}/{step}"));
            let out = train_step(&mut model, &mut opt, &mut bank, d, batch, regime, &thresholds, lr, seed, cfg)?;
            for (a, n) in accepted.iter_mut().zip(&out.accepted) {
                *a += n;
            }
            sums = Some(match sums {
                None => out.loss.clone(),
                Some(s) => add_breakdowns(&s, &out.loss),
            });
            steps.push(StepLog {
                epoch,
                step,
                regime,
                lr,
                loss: out.loss,
            });
            global += 1;
        }
        let loss = scale_breakdown(&sums.expect("at least one step"), 1.0 / steps_per_epoch as f64);
        let metrics = if eval_set.is_empty() {
            None
        } else {
            Some(evaluate_model(&model, &eval_set)?)
        };
        epochs.push(EpochLog {
            epoch,
            regime,
            lr,
            loss,
            thresholds,
            accepted,
            metrics,
        });
    }
    Ok(TrainOutput {
        model,
        epochs,
        steps,
    })
}

/// Metrics of the model's argmax predictions on a fully labeled dataset.
pub fn evaluate_model(model: &ModelParams, d: &Dataset) -> Result<EvalReport> {
    let preds = predict(model, d)?;
    let truths: Vec<LabelPath> = d.samples.iter().map(|s| s.label.clone()).collect();
    evaluate(&preds, &truths, &d.taxonomy)
}

pub fn predict(model: &ModelParams, d: &Dataset) -> Result<PredictionMatrix> {
    PredictionMatrix::from_logits(&model.predict_logits(&features(d, &indices(d))?)?)
}

fn indices(d: &Dataset) -> Vec<usize> {
    (0..d.len()).collect()
}

pub fn features(d: &Dataset, rows: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * d.feature_dim);
    for &i in rows {
        data.extend_from_slice(&d.samples[i].features);
    }
    Tensor::matrix(rows.len(), d.feature_dim, data)
}

fn text_matrix(d: &Dataset, rows: &[usize]) -> Result<Tensor> {
    let dim = d.text_dim.unwrap_or(0);
    let mut data = Vec::with_capacity(rows.len() * dim);
    for &i in rows {
        let t = d.samples[i]
            .text
            .as_ref()
            .ok_or_else(|| Error::input(format!("sample {} has no text", d.samples[i].id)))?;
        data.extend_from_slice(t);
    }
    Tensor::matrix(rows.len(), dim, data)
}

struct StepOutput {
    loss: LossBreakdown,
    accepted: Vec<usize>,
}

/// Rewrite a numeric failure so it names the loss term it came from.
fn in_term<T>(term: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric { op, detail } => Error::Numeric {
            op: format!("{term} loss ({op})"),
            detail,
        },
        other => other,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut ModelParams,
    opt: &mut Optimizer,
    bank: &mut MemoryBank,
    d: &Dataset,
    batch: &[usize],
    regime: Regime,
    thresholds: &[f64],
    lr: f64,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<StepOutput> {
    let labels: Vec<LabelPath> = batch.iter().map(|&i| d.samples[i].label.clone()).collect();
    let x = features(d, batch)?;
    let mut g = Graph::new();
    let params = model.bind(&mut g, true)?;
    let ssl = regime.uses_ssl();
    let xin = if ssl {
        augment(&x, cfg.weak_augmentation(), derive_seed(seed, "weak"))
    } else {
        x.clone()
    };
    let xv = g.constant(xin)?;
    let main = model.forward(&mut g, &params, xv)?;
    let hier = in_term("hier", hier_loss(&mut g, &main.logits, &labels))?;

    let text = if regime.uses_text() {
        let t = g.constant(text_matrix(d, batch)?)?;
        Some(in_term("text", text_loss(&mut g, main.projected, t, cfg.tau))?)
    } else {
        None
    };

    let mut accepted = vec![0; d.num_levels()];
    let (pl, tacl) = if ssl {
        let xs = g.constant(augment(&x, cfg.strong_augmentation(), derive_seed(seed, "strong")))?;
        let strong = model.forward(&mut g, &params, xs)?;
        let weak: Vec<Tensor> = main.logits.iter().map(|&v| g.value(v).clone()).collect();
        let pl = in_term(
            "pl",
            pseudo_label_loss(&mut g, &weak, &strong.logits, thresholds, &labels),
        )?;
        for (l, c) in pl.confidences.iter().enumerate() {
            bank.push(l, c);
        }
        accepted.clone_from(&pl.accepted);
        let graphs = build_affinity(&pl.pseudo_labels)?;
        let tacl = in_term(
            "tacl",
            tacl_loss(&mut g, strong.projected, &graphs, cfg.tacl_temperature, cfg.tacl_form),
        )?;
        (Some(pl.loss), Some(tacl.loss))
    } else {
        (None, None)
    };

    let terms = ObjectiveTerms {
        hier,
        text,
        pl,
        tacl,
    };
    let weights = LossWeights {
        alpha: cfg.alpha,
        lambda_pl: cfg.lambda_pl,
        lambda_tacl: cfg.lambda_tacl,
    };
    let (total, breakdown) = in_term("total", combine(&mut g, &terms, weights))?;
    g.backward(total)?;
    let grads: Vec<Option<Tensor>> = params.vars().iter().map(|&v| g.grad(v).cloned()).collect();
    opt.step(model, &grads, lr)?;
    Ok(StepOutput {
        loss: breakdown,
        accepted,
    })
}

fn add_breakdowns(a: &LossBreakdown, b: &LossBreakdown) -> LossBreakdown {
    LossBreakdown {
        hier: a.hier + b.hier,
        text: a.text + b.text,
        tacl: a.tacl + b.tacl,
        pl: a.pl + b.pl,
        total: a.total + b.total,
        alpha: b.alpha,
        lambda_pl: b.lambda_pl,
        lambda_tacl: b.lambda_tacl,
        hier_per_level: a
            .hier_per_level
            .iter()
            .zip(&b.hier_per_level)
            .map(|(x, y)| x + y)
            .collect(),
    }
}

fn scale_breakdown(a: &LossBreakdown, c: f64) -> LossBreakdown {
    LossBreakdown {
        hier: a.hier * c,
        text: a.text * c,
        tacl: a.tacl * c,
        pl: a.pl * c,
        total: a.total * c,
        hier_per_level: a.hier_per_level.iter().map(|x| x * c).collect(),
        ..a.clone()
    }
}

/// SGD with momentum or Adam, both with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    momentum: f64,
    beta2: f64,
    eps: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    updates: Vec<u64>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, model: &ModelParams) -> Self {
        let sizes: Vec<usize> = model.tensors().iter().map(|t| t.numel()).collect();
        Self {
            kind: cfg.optimizer,
            weight_decay: cfg.weight_decay,
            momentum: cfg.momentum,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            updates: vec![0; sizes.len()],
        }
    }

    /// Apply one update; tensors whose gradient is missing or all zero are
    /// skipped entirely.
    pub fn step(&mut self, model: &mut ModelParams, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        let mut tensors = model.tensors_mut();
        ensure_input!(
            grads.len() == tensors.len(),
            "{} gradients for {} parameter tensors",
            grads.len(),
            tensors.len()
        );
        for (k, (p, g)) in tensors.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let g = g.data();
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::numeric("optimizer", format!("non-finite gradient in tensor {k}")));
            }
            self.updates[k] += 1;
            let t = self.updates[k] as i32;
            let decay = 1.0 - lr * self.weight_decay;
            let p = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    let v = &mut self.first[k];
                    for i in 0..p.len() {
                        v[i] = self.momentum * v[i] + g[i];
                        p[i] = p[i] * decay - lr * v[i];
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (self.momentum, self.beta2);
                    let c1 = 1.0 - b1.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    let (m, v) = (&mut self.first[k], &mut self.second[k]);
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        p[i] = p[i] * decay - lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_bank_threshold_is_one() {
        let bank = MemoryBank::new(3, 8);
        let cfg = TrainConfig::default();
        assert_eq!(update_thresholds(&bank, 0, &cfg), vec![1.0; 3]);
    }

    #[test]
    fn nearest_rank_percentile() {
        let mut bank = MemoryBank::new(1, 16);
        let vals: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        bank.push(0, &vals);
        let mut cfg = TrainConfig {
            k_start: 50.0,
            k_end: 50.0,
            ..TrainConfig::default()
        };
        assert_eq!(update_thresholds(&bank, 0, &cfg), vec![0.5]);
        cfg.k_start = 100.0;
        assert_eq!(update_thresholds(&bank, 0, &cfg), vec![0.1]);
        cfg.k_start = 0.0;
        assert_eq!(update_thresholds(&bank, 0, &cfg), vec![1.0]);
    }

    #[test]
    fn bank_never_exceeds_capacity() {
        let mut bank = MemoryBank::new(1, 4);
        bank.push(0, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(bank.len(0), 4);
        assert_eq!(bank.values(0).collect::<Vec<_>>(), vec![0.3, 0.4, 0.5, 0.6]);
    }

    #[test]
    fn k_schedule_is_linear() {
        let cfg = TrainConfig {
            epochs: 10,
            k_start: 20.0,
            k_end: 70.0,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.k_at(0), 20.0);
        assert_eq!(cfg.k_at(5), 45.0);
    }

    #[test]
    fn identity_augmentations() {
        let x = Tensor::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap();
        let none = Augmentation {
            sigma: 0.0,
            dropout: 0.0,
        };
        assert_eq!(augment(&x, none, 1), x);
    }

    #[test]
    fn strong_augmentation_preserves_mean() {
        let n = 10_000;
        let x = Tensor::matrix(n, 1, vec![0.8; n]).unwrap();
        let aug = Augmentation {
            sigma: 0.05,
            dropout: 0.3,
        };
        let y = augment(&x, aug, 3);
        let mean = y.data().iter().sum::<f64>() / n as f64;
        assert!((mean - 0.8).abs() / 0.8 < 0.02, "mean {mean}");
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = TrainConfig {
            epochs: 10,
            warmup_epochs: 2,
            learning_rate: 1e-2,
            warmup_lr: 1e-6,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0, 100, 10), 1e-6);
        assert_eq!(cfg.lr_at(20, 100, 10), 1e-2);
        assert!(cfg.lr_at(99, 100, 10) < 1e-4);
        assert!(cfg.lr_at(10, 100, 10) < 1e-2);
    }

    #[test]
    fn config_json_overlays_regime_defaults() {
        let cfg = TrainConfig::from_json(r#"{"regime": "taxonssl", "epochs": 3}"#).unwrap();
        assert_eq!(cfg.optimizer, OptimizerKind::Sgd);
        assert_eq!(cfg.learning_rate, 1e-3);
        assert_eq!(cfg.epochs, 3);
        assert!(TrainConfig::from_json(r#"{"epochz": 3}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"k_end": 120}"#).is_err());
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
    }
}
