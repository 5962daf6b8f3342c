//! One function per subcommand.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use freegrain::eval::{evaluate, stopping_infer, stopping_report, PredictionMatrix, StoppingReport};
use freegrain::io::{
    logits_records, read_dataset, read_flags, read_jsonl, read_predictions,
    read_taxonomy, sha256_hex, write_dataset, write_json, write_jsonl, write_predictions,
    write_taxonomy,
};
use freegrain::model::{CheckpointMeta, ModelParams};
use freegrain::pruning::{
    flags_from_scores, granularity_histogram, random_prune, semantic_prune, PruneSpec, ScoreRecord,
    Stratify,
};
use freegrain::rng::{derive_seed, stage_rng};
use freegrain::synthgen::{attach_synthetic_text, generate, Dataset, GenParams};
use freegrain::taxonomy::{LabelPath, Taxonomy};
use freegrain::trainer::{features, split_holdout, train, train_with_heldout, TrainConfig};
use serde::Serialize;

use crate::manifest::Recorder;
use crate::{
    AttachTextArgs, Command, EvalArgs, GenDataArgs, GenTaxonomyArgs, InferArgs, OnOff, PruneArgs,
    PruneMode, ReportArgs, Shape, TrainArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenTaxonomy(a) => gen_taxonomy(&a),
        Command::GenData(a) => gen_data(&a),
        Command::AttachText(a) => attach_text(&a),
        Command::Prune(a) => prune(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Infer(a) => infer(&a),
        Command::Report(a) => report(&a),
    }
}

fn parse_sizes(s: &str) -> Result<Vec<usize>> {
    s.split('-')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| freegrain::Error::Input(format!("bad level size {p:?} in {s:?}")).into())
        })
        .collect()
}

fn load_taxonomy(rec: &mut Recorder, path: &Path) -> Result<Taxonomy> {
    rec.input(path)?;
    Ok(read_taxonomy(path)?)
}

fn load_dataset(rec: &mut Recorder, path: &Path, t: &Taxonomy) -> Result<Dataset> {
    rec.dataset_input(path)?;
    Ok(read_dataset(path, t)?)
}

fn save_dataset(rec: &mut Recorder, path: &Path, d: &Dataset) -> Result<()> {
    write_dataset(path, d)?;
    rec.dataset_output(path);
    Ok(())
}

fn load_checkpoint(rec: &mut Recorder, path: &Path, t: &Taxonomy) -> Result<ModelParams> {
    rec.input(path)?;
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let (model, _) =
        ModelParams::load(BufReader::new(file)).with_context(|| format!("loading {}", path.display()))?;
    ensure!(
        model.config().level_sizes == t.level_sizes(),
        freegrain::Error::Input(format!(
            "checkpoint level sizes {:?} differ from the taxonomy's {:?}",
            model.config().level_sizes,
            t.level_sizes()
        ))
    );
    Ok(model)
}

fn gen_taxonomy(a: &GenTaxonomyArgs) -> Result<()> {
    let mut rec = Recorder::new("gen-taxonomy");
    let sizes = parse_sizes(&a.sizes)?;
    let t = match a.shape {
        Shape::Balanced => Taxonomy::balanced(&sizes)?,
        Shape::Random => Taxonomy::random(&sizes, &mut stage_rng(a.seed, "taxonomy"))?,
    };
    write_taxonomy(&a.out, &t)?;
    rec.output(&a.out);
    rec.finish(&a.out, a, Some(a.seed))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut rec = Recorder::new("gen-data");
    let t = load_taxonomy(&mut rec, &a.taxonomy)?;
    let d = generate(
        &t,
        &GenParams {
            per_leaf: a.per_leaf,
            feature_dim: a.feature_dim,
            noise_scale: a.noise,
            hier_corr: a.hier_corr,
            seed: a.seed,
        },
    )?;
    match &a.heldout {
        Some(held_path) => {
            ensure!(
                (0.0..1.0).contains(&a.heldout_fraction),
                freegrain::Error::Input("heldout fraction must lie in [0, 1)".into())
            );
            let (tr, held) = split_holdout(&d, a.heldout_fraction, derive_seed(a.seed, "heldout"));
            save_dataset(&mut rec, &a.out, &tr)?;
            save_dataset(&mut rec, held_path, &held)?;
        }
        None => save_dataset(&mut rec, &a.out, &d)?,
    }
    rec.finish(&a.out, a, Some(a.seed))
}

fn attach_text(a: &AttachTextArgs) -> Result<()> {
    let mut rec = Recorder::new("attach-text");
    let t = load_taxonomy(&mut rec, &a.taxonomy)?;
    let d = load_dataset(&mut rec, &a.data, &t)?;
    let out = attach_synthetic_text(&d, a.text_dim, a.informativeness, a.seed)?;
    save_dataset(&mut rec, &a.out, &out)?;
    rec.finish(&a.out, a, Some(a.seed))
}

fn prune(a: &PruneArgs) -> Result<()> {
    let mut rec = Recorder::new("prune");
    let t = load_taxonomy(&mut rec, &a.taxonomy)?;
    let d = load_dataset(&mut rec, &a.data, &t)?;
    let out = match a.mode {
        PruneMode::Random => {
            let Some(spec) = &a.spec else {
                bail!(freegrain::Error::Input("random pruning needs --spec".into()));
            };
            let spec: PruneSpec = spec.parse()?;
            let stratify = match a.stratify {
                OnOff::On => Stratify::On,
                OnOff::Off => Stratify::Off,
            };
            random_prune(&d, &spec, a.seed, stratify)?
        }
        PruneMode::Semantic => {
            let flags = match (&a.flags, &a.scores) {
                (Some(p), _) => {
                    rec.input(p)?;
                    read_flags(p)?
                }
                (None, Some(p)) => {
                    rec.input(p)?;
                    let scores: Vec<ScoreRecord> =
                        read_jsonl(p)?.into_iter().map(|(_, r)| r).collect();
                    flags_from_scores(&d, &scores)?
                }
                (None, None) => bail!(freegrain::Error::Input(
                    "semantic pruning needs --flags or --scores".into()
                )),
            };
            semantic_prune(&d, &flags, a.seed)?
        }
    };
    save_dataset(&mut rec, &a.out, &out)?;
    rec.finish(&a.out, a, Some(a.seed))
}

#[derive(Serialize)]
struct TrainManifestConfig<'a> {
    args: &'a TrainArgs,
    resolved: &'a TrainConfig,
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut rec = Recorder::new("train");
    let t = load_taxonomy(&mut rec, &a.taxonomy)?;
    let d = load_dataset(&mut rec, &a.data, &t)?;
    let mut cfg = match &a.config {
        Some(p) => {
            rec.input(p)?;
            TrainConfig::from_json(&freegrain::io::read_to_string(p)?)
                .with_context(|| format!("config {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let out = match &a.heldout {
        Some(p) => {
            let held = load_dataset(&mut rec, p, &t)?;
            train_with_heldout(&d, &held, &cfg)?
        }
        None => train(&d, &cfg)?,
    };
    let meta = CheckpointMeta {
        seed: cfg.seed,
        config_hash: sha256_hex(serde_json::to_string(&cfg)?.as_bytes()),
        epochs_completed: out.epochs.len(),
    };
    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = BufWriter::new(file);
    out.model
        .save(&mut w, &meta)
        .and_then(|()| w.flush())
        .with_context(|| format!("writing {}", a.out.display()))?;
    rec.output(&a.out);
    if let Some(log) = &a.log {
        write_json(log, &out.epochs)?;
        rec.output(log);
    }
    if let Some(m) = out.epochs.last().and_then(|e| e.metrics.as_ref()) {
        println!(
            "epochs {} held-out fpa {:.4} tice {:.4} level accuracy {:?}",
            out.epochs.len(),
            m.fpa,
            m.tice,
            m.level_accuracy
        );
    }
    rec.finish(
        &a.out,
        &TrainManifestConfig {
            args: a,
            resolved: &cfg,
        },
        Some(cfg.seed),
    )
}

#[derive(Serialize)]
struct EvalOutput {
    n: usize,
    level_accuracy: Vec<f64>,
    fpa: f64,
    tice: f64,
    stopping: StoppingReport,
}

/// Reorder predictions to follow the dataset's sample order.
fn align(ids: &[u64], preds: &PredictionMatrix, d: &Dataset) -> Result<PredictionMatrix> {
    let by_id: BTreeMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    ensure!(
        by_id.len() == ids.len() && ids.len() == d.len(),
        freegrain::Error::Input(format!(
            "{} predictions with {} distinct ids for {} samples",
            ids.len(),
            by_id.len(),
            d.len()
        ))
    );
    let rows = d
        .samples
        .iter()
        .map(|s| {
            by_id
                .get(&s.id)
                .map(|&i| preds.row(i).to_vec())
                .ok_or_else(|| freegrain::Error::Input(format!("no prediction for sample {}", s.id)))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(PredictionMatrix::from_labels(rows)?)
}

fn model_predictions(model: &ModelParams, d: &Dataset) -> Result<Vec<freegrain::diffcore::Tensor>> {
    let rows: Vec<usize> = (0..d.len()).collect();
    Ok(model.predict_logits(&features(d, &rows)?)?)
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let mut rec = Recorder::new("eval");
    let t = load_taxonomy(&mut rec, &a.taxonomy)?;
    let d = load_dataset(&mut rec, &a.data, &t)?;
    let preds = match (&a.checkpoint, &a.predictions) {
        (Some(p), _) => {
            let model = load_checkpoint(&mut rec, p, &t)?;
            PredictionMatrix::from_logits(&model_predictions(&model, &d)?)?
        }
        (None, Some(p)) => {
            rec.input(p)?;
            let (ids, m) = read_predictions(p)?;
            align(&ids, &m, &d)?
        }
        (None, None) => bail!(freegrain::Error::Input("eval needs --checkpoint or --predictions".into())),
    };
    let truths: Vec<LabelPath> = d.samples.iter().map(|s| s.label.clone()).collect();
    let r = evaluate(&preds, &truths, &t)?;
    let stopping = stopping_report(&stopping_infer(&preds, &t)?, &truths, &t)?;
    let out = EvalOutput {
        n: r.n,
        level_accuracy: r.level_accuracy,
        fpa: r.fpa,
        tice: r.tice,
        stopping,
    };
    write_json(&a.out, &out)?;
    rec.output(&a.out);
    println!("fpa {:.4} tice {:.4} level accuracy {:?}", out.fpa, out.tice, out.level_accuracy);
    rec.finish(&a.out, a, None)
}

#[derive(Serialize)]
struct StoppedRecord {
    id: u64,
    stop_depth: usize,
    labels: Vec<usize>,
}

fn infer(a: &InferArgs) -> Result<()> {
    let mut rec = Recorder::new("infer");
    let t = load_taxonomy(&mut rec, &a.taxonomy)?;
    let model = load_checkpoint(&mut rec, &a.checkpoint, &t)?;
    let d = load_dataset(&mut rec, &a.data, &t)?;
    let logits = model_predictions(&model, &d)?;
    let ids: Vec<u64> = d.samples.iter().map(|s| s.id).collect();
    if a.stop {
        let stopped = stopping_infer(&PredictionMatrix::from_logits(&logits)?, &t)?;
        let records: Vec<StoppedRecord> = ids
            .iter()
            .zip(stopped)
            .map(|(&id, s)| StoppedRecord {
                id,
                stop_depth: s.stop_depth,
                labels: s.labels,
            })
            .collect();
        write_jsonl(&a.out, &records)?;
    } else {
        write_predictions(&a.out, &logits_records(&ids, &logits))?;
    }
    rec.output(&a.out);
    rec.finish(&a.out, a, None)
}

#[derive(Serialize)]
struct DataReport {
    num_samples: usize,
    num_levels: usize,
    feature_dim: usize,
    text_dim: Option<usize>,
    /// Samples whose deepest labeled level is each level, coarsest first.
    histogram: Vec<usize>,
    fractions: Vec<f64>,
}

fn report(a: &ReportArgs) -> Result<()> {
    let mut rec = Recorder::new("report");
    let t = load_taxonomy(&mut rec, &a.taxonomy)?;
    let d = load_dataset(&mut rec, &a.data, &t)?;
    let histogram = granularity_histogram(&d);
    let n = d.len().max(1) as f64;
    let out = DataReport {
        num_samples: d.len(),
        num_levels: d.num_levels(),
        feature_dim: d.feature_dim,
        text_dim: d.text_dim,
        fractions: histogram.iter().map(|&h| h as f64 / n).collect(),
        histogram,
    };
    write_json(&a.out, &out)?;
    rec.output(&a.out);
    println!("histogram {:?}", out.histogram);
    rec.finish(&a.out, a, None)
}
