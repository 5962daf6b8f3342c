//! File formats.
//!
//! * Taxonomy: one JSON object.
//! * Dataset: JSON Lines, one sample per line, plus a sidecar header at
//!   `<path>.header.json` with dimensions, seed and the SHA-256 of the
//!   taxonomy it was labeled against.
//! * Correctness flags and predictions: JSON Lines.
//! * Configs and reports: pretty JSON with a trailing newline.
//!
//! Parse failures report the file and 1-based line number.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::eval::PredictionMatrix;
use crate::pruning::CorrectnessFlag;
use crate::synthgen::{Dataset, Sample};
use crate::taxonomy::Taxonomy;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    }
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

/// Parse a whole-file JSON document.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::input(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

/// Parse one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e))?;
        out.push((i + 1, v));
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::input(e.to_string()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_taxonomy(path: &Path) -> Result<Taxonomy> {
    let t: Taxonomy = read_json(path)?;
    t.ensure_valid().map_err(|e| parse_err(path, 1, e))?;
    Ok(t)
}

pub fn write_taxonomy(path: &Path, t: &Taxonomy) -> Result<()> {
    write_json(path, t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub taxonomy_sha256: String,
    pub feature_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_dim: Option<usize>,
    pub num_levels: usize,
    pub num_samples: usize,
    pub seed: u64,
}

pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".header.json");
    PathBuf::from(s)
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the taxonomy's canonical JSON.
pub fn taxonomy_digest(t: &Taxonomy) -> Result<String> {
    Ok(sha256_hex(t.to_json()?.as_bytes()))
}

/// Write samples to `path` and the header next to it.
pub fn write_dataset(path: &Path, d: &Dataset) -> Result<()> {
    let header = DatasetHeader {
        taxonomy_sha256: taxonomy_digest(&d.taxonomy)?,
        feature_dim: d.feature_dim,
        text_dim: d.text_dim,
        num_levels: d.num_levels(),
        num_samples: d.len(),
        seed: d.seed,
    };
    write_jsonl(path, &d.samples)?;
    write_json(&header_path(path), &header)
}

pub fn read_dataset_header(path: &Path) -> Result<DatasetHeader> {
    read_json(&header_path(path))
}

/// Read samples and header, checking every sample against `t`.
pub fn read_dataset(path: &Path, t: &Taxonomy) -> Result<Dataset> {
    let header = read_dataset_header(path)?;
    let hpath = header_path(path);
    if header.taxonomy_sha256 != taxonomy_digest(t)? {
        return Err(parse_err(&hpath, 1, "dataset was labeled against a different taxonomy"));
    }
    if header.num_levels != t.num_levels() {
        return Err(parse_err(
            &hpath,
            1,
            format!(
                "dataset has {} levels, taxonomy has {}",
                header.num_levels,
                t.num_levels()
            ),
        ));
    }
    let rows: Vec<(usize, Sample)> = read_jsonl(path)?;
    let mut d = Dataset {
        taxonomy: t.clone(),
        samples: Vec::with_capacity(rows.len()),
        feature_dim: header.feature_dim,
        text_dim: header.text_dim,
        seed: header.seed,
    };
    for (line, s) in rows {
        d.validate_sample(&s).map_err(|e| parse_err(path, line, e))?;
        d.samples.push(s);
    }
    if d.len() != header.num_samples {
        return Err(parse_err(
            &hpath,
            1,
            format!("header lists {} samples, file has {}", header.num_samples, d.len()),
        ));
    }
    Ok(d)
}

pub fn read_flags(path: &Path) -> Result<Vec<CorrectnessFlag>> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, f)| f).collect())
}

pub fn write_flags(path: &Path, flags: &[CorrectnessFlag]) -> Result<()> {
    write_jsonl(path, flags)
}

/// One line of a predictions file: either raw per-level logits or labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PredictionRecord {
    Logits { id: u64, logits: Vec<Vec<f64>> },
    Labels { id: u64, labels: Vec<usize> },
}

impl PredictionRecord {
    pub fn id(&self) -> u64 {
        match self {
            PredictionRecord::Logits { id, .. } | PredictionRecord::Labels { id, .. } => *id,
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        match self {
            PredictionRecord::Labels { labels, .. } => labels.clone(),
            PredictionRecord::Logits { logits, .. } => {
                logits.iter().map(|z| crate::eval::argmax(z)).collect()
            }
        }
    }
}

/// Records for per-level logit matrices, one per sample id.
pub fn logits_records(ids: &[u64], logits: &[Tensor]) -> Vec<PredictionRecord> {
    ids.iter()
        .enumerate()
        .map(|(i, &id)| PredictionRecord::Logits {
            id,
            logits: logits.iter().map(|z| z.row(i).to_vec()).collect(),
        })
        .collect()
}

/// Read predictions and return their ids and argmax labels.
pub fn read_predictions(path: &Path) -> Result<(Vec<u64>, PredictionMatrix)> {
    let rows: Vec<(usize, PredictionRecord)> = read_jsonl(path)?;
    let mut ids = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    let levels = rows.first().map(|(_, r)| r.labels().len());
    for (line, r) in rows {
        let l = r.labels();
        if l.is_empty() || Some(l.len()) != levels {
            return Err(parse_err(path, line, "prediction level count differs from the first line"));
        }
        if let PredictionRecord::Logits { logits, .. } = &r {
            if logits.iter().any(|z| z.is_empty() || z.iter().any(|x| !x.is_finite())) {
                return Err(parse_err(path, line, "empty or non-finite logits"));
            }
        }
        ids.push(r.id());
        labels.push(l);
    }
    Ok((ids, PredictionMatrix::from_labels(labels)?))
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    write_jsonl(path, records)
}
