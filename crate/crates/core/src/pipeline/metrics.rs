use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::write_atomic;

/// One evaluation row of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub phase: String,
    pub step: usize,
    pub seed: u64,
    pub mean_true_reward: f64,
    pub reward_accuracy: Option<f64>,
    pub loss: f64,
    pub kl_to_ref: f64,
    pub queries_used: u64,
}

/// Final row per method and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub seed: u64,
    pub selected_step: usize,
    pub mean_true_reward: f64,
    pub reward_accuracy: Option<f64>,
    pub kl_to_ref: f64,
    pub queries_used: u64,
}

impl From<&MetricsRecord> for SummaryRow {
    fn from(r: &MetricsRecord) -> Self {
        SummaryRow {
            method: r.method.clone(),
            seed: r.seed,
            selected_step: r.step,
            mean_true_reward: r.mean_true_reward,
            reward_accuracy: r.reward_accuracy,
            kl_to_ref: r.kl_to_ref,
            queries_used: r.queries_used,
        }
    }
}

pub fn to_jsonl(records: &[MetricsRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    write_atomic(path, &to_jsonl(records)?)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            crate::io::from_json_str(l).map_err(|e| match e {
                crate::Error::Config { path: p, message } => crate::Error::Format {
                    path: path.to_path_buf(),
                    message: format!("line {}: {p}: {message}", i + 1),
                },
                other => other,
            })
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    write_atomic(path, &bytes)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    read_csv(path)
}
