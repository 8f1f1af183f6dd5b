//! Batch evaluation over a JSONL file of captions.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::judge::Judge;
use super::metrics::{bleu4, rouge_l};
use super::EvalError;
use crate::series::{parse_series, serialize_for_prompt, summarize, InputFormat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchItem {
    pub id: String,
    pub caption: String,
    pub series_file: PathBuf,
    #[serde(default)]
    pub references: Option<Vec<String>>,
}

pub fn parse_batch(text: &str) -> Result<Vec<BatchItem>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| EvalError::Batch(format!("line {}: {e}", n + 1))))
        .collect()
}

pub fn load_batch(path: &Path) -> Result<Vec<BatchItem>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    parse_batch(&text)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    pub bleu4: Option<f64>,
    pub rouge_l_precision: Option<f64>,
    pub rouge_l_recall: Option<f64>,
    pub rouge_l_f1: Option<f64>,
    pub sa: Option<f64>,
    pub pc: Option<f64>,
    pub mr: Option<f64>,
    pub oq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Whether `error` came from the completion backend.
    #[serde(skip)]
    pub backend_failure: bool,
}

/// Score one item. Metrics need references; judge scores need `judge`.
/// Relative `series_file` paths resolve against `base_dir`.
pub fn evaluate_item(item: &BatchItem, base_dir: &Path, judge: Option<&Judge>, max_rows: usize) -> SampleResult {
    let mut out = SampleResult {
        id: item.id.clone(),
        ..Default::default()
    };
    if let Err(e) = score_item(item, base_dir, judge, max_rows, &mut out) {
        out.backend_failure = matches!(e, EvalError::Backend(_));
        out.error = Some(e.to_string());
    }
    out
}

fn score_item(
    item: &BatchItem,
    base_dir: &Path,
    judge: Option<&Judge>,
    max_rows: usize,
    out: &mut SampleResult,
) -> Result<(), EvalError> {
    if let Some(refs) = item.references.as_ref().filter(|r| !r.is_empty()) {
        let refs: Vec<&str> = refs.iter().map(String::as_str).collect();
        out.bleu4 = Some(bleu4(&item.caption, &refs)?);
        // best match over references
        let best = refs
            .iter()
            .map(|r| rouge_l(&item.caption, r))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .max_by(|a, b| a.f1.total_cmp(&b.f1))
            .expect("non-empty references");
        out.rouge_l_precision = Some(best.precision);
        out.rouge_l_recall = Some(best.recall);
        out.rouge_l_f1 = Some(best.f1);
    }
    if let Some(judge) = judge {
        let path = base_dir.join(&item.series_file);
        let bytes = std::fs::read(&path).map_err(|e| EvalError::Io {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        let series = parse_series(&bytes, InputFormat::from_path(&path), false, &item.id)?;
        let table = serialize_for_prompt(&series, &summarize(&series), max_rows);
        let (score, _) = judge.judge(&item.caption, &table)?;
        out.sa = Some(score.sa);
        out.pc = Some(score.pc);
        out.mr = Some(score.mr);
        out.oq = Some(score.oq);
        out.judge_model = Some(score.judge_model);
    }
    Ok(())
}

/// Column means over the samples that have a value.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BatchSummary {
    pub samples: usize,
    pub failed: usize,
    pub bleu4: Option<f64>,
    pub rouge_l_f1: Option<f64>,
    pub sa: Option<f64>,
    pub pc: Option<f64>,
    pub mr: Option<f64>,
    pub oq: Option<f64>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

fn one_decimal(v: Option<f64>) -> Option<f64> {
    v.map(|x| (x * 10.0).round() / 10.0)
}

/// Metric means at full precision; judge means at one decimal.
pub fn summarize_results(results: &[SampleResult]) -> BatchSummary {
    let col = |f: fn(&SampleResult) -> Option<f64>| mean(results.iter().map(f));
    BatchSummary {
        samples: results.len(),
        failed: results.iter().filter(|r| r.error.is_some()).count(),
        bleu4: col(|r| r.bleu4),
        rouge_l_f1: col(|r| r.rouge_l_f1),
        sa: one_decimal(col(|r| r.sa)),
        pc: one_decimal(col(|r| r.pc)),
        mr: one_decimal(col(|r| r.mr)),
        oq: one_decimal(col(|r| r.oq)),
    }
}

pub fn results_jsonl(results: &[SampleResult]) -> String {
    results
        .iter()
        .map(|r| serde_json::to_string(r).expect("result serializes") + "\n")
        .collect()
}

pub fn summary_csv(summary: &BatchSummary) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(summary).expect("in-memory csv");
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}
