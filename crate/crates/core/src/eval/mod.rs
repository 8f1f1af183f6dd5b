//! Caption evaluation: LLM judge, BLEU-4, ROUGE-L and annotator agreement.

mod alpha;
mod batch;
mod judge;
mod metrics;

use std::path::PathBuf;

use thiserror::Error;

pub use alpha::{krippendorff_alpha, AnnotationTable};
pub use batch::{
    evaluate_item, load_batch, parse_batch, results_jsonl, summarize_results, summary_csv, BatchItem, BatchSummary,
    SampleResult,
};
pub use judge::{format_scores, parse_scores, Judge, JudgeScore, SCORE_KEYS};
pub use metrics::{bleu4, metric_tokens, rouge_l, RougeL, BLEU_EPSILON};

use crate::backend::BackendError;
use crate::series::SeriesError;
use crate::templates::TemplateError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty candidate or reference")]
    EmptyInput,
    #[error("annotation table has no variance in pairable values")]
    DegenerateTable,
    #[error("invalid annotation table: {0}")]
    InvalidTable(String),
    #[error("judge reply could not be parsed: {0}")]
    JudgeParse(String),
    #[error("batch file: {0}")]
    Batch(String),
    #[error("reading {path}: {detail}")]
    Io { path: PathBuf, detail: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Series(#[from] SeriesError),
}
