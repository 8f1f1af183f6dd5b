//! JSONL run traces and token/convergence reports.
//!
//! A trace file holds a header line, one line per completed iteration, and a
//! footer line. Each line is flushed as soon as it is written, so a run that
//! dies mid-way leaves a readable partial trace.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentRole, Fragment, TextGradient};
use crate::backend::{CallRecord, Purpose};
use crate::config::RunConfig;
use crate::fusion::SimilarityDetail;
use crate::optimizer::Caption;
use crate::series::WeatherSeries;

pub const TRACE_SUFFIX: &str = ".trace.jsonl";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("trace line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("appending iteration {got} but the trace holds {expected}")]
    OutOfOrder { expected: u32, got: u32 },
    #[error("inconsistent trace: {0}")]
    Inconsistent(String),
    #[error("baseline token count must be positive")]
    InvalidBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    KMax,
    Error,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Converged => "converged",
            StopReason::KMax => "k_max",
            StopReason::Error => "error",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Totals {
    pub fn of<'a>(calls: impl IntoIterator<Item = &'a CallRecord>) -> Self {
        calls.into_iter().fold(Self::default(), |t, c| Self {
            calls: t.calls + 1,
            prompt_tokens: t.prompt_tokens + c.prompt_tokens,
            completion_tokens: t.completion_tokens + c.completion_tokens,
        })
    }

    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

/// A fragment identified by its source role and position in that gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FragmentRef {
    pub role: AgentRole,
    pub ordinal: usize,
}

impl From<&Fragment> for FragmentRef {
    fn from(f: &Fragment) -> Self {
        Self {
            role: f.source_role,
            ordinal: f.ordinal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub gradients: Vec<TextGradient>,
    pub groups: Vec<Vec<FragmentRef>>,
    pub consensus: Vec<Fragment>,
    pub unique: Vec<Fragment>,
    pub discarded: Vec<Fragment>,
    pub fused_text: String,
    pub fusion_called: bool,
    pub caption_before: Caption,
    pub caption_after: Caption,
    pub convergence_similarity: f64,
    pub compressed: bool,
    pub backend_calls: Vec<CallRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarities: Option<SimilarityDetail>,
}

impl IterationRecord {
    pub fn calls_for(&self, purpose: Purpose) -> usize {
        self.backend_calls.iter().filter(|c| c.purpose == purpose).count()
    }

    pub fn gradient_calls(&self) -> usize {
        AgentRole::ALL.iter().map(|r| self.calls_for(r.purpose())).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub run_id: String,
    pub config: RunConfig,
    pub template_hashes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<BTreeMap<String, String>>,
    pub embedder: String,
    pub provider: String,
    pub series: WeatherSeries,
    pub seed_caption: Option<Caption>,
    pub seed_calls: Vec<CallRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFooter {
    pub final_caption: Option<Caption>,
    pub stop_reason: StopReason,
    pub iterations: u32,
    pub totals: Totals,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Calls made during an iteration that did not complete.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub incomplete_calls: Vec<CallRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceLine {
    Header(Box<TraceHeader>),
    Iteration(Box<IterationRecord>),
    Footer(TraceFooter),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub header: TraceHeader,
    pub iterations: Vec<IterationRecord>,
    pub footer: Option<TraceFooter>,
    /// Calls of an unfinished iteration; moved into the footer on finish.
    pub orphan_calls: Vec<CallRecord>,
}

impl RunTrace {
    pub fn new(header: TraceHeader) -> Self {
        Self {
            header,
            iterations: Vec::new(),
            footer: None,
            orphan_calls: Vec::new(),
        }
    }

    pub fn run_id(&self) -> &str {
        &self.header.run_id
    }

    /// Every recorded backend call, in run order.
    pub fn all_calls(&self) -> impl Iterator<Item = &CallRecord> {
        let tail = self
            .footer
            .as_ref()
            .map(|f| f.incomplete_calls.as_slice())
            .unwrap_or(&[]);
        self.header
            .seed_calls
            .iter()
            .chain(self.iterations.iter().flat_map(|i| i.backend_calls.iter()))
            .chain(tail)
            .chain(self.orphan_calls.iter())
    }

    pub fn totals(&self) -> Totals {
        Totals::of(self.all_calls())
    }

    pub fn final_caption(&self) -> Option<&Caption> {
        self.footer.as_ref().and_then(|f| f.final_caption.as_ref())
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        self.footer.as_ref().map(|f| f.stop_reason)
    }

    pub fn finish(&mut self, final_caption: Caption, stop_reason: StopReason) {
        self.footer = Some(TraceFooter {
            final_caption: Some(final_caption),
            stop_reason,
            iterations: self.iterations.len() as u32,
            totals: self.totals(),
            error: None,
            incomplete_calls: std::mem::take(&mut self.orphan_calls),
        });
    }

    pub fn finish_with_error(&mut self, error: &str) {
        let last = self
            .iterations
            .last()
            .map(|i| i.caption_after.clone())
            .or_else(|| self.header.seed_caption.clone());
        self.finish(last.unwrap_or_else(|| Caption::new("", 0)), StopReason::Error);
        if let Some(f) = &mut self.footer {
            if f.final_caption.as_ref().is_some_and(|c| c.text.is_empty()) {
                f.final_caption = None;
            }
            f.error = Some(error.to_string());
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        out.push_str(&line(&TraceLine::Header(Box::new(self.header.clone()))));
        for it in &self.iterations {
            out.push_str(&line(&TraceLine::Iteration(Box::new(it.clone()))));
        }
        if let Some(f) = &self.footer {
            out.push_str(&line(&TraceLine::Footer(f.clone())));
        }
        out
    }

    /// Parse a trace; a missing footer (interrupted run) is allowed.
    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let mut header = None;
        let mut iterations = Vec::new();
        let mut footer = None;
        for (n, raw) in text.lines().enumerate() {
            let n = n + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let parsed: TraceLine = serde_json::from_str(raw).map_err(|e| TraceError::Parse {
                line: n,
                detail: e.to_string(),
            })?;
            let misplaced = |what: &str| TraceError::Parse {
                line: n,
                detail: format!("unexpected {what} line"),
            };
            match parsed {
                TraceLine::Header(h) if header.is_none() => header = Some(*h),
                TraceLine::Header(_) => return Err(misplaced("header")),
                TraceLine::Iteration(_) | TraceLine::Footer(_) if header.is_none() || footer.is_some() => {
                    return Err(misplaced("record"))
                }
                TraceLine::Iteration(r) => iterations.push(*r),
                TraceLine::Footer(f) => footer = Some(f),
            }
        }
        let header = header.ok_or(TraceError::Parse {
            line: 1,
            detail: "missing header".into(),
        })?;
        Ok(Self {
            header,
            iterations,
            footer,
            orphan_calls: Vec::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, TraceError> {
        let text = std::fs::read_to_string(path).map_err(|source| TraceError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Check the structural contract of a finished trace: iteration bounds,
    /// per-iteration call counts, stop reason and totals.
    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: String| Err(TraceError::Inconsistent(m));
        let opt = &self.header.config.optimizer;
        let Some(footer) = &self.footer else {
            return bad("no footer".into());
        };
        if footer.totals != self.totals() {
            return bad("footer totals differ from the call records".into());
        }
        if footer.iterations as usize != self.iterations.len() {
            return bad("footer iteration count differs from the records".into());
        }
        let seed_calls = self.header.seed_calls.len();
        if seed_calls != 1 {
            return bad(format!("{seed_calls} seed calls"));
        }
        for (k, it) in self.iterations.iter().enumerate() {
            if it.iteration as usize != k {
                return bad(format!("record {k} is labelled iteration {}", it.iteration));
            }
            if it.gradient_calls() != opt.roles.len() {
                return bad(format!("iteration {k}: {} gradient calls", it.gradient_calls()));
            }
            for r in AgentRole::ALL {
                let expected = usize::from(opt.roles.contains(&r));
                if it.calls_for(r.purpose()) != expected {
                    return bad(format!("iteration {k}: wrong number of {r} calls"));
                }
            }
            let expect = [
                (Purpose::Fusion, usize::from(it.fusion_called)),
                (Purpose::Update, usize::from(!it.fused_text.trim().is_empty())),
            ];
            for (p, n) in expect {
                if it.calls_for(p) != n {
                    return bad(format!("iteration {k}: {} {p} calls, expected {n}", it.calls_for(p)));
                }
            }
            if it.calls_for(Purpose::Compress) > usize::from(it.compressed) {
                return bad(format!("iteration {k}: unexpected compress call"));
            }
            let others = it.backend_calls.len()
                - it.gradient_calls()
                - it.calls_for(Purpose::Fusion)
                - it.calls_for(Purpose::Update)
                - it.calls_for(Purpose::Compress);
            if others != 0 {
                return bad(format!("iteration {k}: {others} stray calls"));
            }
        }
        if footer.stop_reason == StopReason::Error {
            return Ok(());
        }
        let n = self.iterations.len() as u32;
        if n == 0 || n > opt.iteration_budget() {
            return bad(format!("{n} iterations outside [1, {}]", opt.iteration_budget()));
        }
        let last = &self.iterations[n as usize - 1];
        let hit = last.convergence_similarity >= opt.tau_conv;
        let early = self.iterations[..n as usize - 1]
            .iter()
            .any(|i| i.convergence_similarity >= opt.tau_conv);
        if early {
            return bad("loop continued past a converged iteration".into());
        }
        match footer.stop_reason {
            StopReason::Converged if !hit => bad("converged without reaching tau_conv".into()),
            StopReason::KMax if hit || n != opt.iteration_budget() => {
                bad("k_max stop inconsistent with the final iteration".into())
            }
            _ => Ok(()),
        }
    }
}

fn line(value: &TraceLine) -> String {
    let mut s = serde_json::to_string(value).expect("trace line serializes");
    s.push('\n');
    s
}

pub fn trace_path(dir: &Path, run_id: &str) -> PathBuf {
    dir.join(format!("{run_id}{TRACE_SUFFIX}"))
}

/// Append-only writer for one run's trace file.
pub struct TraceWriter {
    path: PathBuf,
    file: File,
    header_written: bool,
    iterations: u32,
    finished: bool,
}

impl TraceWriter {
    /// Create (or truncate) `<dir>/<run_id>.trace.jsonl`.
    pub fn create(dir: &Path, run_id: &str) -> Result<Self, TraceError> {
        let io = |source| TraceError::Io {
            path: dir.to_path_buf(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        let path = trace_path(dir, run_id);
        let file = File::create(&path).map_err(|source| TraceError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(Self {
            path,
            file,
            header_written: false,
            iterations: 0,
            finished: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn emit(&mut self, value: &TraceLine) -> Result<(), TraceError> {
        let text = line(value);
        self.file
            .write_all(text.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|source| TraceError::Io {
                path: self.path.clone(),
                source,
            })
    }

    pub fn write_header(&mut self, header: &TraceHeader) -> Result<(), TraceError> {
        if self.header_written {
            return Err(TraceError::Inconsistent("header written twice".into()));
        }
        self.emit(&TraceLine::Header(Box::new(header.clone())))?;
        self.header_written = true;
        Ok(())
    }

    pub fn append_iteration(&mut self, record: &IterationRecord) -> Result<(), TraceError> {
        if !self.header_written || self.finished {
            return Err(TraceError::Inconsistent("iteration outside header/footer".into()));
        }
        if record.iteration != self.iterations {
            return Err(TraceError::OutOfOrder {
                expected: self.iterations,
                got: record.iteration,
            });
        }
        self.emit(&TraceLine::Iteration(Box::new(record.clone())))?;
        self.iterations += 1;
        Ok(())
    }

    /// Write the footer of `trace`, first emitting the header if it was never
    /// written.
    pub fn finish(&mut self, trace: &RunTrace) -> Result<(), TraceError> {
        if self.finished {
            return Ok(());
        }
        if !self.header_written {
            self.write_header(&trace.header)?;
        }
        let footer = trace
            .footer
            .clone()
            .ok_or_else(|| TraceError::Inconsistent("trace has no footer".into()))?;
        self.emit(&TraceLine::Footer(footer))?;
        self.finished = true;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunTokens {
    pub run_id: String,
    pub iterations: u32,
    pub stop_reason: String,
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityPoint {
    pub run_id: String,
    pub iteration: u32,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub baseline_tokens: u64,
    pub runs: Vec<RunTokens>,
    pub iteration_histogram: BTreeMap<u32, usize>,
    pub similarities: Vec<SimilarityPoint>,
}

/// Token consumption and convergence summary over a set of traces.
pub fn report(traces: &[RunTrace], baseline_tokens: u64) -> Result<Report, TraceError> {
    if baseline_tokens == 0 {
        return Err(TraceError::InvalidBaseline);
    }
    let mut runs = Vec::new();
    let mut iteration_histogram = BTreeMap::new();
    let mut similarities = Vec::new();
    for t in traces {
        let totals = t.totals();
        let iterations = t.iterations.len() as u32;
        *iteration_histogram.entry(iterations).or_insert(0) += 1;
        runs.push(RunTokens {
            run_id: t.run_id().to_string(),
            iterations,
            stop_reason: t.stop_reason().map_or("incomplete", StopReason::as_str).to_string(),
            calls: totals.calls,
            prompt_tokens: totals.prompt_tokens,
            completion_tokens: totals.completion_tokens,
            total_tokens: totals.total_tokens(),
            relative: totals.total_tokens() as f64 / baseline_tokens as f64,
        });
        similarities.extend(t.iterations.iter().map(|i| SimilarityPoint {
            run_id: t.run_id().to_string(),
            iteration: i.iteration,
            similarity: i.convergence_similarity,
        }));
    }
    Ok(Report {
        baseline_tokens,
        runs,
        iteration_histogram,
        similarities,
    })
}

fn to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(header).expect("in-memory csv");
    }
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

impl Report {
    pub fn mean_total_tokens(&self) -> Option<f64> {
        (!self.runs.is_empty())
            .then(|| self.runs.iter().map(|r| r.total_tokens as f64).sum::<f64>() / self.runs.len() as f64)
    }

    pub fn mean_relative(&self) -> Option<f64> {
        self.mean_total_tokens().map(|m| m / self.baseline_tokens as f64)
    }

    pub fn runs_csv(&self) -> String {
        to_csv(
            &self.runs,
            &[
                "run_id",
                "iterations",
                "stop_reason",
                "calls",
                "prompt_tokens",
                "completion_tokens",
                "total_tokens",
                "relative",
            ],
        )
    }

    pub fn similarity_csv(&self) -> String {
        to_csv(&self.similarities, &["run_id", "iteration", "similarity"])
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if self.runs.is_empty() {
            s.push_str("no traces\n");
            return s;
        }
        let _ = writeln!(s, "baseline tokens: {}", self.baseline_tokens);
        let _ = writeln!(
            s,
            "{:<24} {:>5} {:>10} {:>6} {:>10} {:>9}",
            "run", "iters", "stop", "calls", "tokens", "relative"
        );
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{:<24} {:>5} {:>10} {:>6} {:>10} {:>9.2}",
                r.run_id, r.iterations, r.stop_reason, r.calls, r.total_tokens, r.relative
            );
        }
        if let (Some(m), Some(rel)) = (self.mean_total_tokens(), self.mean_relative()) {
            let _ = writeln!(s, "mean tokens: {m:.1} (relative {rel:.2})");
        }
        s.push_str("iterations histogram:\n");
        for (k, n) in &self.iteration_histogram {
            let _ = writeln!(s, "  {k}: {n}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{sha256_hex, ProviderKind};
    use crate::series::{parse_series, InputFormat};

    fn call(purpose: Purpose, iteration: u32, prompt: u64, completion: u64) -> CallRecord {
        CallRecord {
            purpose,
            iteration,
            model: "m".into(),
            prompt_hash: "h".into(),
            prompt_tokens: prompt,
            completion_tokens: completion,
            provider: ProviderKind::Scripted,
            latency_ms: 0,
            response: "r".into(),
            response_sha256: sha256_hex(b"r"),
        }
    }

    fn header() -> TraceHeader {
        let series = parse_series(
            b"timestamp,temperature_c\n2024-01-01T00:00:00Z,1\n2024-01-01T01:00:00Z,2\n",
            InputFormat::Csv,
            false,
            "s",
        )
        .unwrap();
        TraceHeader {
            run_id: "r1".into(),
            config: RunConfig::default(),
            template_hashes: BTreeMap::new(),
            templates: None,
            embedder: "local".into(),
            provider: "scripted".into(),
            series,
            seed_caption: Some(Caption::new("seed", 0)),
            seed_calls: vec![call(Purpose::Seed, 0, 100, 20)],
        }
    }

    fn record(k: u32, similarity: f64) -> IterationRecord {
        let mut calls: Vec<CallRecord> = [
            Purpose::Stat,
            Purpose::Phys,
            Purpose::Met,
            Purpose::Fusion,
            Purpose::Update,
        ]
        .into_iter()
        .map(|p| call(p, k, 100, 50))
        .collect();
        calls.sort_by_key(|c| c.purpose);
        IterationRecord {
            iteration: k,
            gradients: vec![],
            groups: vec![],
            consensus: vec![],
            unique: vec![],
            discarded: vec![],
            fused_text: "F".into(),
            fusion_called: true,
            caption_before: Caption::new(format!("c{k}"), k),
            caption_after: Caption::new(format!("c{}", k + 1), k + 1),
            convergence_similarity: similarity,
            compressed: false,
            backend_calls: calls,
            similarities: None,
        }
    }

    #[test]
    fn writer_flushes_each_line_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut trace = RunTrace::new(header());
        let mut w = TraceWriter::create(dir.path(), "r1").unwrap();
        w.write_header(&trace.header).unwrap();
        for k in 0..3 {
            let r = record(k, 0.5);
            w.append_iteration(&r).unwrap();
            trace.iterations.push(r);
            let on_disk = std::fs::read_to_string(w.path()).unwrap();
            assert_eq!(on_disk.lines().count(), k as usize + 2);
        }
        // an interrupted run still parses
        let partial = RunTrace::load(w.path()).unwrap();
        assert_eq!(partial.iterations.len(), 3);
        assert!(partial.footer.is_none());

        trace.header.config.optimizer.k_max = 3;
        trace.finish(Caption::new("c3", 3), StopReason::KMax);
        let mut w = TraceWriter::create(dir.path(), "r1").unwrap();
        w.write_header(&trace.header).unwrap();
        for r in &trace.iterations {
            w.append_iteration(r).unwrap();
        }
        w.finish(&trace).unwrap();
        let loaded = RunTrace::load(&trace_path(dir.path(), "r1")).unwrap();
        assert_eq!(loaded, trace);
        assert_eq!(std::fs::read_to_string(w.path()).unwrap(), trace.to_jsonl());
        loaded.validate().unwrap();
    }

    #[test]
    fn append_rejects_out_of_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = TraceWriter::create(dir.path(), "x").unwrap();
        w.write_header(&header()).unwrap();
        assert!(matches!(
            w.append_iteration(&record(1, 0.1)),
            Err(TraceError::OutOfOrder { expected: 0, got: 1 })
        ));
    }

    #[test]
    fn validate_catches_stop_reason_mismatch() {
        let mut t = RunTrace::new(header());
        t.iterations.push(record(0, 0.99));
        t.finish(Caption::new("c1", 1), StopReason::KMax);
        assert!(t.validate().is_err());
        let mut t = RunTrace::new(header());
        t.iterations.push(record(0, 0.99));
        t.finish(Caption::new("c1", 1), StopReason::Converged);
        t.validate().unwrap();
    }

    #[test]
    fn report_relative_consumption() {
        let mut t = RunTrace::new(header());
        // 120 seed tokens + 5 * 150
        t.iterations.push(record(0, 0.99));
        t.finish(Caption::new("c1", 1), StopReason::Converged);
        let r = report(std::slice::from_ref(&t), 870).unwrap();
        assert_eq!(r.runs[0].total_tokens, 870);
        assert_eq!(r.runs[0].relative, 1.0);
        assert_eq!(r.iteration_histogram[&1], 1);
        assert!(r.runs_csv().starts_with("run_id,iterations,"));
        assert_eq!(r.similarity_csv().lines().count(), 2);

        let empty = report(&[], 1000).unwrap();
        assert!(empty.runs.is_empty());
        assert_eq!(empty.runs_csv().lines().count(), 1);
        assert!(matches!(report(&[], 0), Err(TraceError::InvalidBaseline)));
    }
}
