//! Re-execute a recorded run from its trace and check it reproduces.

use std::sync::Arc;

use serde_json::Value;
use thiserror::Error;

use crate::backend::{CallRecord, ProviderKind, ScriptEntry, ScriptedProvider};
use crate::embed::EmbedderRegistry;
use crate::optimizer::{Caption, Engine};
use crate::templates::TemplateSet;
use crate::trace::{RunTrace, StopReason};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("replay diverged: {0}")]
    Divergence(String),
    #[error("cannot replay: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub run_id: String,
    pub final_caption: Caption,
    pub iterations: usize,
}

/// Drop the fields that legitimately differ between a live call and its
/// scripted reproduction.
fn normalized(call: &CallRecord) -> CallRecord {
    CallRecord {
        provider: ProviderKind::Scripted,
        latency_ms: 0,
        prompt_tokens: 0,
        completion_tokens: 0,
        ..call.clone()
    }
}

fn normalized_value(trace: &RunTrace) -> (Value, Vec<Value>) {
    let seed: Vec<CallRecord> = trace.header.seed_calls.iter().map(normalized).collect();
    let iterations = trace
        .iterations
        .iter()
        .map(|it| {
            let mut it = it.clone();
            it.backend_calls = it.backend_calls.iter().map(normalized).collect();
            serde_json::to_value(it).expect("record serializes")
        })
        .collect();
    (serde_json::to_value(seed).expect("calls serialize"), iterations)
}

/// Replay `trace` with its recorded responses as the script.
pub fn replay(trace: &RunTrace, embedders: &EmbedderRegistry) -> Result<ReplayReport, ReplayError> {
    let diverged = |m: String| Err(ReplayError::Divergence(m));
    let footer = trace
        .footer
        .as_ref()
        .ok_or_else(|| ReplayError::Setup("trace has no footer (interrupted run)".into()))?;
    if footer.stop_reason == StopReason::Error {
        return Err(ReplayError::Setup("trace records a failed run".into()));
    }
    let recorded_final = footer
        .final_caption
        .clone()
        .ok_or_else(|| ReplayError::Setup("trace has no final caption".into()))?;

    for call in trace.all_calls() {
        if !call.is_intact() {
            return diverged(format!(
                "recorded {} response at iteration {} does not match its hash",
                call.purpose, call.iteration
            ));
        }
    }
    let script = trace
        .all_calls()
        .map(|c| ScriptEntry::role(c.purpose, c.iteration, c.response.clone()))
        .collect();
    let provider = ScriptedProvider::new(script).map_err(|e| ReplayError::Divergence(e.to_string()))?;

    let config = trace.header.config.clone();
    let templates = match &trace.header.templates {
        Some(sources) => TemplateSet::from_sources(sources),
        None => TemplateSet::load(config.templates.dir.as_deref()),
    }
    .map_err(|e| ReplayError::Setup(e.to_string()))?;
    if templates.hashes() != trace.header.template_hashes {
        return diverged("templates differ from the ones recorded in the trace".into());
    }
    let embedder = embedders
        .build(&config.embedding)
        .map_err(|e| ReplayError::Setup(e.to_string()))?;
    if embedder.id() != trace.header.embedder {
        return diverged(format!(
            "embedder `{}` differs from recorded `{}`",
            embedder.id(),
            trace.header.embedder
        ));
    }

    let engine =
        Engine::new(Arc::new(provider), embedder, templates, config).map_err(|e| ReplayError::Setup(e.to_string()))?;
    let outcome = engine
        .run(&trace.header.series, trace.run_id(), None)
        .map_err(|e| ReplayError::Divergence(format!("reproduction failed: {e}")))?;

    let (seed_a, iters_a) = normalized_value(trace);
    let (seed_b, iters_b) = normalized_value(&outcome.trace);
    if seed_a != seed_b {
        return diverged("seed call differs".into());
    }
    if let Some(k) = (0..iters_a.len().max(iters_b.len())).find(|&k| iters_a.get(k) != iters_b.get(k)) {
        return diverged(format!("iteration {k} differs"));
    }
    if outcome.caption != recorded_final {
        return diverged("final caption differs".into());
    }
    Ok(ReplayReport {
        run_id: trace.run_id().to_string(),
        final_caption: outcome.caption,
        iterations: outcome.trace.iterations.len(),
    })
}
