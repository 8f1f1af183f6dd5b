//! The refinement loop: gradients, fusion, caption update, length control and
//! convergence.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{self, AgentContext, AgentError, AgentRole, Fragment};
use crate::backend::{
    count_tokens, sha256_hex, Backend, BackendError, CompletionProvider, Purpose, RequestDefaults, ResponseCache,
};
use crate::config::RunConfig;
use crate::embed::{cosine, EmbedError, Embedder};
use crate::fusion::{self, FusionError};
use crate::series::{render_summary, serialize_for_prompt, summarize, WeatherSeries, DEFAULT_MAX_ROWS};
use crate::templates::{Bindings, TemplateError, TemplateSet};
use crate::trace::{FragmentRef, IterationRecord, RunTrace, StopReason, TraceError, TraceHeader, TraceWriter};

pub const DEFAULT_K_MAX: u32 = 5;
pub const DEFAULT_TAU_CONV: f64 = 0.95;
pub const DEFAULT_L_MAX: usize = 150;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub token_count: usize,
    pub iteration: u32,
}

impl Caption {
    pub fn new(text: impl Into<String>, iteration: u32) -> Self {
        let text = text.into();
        Self {
            token_count: count_tokens(&text),
            text,
            iteration,
        }
    }
}

/// How far the update prompt lets the model move per step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateIntensity {
    Conservative,
    #[default]
    Moderate,
    Aggressive,
}

impl UpdateIntensity {
    fn instruction(self) -> &'static str {
        match self {
            UpdateIntensity::Conservative => {
                "Make the smallest edits that address the instructions and keep the existing wording wherever possible."
            }
            UpdateIntensity::Moderate => {
                "Address every instruction, rewriting sentences where needed while keeping the overall structure."
            }
            UpdateIntensity::Aggressive => {
                "Rewrite freely and restructure the caption as needed to fully address every instruction."
            }
        }
    }
}

fn all_roles() -> Vec<AgentRole> {
    AgentRole::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub k_max: u32,
    pub tau_conv: f64,
    pub l_max: usize,
    pub update_intensity: UpdateIntensity,
    /// Stop after one iteration regardless of convergence.
    pub single_pass: bool,
    pub length_constraint_enabled: bool,
    /// Agents that contribute gradients.
    #[serde(default = "all_roles")]
    pub roles: Vec<AgentRole>,
    /// Agent that writes the initial caption.
    pub seed_role: AgentRole,
    /// Table rows rendered into prompts.
    pub max_rows: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            k_max: DEFAULT_K_MAX,
            tau_conv: DEFAULT_TAU_CONV,
            l_max: DEFAULT_L_MAX,
            update_intensity: UpdateIntensity::Moderate,
            single_pass: false,
            length_constraint_enabled: true,
            roles: all_roles(),
            seed_role: AgentRole::Stat,
            max_rows: DEFAULT_MAX_ROWS,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k_max == 0 {
            return Err("optimizer.k_max must be at least 1".into());
        }
        if !(self.tau_conv > 0.0 && self.tau_conv <= 1.0) {
            return Err(format!("optimizer.tau_conv = {} outside (0, 1]", self.tau_conv));
        }
        if self.l_max == 0 {
            return Err("optimizer.l_max must be positive".into());
        }
        if self.max_rows < 2 {
            return Err("optimizer.max_rows must be at least 2".into());
        }
        if self.roles.is_empty() {
            return Err("optimizer.roles must name at least one agent".into());
        }
        let mut roles = self.roles.clone();
        roles.sort();
        roles.dedup();
        if roles.len() != self.roles.len() {
            return Err("optimizer.roles has duplicates".into());
        }
        Ok(())
    }

    /// Iterations the loop may run.
    pub fn iteration_budget(&self) -> u32 {
        if self.single_pass {
            1
        } else {
            self.k_max
        }
    }
}

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("{purpose} returned an empty caption")]
    EmptyCaption { purpose: Purpose },
}

impl OptimizerError {
    /// The backend error at the root of this failure, if any.
    pub fn backend_error(&self) -> Option<&BackendError> {
        match self {
            OptimizerError::Backend(e) => Some(e),
            OptimizerError::Agent(AgentError::Backend(e)) => Some(e),
            OptimizerError::Fusion(FusionError::Backend(e)) => Some(e),
            _ => None,
        }
    }
}

/// A failed run with the trace recorded up to the failure.
#[derive(Debug, Error)]
#[error("{}{stage}: {source}", iteration.map(|k| format!("iteration {k}, ")).unwrap_or_default())]
pub struct RunError {
    pub iteration: Option<u32>,
    pub stage: &'static str,
    #[source]
    pub source: OptimizerError,
    pub trace: Box<RunTrace>,
}

/// Revise `caption` with the fused gradient. An empty gradient is a no-op
/// that makes no backend call.
pub fn apply_gradient(
    ctx: &AgentContext<'_>,
    caption: &Caption,
    fused_text: &str,
    intensity: UpdateIntensity,
    iteration: u32,
) -> Result<Caption, OptimizerError> {
    if fused_text.trim().is_empty() {
        return Ok(caption.clone());
    }
    let bindings = Bindings::new()
        .set("series_table", ctx.series_text)
        .set("summary", ctx.summary_text)
        .set("caption", caption.text.as_str())
        .set("gradient", fused_text)
        .set("limit_tokens", ctx.limit_tokens.to_string());
    let (system, user) = ctx.templates.get(Purpose::Update).render(&bindings)?;
    let system = format!("{system}\n\n{}", intensity.instruction());
    let request = ctx.backend.request(Purpose::Update, iteration, system, user);
    let text = ctx.backend.complete(&request)?.text;
    let text = text.trim();
    if text.is_empty() {
        return Err(OptimizerError::EmptyCaption {
            purpose: Purpose::Update,
        });
    }
    Ok(Caption::new(text, caption.iteration + 1))
}

fn ends_sentence(token: &str) -> bool {
    token.trim_end_matches(['"', '\'', ')', ']']).ends_with(['.', '!', '?'])
}

/// Cut `text` to at most `l_max` tokens, at the last sentence end within the
/// limit when there is one. Tokens are rejoined with single spaces.
pub fn truncate_to_limit(text: &str, l_max: usize) -> String {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() <= l_max {
        return tokens.join(" ");
    }
    let head = &tokens[..l_max];
    let keep = head.iter().rposition(|t| ends_sentence(t)).map_or(l_max, |i| i + 1);
    head[..keep].join(" ")
}

/// Shorten an over-long caption: ask the model first, then enforce the limit
/// deterministically. Backend failures fall through to truncation.
pub fn compress(
    ctx: &AgentContext<'_>,
    caption: &Caption,
    l_max: usize,
    iteration: u32,
) -> Result<Caption, OptimizerError> {
    if caption.token_count <= l_max {
        return Ok(caption.clone());
    }
    let bindings = Bindings::new()
        .set("caption", caption.text.as_str())
        .set("limit_tokens", l_max.to_string());
    let (system, user) = ctx.templates.get(Purpose::Compress).render(&bindings)?;
    let request = ctx.backend.request(Purpose::Compress, iteration, system, user);
    let candidate = match ctx.backend.complete(&request) {
        Ok(r) if !r.text.trim().is_empty() => r.text.trim().to_string(),
        Ok(_) => caption.text.clone(),
        Err(e) => {
            tracing::warn!("compression call failed, truncating instead: {e}");
            caption.text.clone()
        }
    };
    let text = if count_tokens(&candidate) > l_max {
        truncate_to_limit(&candidate, l_max)
    } else {
        candidate
    };
    Ok(Caption::new(text, caption.iteration))
}

pub fn caption_similarity(embedder: &dyn Embedder, current: &Caption, previous: &Caption) -> Result<f64, EmbedError> {
    let v = embedder.embed_batch(&[&current.text, &previous.text])?;
    cosine(&v[0], &v[1])
}

pub fn converged(
    embedder: &dyn Embedder,
    current: &Caption,
    previous: &Caption,
    tau_conv: f64,
) -> Result<bool, EmbedError> {
    Ok(caption_similarity(embedder, current, previous)? >= tau_conv)
}

/// Deterministic run identifier derived from the series and configuration.
pub fn derive_run_id(series: &WeatherSeries, config: &RunConfig) -> String {
    let payload = format!(
        "{}\0{}",
        serde_json::to_string(series).expect("series serializes"),
        config.to_toml()
    );
    let station: String = series
        .station_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{station}-{}", &sha256_hex(payload.as_bytes())[..12])
}

/// Final caption and full trace of a successful run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub caption: Caption,
    pub trace: RunTrace,
}

/// Everything needed to run the loop; cheap to share across worker threads.
#[derive(Clone)]
pub struct Engine {
    provider: Arc<dyn CompletionProvider>,
    embedder: Arc<dyn Embedder>,
    templates: TemplateSet,
    defaults: RequestDefaults,
    cache: Option<ResponseCache>,
    config: RunConfig,
    concurrent_agents: bool,
}

impl Engine {
    pub fn new(
        provider: Arc<dyn CompletionProvider>,
        embedder: Arc<dyn Embedder>,
        templates: TemplateSet,
        config: RunConfig,
    ) -> Result<Self, BackendError> {
        Ok(Self {
            defaults: RequestDefaults::from_config(&config.backend)?,
            provider,
            embedder,
            templates,
            cache: None,
            config,
            concurrent_agents: true,
        })
    }

    /// Dispatch the agents of one iteration on separate threads (the
    /// default) or one after another. Results and traces are the same.
    pub fn with_concurrent_agents(mut self, concurrent: bool) -> Self {
        self.concurrent_agents = concurrent;
        self
    }

    pub fn with_cache(mut self, cache: Option<ResponseCache>) -> Self {
        self.cache = cache;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    /// Same provider, embedder and templates under a different configuration.
    pub fn reconfigured(&self, config: RunConfig) -> Result<Self, BackendError> {
        Ok(Self {
            defaults: RequestDefaults::from_config(&config.backend)?,
            config,
            ..self.clone()
        })
    }

    /// A fresh backend with its own call log.
    pub fn backend(&self) -> Backend {
        Backend::new(self.provider.clone(), self.defaults.clone()).with_cache(self.cache.clone())
    }

    fn header(&self, series: &WeatherSeries, run_id: &str) -> TraceHeader {
        TraceHeader {
            run_id: run_id.to_string(),
            config: self.config.clone(),
            template_hashes: self.templates.hashes(),
            templates: self.config.trace.embed_templates.then(|| self.templates.sources()),
            embedder: self.embedder.id().to_string(),
            provider: self.provider.name().to_string(),
            series: series.clone(),
            seed_caption: None,
            seed_calls: Vec::new(),
        }
    }

    /// Run the loop on one series. When `writer` is given, the header and each
    /// iteration are flushed to it as they complete.
    pub fn run(
        &self,
        series: &WeatherSeries,
        run_id: &str,
        mut writer: Option<&mut TraceWriter>,
    ) -> Result<RunOutcome, RunError> {
        let opt = &self.config.optimizer;
        let summary = summarize(series);
        let series_text = serialize_for_prompt(series, &summary, opt.max_rows);
        let summary_text = render_summary(&summary);
        let backend = self.backend();
        let ctx = AgentContext {
            backend: &backend,
            templates: &self.templates,
            series_text: &series_text,
            summary_text: &summary_text,
            limit_tokens: opt.l_max,
        };
        let mut trace = RunTrace::new(self.header(series, run_id));

        let fail = |trace: RunTrace,
                    writer: Option<&mut TraceWriter>,
                    iteration: Option<u32>,
                    stage: &'static str,
                    source: OptimizerError| {
            let mut trace = trace;
            trace.finish_with_error(&source.to_string());
            if let Some(w) = writer {
                if let Err(e) = w.finish(&trace) {
                    tracing::warn!("could not finalize partial trace: {e}");
                }
            }
            RunError {
                iteration,
                stage,
                source,
                trace: Box::new(trace),
            }
        };

        let seed = agents::initial_caption(&ctx, opt.seed_role);
        trace.header.seed_calls = backend.take_calls();
        let seed = match seed {
            Ok(c) => c,
            Err(e) => {
                if let Some(w) = writer.as_deref_mut() {
                    let _ = w.write_header(&trace.header);
                }
                return Err(fail(trace, writer, None, "seed", e.into()));
            }
        };
        trace.header.seed_caption = Some(seed.clone());
        if let Some(w) = writer.as_deref_mut() {
            if let Err(e) = w.write_header(&trace.header) {
                return Err(fail(trace, writer, None, "trace", e.into()));
            }
        }

        let mut current = seed;
        let mut stop = StopReason::KMax;
        for k in 0..opt.iteration_budget() {
            let step = self.step(&ctx, &backend, &current, k);
            let record = match step {
                Ok(r) => r,
                Err((stage, e)) => {
                    // keep the calls that did succeed in the partial trace
                    trace.orphan_calls = backend.take_calls();
                    return Err(fail(trace, writer, Some(k), stage, e));
                }
            };
            if let Some(w) = writer.as_deref_mut() {
                if let Err(e) = w.append_iteration(&record) {
                    return Err(fail(trace, writer, Some(k), "trace", e.into()));
                }
            }
            current = record.caption_after.clone();
            let done = record.convergence_similarity >= opt.tau_conv;
            trace.iterations.push(record);
            if done {
                stop = StopReason::Converged;
                break;
            }
        }

        trace.finish(current.clone(), stop);
        if let Some(w) = writer {
            if let Err(e) = w.finish(&trace) {
                let last = trace.iterations.len() as u32;
                return Err(fail(trace, None, Some(last), "trace", e.into()));
            }
        }
        Ok(RunOutcome {
            caption: current,
            trace,
        })
    }

    fn step(
        &self,
        ctx: &AgentContext<'_>,
        backend: &Backend,
        current: &Caption,
        k: u32,
    ) -> Result<IterationRecord, (&'static str, OptimizerError)> {
        let opt = &self.config.optimizer;
        let gradients = agents::generate_gradients(ctx, &opt.roles, current, k, self.concurrent_agents)
            .map_err(|e| ("gradients", e.into()))?;
        let fused = fusion::fuse(
            backend,
            &self.templates,
            self.embedder.as_ref(),
            &gradients,
            &self.config.fusion,
            k,
            self.config.trace.trace_similarities,
        )
        .map_err(|e| ("fusion", e.into()))?;
        let mut updated =
            apply_gradient(ctx, current, &fused.fused_text, opt.update_intensity, k).map_err(|e| ("update", e))?;
        updated.iteration = k + 1;
        let mut compressed = false;
        if opt.length_constraint_enabled && updated.token_count > opt.l_max {
            updated = compress(ctx, &updated, opt.l_max, k).map_err(|e| ("compress", e))?;
            compressed = true;
        }
        let similarity =
            caption_similarity(self.embedder.as_ref(), &updated, current).map_err(|e| ("convergence", e.into()))?;
        Ok(IterationRecord {
            iteration: k,
            gradients: gradients
                .into_iter()
                .map(|mut g| {
                    g.fragments = without_embeddings(g.fragments);
                    g
                })
                .collect(),
            groups: fused
                .groups
                .iter()
                .map(|g| g.iter().map(|&i| FragmentRef::from(&fused.fragments[i])).collect())
                .collect(),
            consensus: without_embeddings(fused.consensus),
            unique: without_embeddings(fused.unique),
            discarded: without_embeddings(fused.discarded),
            fused_text: fused.fused_text,
            fusion_called: fused.fusion_called,
            caption_before: current.clone(),
            caption_after: updated,
            convergence_similarity: similarity,
            compressed,
            backend_calls: backend.take_calls(),
            similarities: fused.similarities,
        })
    }
}

/// Records keep fragment text only, so a trace equals its parsed file.
fn without_embeddings(mut fragments: Vec<Fragment>) -> Vec<Fragment> {
    for f in &mut fragments {
        f.embedding = None;
    }
    fragments
}
