//! Ablation variants of the full configuration and their comparison table.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::agents::AgentRole;
use crate::backend::Purpose;
use crate::config::RunConfig;
use crate::optimizer::{Engine, RunError, RunOutcome};
use crate::series::WeatherSeries;
use crate::trace::{RunTrace, TraceWriter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AblationVariant {
    Full,
    NoConsensusFusion,
    NoUniqueViews,
    NoPhysics,
    NoMeteorology,
    NoStatistical,
    SinglePass,
    NoLengthConstraint,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 8] = [
        AblationVariant::Full,
        AblationVariant::NoConsensusFusion,
        AblationVariant::NoUniqueViews,
        AblationVariant::NoPhysics,
        AblationVariant::NoMeteorology,
        AblationVariant::NoStatistical,
        AblationVariant::SinglePass,
        AblationVariant::NoLengthConstraint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoConsensusFusion => "no-consensus-fusion",
            AblationVariant::NoUniqueViews => "no-unique-views",
            AblationVariant::NoPhysics => "no-physics-agent",
            AblationVariant::NoMeteorology => "no-meteorology-agent",
            AblationVariant::NoStatistical => "no-statistical-agent",
            AblationVariant::SinglePass => "single-pass",
            AblationVariant::NoLengthConstraint => "no-length-constraint",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Full => "all components",
            AblationVariant::NoConsensusFusion => "gradients concatenated, no fusion call",
            AblationVariant::NoUniqueViews => "consensus only, unique views dropped",
            AblationVariant::NoPhysics => "statistical and meteorology agents",
            AblationVariant::NoMeteorology => "statistical and physics agents",
            AblationVariant::NoStatistical => "physics and meteorology agents",
            AblationVariant::SinglePass => "one refinement iteration",
            AblationVariant::NoLengthConstraint => "no compression step",
        }
    }

    fn removed_role(self) -> Option<AgentRole> {
        match self {
            AblationVariant::NoPhysics => Some(AgentRole::Phys),
            AblationVariant::NoMeteorology => Some(AgentRole::Met),
            AblationVariant::NoStatistical => Some(AgentRole::Stat),
            _ => None,
        }
    }

    /// `base` with this variant's component switched off. A removed agent
    /// that was the seed author hands seeding to the first remaining agent.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoConsensusFusion => cfg.fusion.enabled = false,
            AblationVariant::NoUniqueViews => cfg.fusion.unique_integration = false,
            AblationVariant::SinglePass => cfg.optimizer.single_pass = true,
            AblationVariant::NoLengthConstraint => cfg.optimizer.length_constraint_enabled = false,
            AblationVariant::NoPhysics | AblationVariant::NoMeteorology | AblationVariant::NoStatistical => {
                let removed = self.removed_role().expect("agent variant");
                cfg.optimizer.roles.retain(|r| *r != removed);
                if cfg.optimizer.seed_role == removed {
                    if let Some(&first) = cfg.optimizer.roles.first() {
                        cfg.optimizer.seed_role = first;
                    }
                }
            }
        }
        cfg
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown ablation variant `{s}`"))
    }
}

pub struct AblationOutcome {
    pub variant: AblationVariant,
    pub run_id: String,
    pub result: Result<RunOutcome, RunError>,
}

impl AblationOutcome {
    pub fn trace(&self) -> &RunTrace {
        match &self.result {
            Ok(o) => &o.trace,
            Err(e) => &e.trace,
        }
    }
}

/// Run every variant on `series`. Failures are kept per variant; one failing
/// variant does not stop the others. Traces go to `trace_dir` when given.
pub fn run_ablation(
    engine: &Engine,
    series: &WeatherSeries,
    base_run_id: &str,
    trace_dir: Option<&Path>,
) -> Vec<AblationOutcome> {
    AblationVariant::ALL
        .iter()
        .map(|&variant| {
            let run_id = format!("{base_run_id}-{variant}");
            let result = run_variant(engine, variant, series, &run_id, trace_dir);
            AblationOutcome {
                variant,
                run_id,
                result,
            }
        })
        .collect()
}

fn run_variant(
    engine: &Engine,
    variant: AblationVariant,
    series: &WeatherSeries,
    run_id: &str,
    trace_dir: Option<&Path>,
) -> Result<RunOutcome, RunError> {
    let cfg = variant.apply(engine.config());
    let variant_engine = engine.reconfigured(cfg).expect("backend section unchanged by ablation");
    let mut writer = match trace_dir.map(|d| TraceWriter::create(d, run_id)).transpose() {
        Ok(w) => w,
        Err(e) => {
            tracing::warn!("{variant}: trace file unavailable, running without it: {e}");
            None
        }
    };
    variant_engine.run(series, run_id, writer.as_mut())
}

/// One row of the comparison table.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub label: String,
    pub status: String,
    pub iterations: usize,
    pub stop_reason: String,
    pub gradient_calls: usize,
    pub total_calls: u64,
    pub total_tokens: u64,
    pub caption_tokens: Option<usize>,
    pub sa: Option<f64>,
    pub pc: Option<f64>,
    pub mr: Option<f64>,
    pub oq: Option<f64>,
    pub caption: String,
    pub error: String,
}

impl AblationRow {
    pub fn from_outcome(o: &AblationOutcome) -> Self {
        let trace = o.trace();
        let totals = trace.totals();
        let gradient_calls = trace
            .iterations
            .iter()
            .flat_map(|i| &i.backend_calls)
            .filter(|c| matches!(c.purpose, Purpose::Stat | Purpose::Phys | Purpose::Met))
            .count();
        let caption = trace.final_caption();
        Self {
            variant: o.variant.name().into(),
            label: o.variant.label().into(),
            status: if o.result.is_ok() { "ok" } else { "failed" }.into(),
            iterations: trace.iterations.len(),
            stop_reason: trace.stop_reason().map_or("incomplete", |s| s.as_str()).into(),
            gradient_calls,
            total_calls: totals.calls,
            total_tokens: totals.total_tokens(),
            caption_tokens: caption.map(|c| c.token_count),
            caption: caption.map(|c| c.text.clone()).unwrap_or_default(),
            error: o.result.as_ref().err().map(|e| e.to_string()).unwrap_or_default(),
            ..Default::default()
        }
    }
}

pub fn comparison_csv(rows: &[AblationRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}
