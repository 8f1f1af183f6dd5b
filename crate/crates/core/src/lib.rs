//! Multi-agent caption refinement for weather time series.
//!
//! Three specialist agents critique a caption; their critiques are split
//! into fragments, grouped by embedding similarity into consensus and unique
//! views, fused into one instruction, and applied as an update. The loop
//! repeats until successive captions stop changing or the iteration budget
//! runs out.

pub mod ablation;
pub mod agents;
pub mod backend;
pub mod config;
pub mod embed;
pub mod eval;
pub mod fusion;
pub mod optimizer;
pub mod replay;
pub mod series;
pub mod templates;
pub mod trace;

pub use config::{ConfigOverrides, RunConfig};
pub use optimizer::{derive_run_id, Caption, Engine, RunError, RunOutcome};
pub use series::{parse_series, summarize, WeatherSeries};
pub use trace::{RunTrace, TraceWriter};
