//! Run configuration: TOML file, built-in defaults, and command-line overrides.
//!
//! Precedence is flags > file > defaults. Every section and key is optional;
//! unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::AgentRole;
use crate::backend::{DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE};
use crate::fusion::FusionConfig;
use crate::optimizer::OptimizerConfig;

pub const DEFAULT_ENDPOINT: &str = "https://openrouter.ai/api/v1/chat/completions";
pub const DEFAULT_MODEL: &str = "qwen/qwen3-next-80b-a3b-instruct";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// Registered provider name: `remote` or `scripted`.
    pub provider: String,
    pub endpoint: Option<String>,
    pub model: String,
    /// Per-purpose model overrides keyed by `stat`, `phys`, `met`, `seed`,
    /// `fusion`, `update`, `compress` or `judge`.
    pub role_models: BTreeMap<String, String>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Script file for the scripted provider.
    pub script: Option<PathBuf>,
    pub timeout_secs: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            provider: "remote".into(),
            endpoint: Some(DEFAULT_ENDPOINT.into()),
            model: DEFAULT_MODEL.into(),
            role_models: BTreeMap::new(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            script: None,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// `local` (hashed bag of words) or `remote`.
    pub provider: String,
    pub endpoint: Option<String>,
    pub model: Option<String>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            provider: "local".into(),
            endpoint: None,
            model: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplatesConfig {
    /// Directory of template overrides; built-in templates fill the rest.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    pub dir: PathBuf,
    pub trace_similarities: bool,
    pub embed_templates: bool,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("traces"),
            trace_similarities: false,
            embed_templates: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub dir: PathBuf,
    pub enabled: bool,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from(".weathertgd-cache"),
            enabled: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendConfig,
    pub embedding: EmbeddingConfig,
    pub fusion: FusionConfig,
    pub optimizer: OptimizerConfig,
    pub templates: TemplatesConfig,
    pub trace: TraceConfig,
    pub cache: CacheConfig,
}

/// Values supplied on the command line; `None` leaves the file value alone.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub trace_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub seed_role: Option<AgentRole>,
    pub trace_similarities: Option<bool>,
    pub embed_templates: Option<bool>,
    pub script: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Defaults when `path` is `None`, otherwise the parsed file.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn apply(&mut self, o: &ConfigOverrides) {
        if let Some(d) = &o.trace_dir {
            self.trace.dir = d.clone();
        }
        if let Some(d) = &o.cache_dir {
            self.cache.dir = d.clone();
        }
        if let Some(r) = o.seed_role {
            self.optimizer.seed_role = r;
        }
        if let Some(b) = o.trace_similarities {
            self.trace.trace_similarities = b;
        }
        if let Some(b) = o.embed_templates {
            self.trace.embed_templates = b;
        }
        if let Some(s) = &o.script {
            self.backend.provider = "scripted".into();
            self.backend.script = Some(s.clone());
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let b = &self.backend;
        if !(0.0..=2.0).contains(&b.temperature) {
            return invalid(format!("backend.temperature {} outside [0, 2]", b.temperature));
        }
        if b.max_tokens == 0 {
            return invalid("backend.max_tokens must be positive".into());
        }
        for role in b.role_models.keys() {
            if crate::backend::Purpose::parse(role).is_none() {
                return invalid(format!("backend.role_models: unknown role `{role}`"));
            }
        }
        self.fusion.validate().map_err(ConfigError::Invalid)?;
        self.optimizer.validate().map_err(ConfigError::Invalid)?;
        Ok(())
    }
}
