//! LLM completion providers.
//!
//! Every provider implements [`CompletionProvider`] and is registered by name
//! in a [`ProviderRegistry`]; the run configuration picks one at runtime.
//! [`Backend`] wraps the selected provider with the response cache, request
//! defaults and a call log that feeds the run trace.

mod cache;
mod remote;
mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::BackendConfig;

pub use cache::ResponseCache;
pub use remote::{RemoteProvider, RetryPolicy, API_KEY_ENV};
pub use scripted::{MatchKey, ScriptEntry, ScriptedProvider};

pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_MAX_TOKENS: u32 = 2048;

/// What a backend call is for. Doubles as the scripted-provider role tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Purpose {
    Seed,
    Stat,
    Phys,
    Met,
    Fusion,
    Update,
    Compress,
    Judge,
}

impl Purpose {
    pub const ALL: [Purpose; 8] = [
        Purpose::Seed,
        Purpose::Stat,
        Purpose::Phys,
        Purpose::Met,
        Purpose::Fusion,
        Purpose::Update,
        Purpose::Compress,
        Purpose::Judge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Purpose::Seed => "seed",
            Purpose::Stat => "stat",
            Purpose::Phys => "phys",
            Purpose::Met => "met",
            Purpose::Fusion => "fusion",
            Purpose::Update => "update",
            Purpose::Compress => "compress",
            Purpose::Judge => "judge",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Routing metadata; not sent over the wire and not part of the cache key.
    pub purpose: Purpose,
    pub iteration: u32,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.system_prompt.trim().is_empty() || self.user_prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("prompts must be non-empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Hash of the prompt pair, used by prompt-keyed script entries.
    pub fn prompt_hash(&self) -> String {
        prompt_hash(&self.system_prompt, &self.user_prompt)
    }

    /// Content hash of every field that influences the completion.
    pub fn cache_key(&self) -> String {
        let canonical = serde_json::json!({
            "model": self.model,
            "system_prompt": self.system_prompt,
            "user_prompt": self.user_prompt,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        });
        sha256_hex(canonical.to_string().as_bytes())
    }
}

pub fn prompt_hash(system: &str, user: &str) -> String {
    let mut h = Sha256::new();
    h.update(system.as_bytes());
    h.update([0u8]);
    h.update(user.as_bytes());
    hex::encode(h.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Remote,
    Scripted,
    Cache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub provider: ProviderKind,
    pub latency_ms: u64,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("provider error{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Provider { status: Option<u16>, message: String },
    #[error("request rejected (HTTP {status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("gave up after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: u32, last: Box<BackendError> },
    #[error("script has no entry for ({purpose}, {iteration}) or prompt hash {prompt_hash}")]
    ScriptMiss {
        purpose: Purpose,
        iteration: u32,
        prompt_hash: String,
    },
    #[error("invalid script: {0}")]
    Script(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed provider response: {0}")]
    Decode(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("cache i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            BackendError::RateLimited(_) | BackendError::Timeout(_) | BackendError::Provider { .. }
        )
    }
}

/// A completion provider. Implementations must be callable from several
/// threads at once.
pub trait CompletionProvider: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError>;

    /// Whether successful responses should be written to the response cache.
    fn cacheable(&self) -> bool {
        false
    }
}

/// Whitespace-delimited token count.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

pub type ProviderFactory =
    Box<dyn Fn(&BackendConfig) -> Result<Arc<dyn CompletionProvider>, BackendError> + Send + Sync>;

/// Name-keyed table of provider constructors.
pub struct ProviderRegistry {
    factories: BTreeMap<String, ProviderFactory>,
}

impl ProviderRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    /// Registry holding the `remote` and `scripted` providers.
    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register("remote", |cfg| {
            Ok(Arc::new(RemoteProvider::from_config(cfg)?) as Arc<dyn CompletionProvider>)
        });
        reg.register("scripted", |cfg| {
            let path = cfg
                .script
                .as_ref()
                .ok_or_else(|| BackendError::Config("scripted provider needs `backend.script`".into()))?;
            Ok(Arc::new(ScriptedProvider::from_file(path)?) as Arc<dyn CompletionProvider>)
        });
        reg
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&BackendConfig) -> Result<Arc<dyn CompletionProvider>, BackendError> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(&self, config: &BackendConfig) -> Result<Arc<dyn CompletionProvider>, BackendError> {
        let factory = self.factories.get(&config.provider).ok_or_else(|| {
            BackendError::Config(format!(
                "unknown provider `{}` (known: {})",
                config.provider,
                self.names().join(", ")
            ))
        })?;
        factory(config)
    }
}

impl Default for ProviderRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

/// Sampling parameters applied to every request a [`Backend`] builds.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestDefaults {
    pub model: String,
    pub role_models: BTreeMap<Purpose, String>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for RequestDefaults {
    fn default() -> Self {
        Self {
            model: "default".into(),
            role_models: BTreeMap::new(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

impl RequestDefaults {
    pub fn from_config(cfg: &BackendConfig) -> Result<Self, BackendError> {
        let mut role_models = BTreeMap::new();
        for (role, model) in &cfg.role_models {
            let purpose = Purpose::parse(role)
                .ok_or_else(|| BackendError::Config(format!("unknown role `{role}` in role_models")))?;
            role_models.insert(purpose, model.clone());
        }
        Ok(Self {
            model: cfg.model.clone(),
            role_models,
            temperature: cfg.temperature,
            max_tokens: cfg.max_tokens,
        })
    }

    pub fn model_for(&self, purpose: Purpose) -> &str {
        self.role_models
            .get(&purpose)
            .map(String::as_str)
            .unwrap_or(&self.model)
    }
}

/// One successful backend call as recorded in the run trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub purpose: Purpose,
    pub iteration: u32,
    pub model: String,
    pub prompt_hash: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub provider: ProviderKind,
    pub latency_ms: u64,
    pub response: String,
    pub response_sha256: String,
}

impl CallRecord {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    /// Whether the stored response still matches its recorded hash.
    pub fn is_intact(&self) -> bool {
        sha256_hex(self.response.as_bytes()) == self.response_sha256
    }
}

/// Provider + cache + request defaults + call log for a single run.
///
/// Every successful call lands in the log; [`Backend::take_calls`] drains it
/// in a fixed (iteration, purpose) order so concurrent dispatch does not
/// perturb the trace.
pub struct Backend {
    provider: Arc<dyn CompletionProvider>,
    cache: Option<ResponseCache>,
    defaults: RequestDefaults,
    log: Mutex<Vec<CallRecord>>,
}

impl Backend {
    pub fn new(provider: Arc<dyn CompletionProvider>, defaults: RequestDefaults) -> Self {
        Self {
            provider,
            cache: None,
            defaults,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn with_cache(mut self, cache: Option<ResponseCache>) -> Self {
        self.cache = cache;
        self
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    pub fn defaults(&self) -> &RequestDefaults {
        &self.defaults
    }

    /// Build a request with this backend's model and sampling defaults.
    pub fn request(
        &self,
        purpose: Purpose,
        iteration: u32,
        system_prompt: String,
        user_prompt: String,
    ) -> CompletionRequest {
        CompletionRequest {
            model: self.defaults.model_for(purpose).to_string(),
            system_prompt,
            user_prompt,
            temperature: self.defaults.temperature,
            max_tokens: self.defaults.max_tokens,
            purpose,
            iteration,
        }
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        request.validate()?;
        let cache = self.cache.as_ref().filter(|_| self.provider.cacheable());
        let response = match cache.and_then(|c| c.get(request)) {
            Some(hit) => hit,
            None => {
                let fresh = self.provider.complete(request)?;
                if let Some(c) = cache {
                    if let Err(e) = c.put(request, &fresh) {
                        tracing::warn!("response cache write failed: {e}");
                    }
                }
                fresh
            }
        };
        self.record(request, &response);
        Ok(response)
    }

    fn record(&self, request: &CompletionRequest, response: &CompletionResponse) {
        let record = CallRecord {
            purpose: request.purpose,
            iteration: request.iteration,
            model: request.model.clone(),
            prompt_hash: request.prompt_hash(),
            prompt_tokens: response.prompt_tokens,
            completion_tokens: response.completion_tokens,
            provider: response.provider,
            latency_ms: response.latency_ms,
            response: response.text.clone(),
            response_sha256: sha256_hex(response.text.as_bytes()),
        };
        self.log.lock().expect("call log poisoned").push(record);
    }

    /// Drain recorded calls, ordered by (iteration, purpose); calls sharing
    /// both keep their issue order.
    pub fn take_calls(&self) -> Vec<CallRecord> {
        let mut calls = std::mem::take(&mut *self.log.lock().expect("call log poisoned"));
        calls.sort_by_key(|c| (c.iteration, c.purpose));
        calls
    }
}
