use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{
    count_tokens, BackendError, CompletionProvider, CompletionRequest, CompletionResponse, ProviderKind, Purpose,
};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatchKey {
    Role { role: Purpose, iteration: u32 },
    Prompt { prompt_hash: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(flatten)]
    pub key: MatchKey,
    pub response: String,
}

impl ScriptEntry {
    pub fn role(role: Purpose, iteration: u32, response: impl Into<String>) -> Self {
        Self {
            key: MatchKey::Role { role, iteration },
            response: response.into(),
        }
    }

    pub fn prompt(prompt_hash: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            key: MatchKey::Prompt {
                prompt_hash: prompt_hash.into(),
            },
            response: response.into(),
        }
    }
}

/// Deterministic provider answering from a fixed script.
///
/// Lookup tries the (role, iteration) key first and then the prompt hash.
pub struct ScriptedProvider {
    entries: HashMap<MatchKey, String>,
    calls: AtomicUsize,
}

impl ScriptedProvider {
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self, BackendError> {
        let mut map = HashMap::with_capacity(entries.len());
        for entry in entries {
            if map.insert(entry.key.clone(), entry.response).is_some() {
                return Err(BackendError::Script(format!("duplicate key {:?}", entry.key)));
            }
        }
        Ok(Self {
            entries: map,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn from_json(text: &str) -> Result<Self, BackendError> {
        let entries: Vec<ScriptEntry> = serde_json::from_str(text).map_err(|e| BackendError::Script(e.to_string()))?;
        Self::new(entries)
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| BackendError::Script(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Number of requests answered so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl CompletionProvider for ScriptedProvider {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let by_role = MatchKey::Role {
            role: request.purpose,
            iteration: request.iteration,
        };
        let hash = request.prompt_hash();
        let text = match self.entries.get(&by_role) {
            Some(t) => t,
            None => self
                .entries
                .get(&MatchKey::Prompt {
                    prompt_hash: hash.clone(),
                })
                .ok_or(BackendError::ScriptMiss {
                    purpose: request.purpose,
                    iteration: request.iteration,
                    prompt_hash: hash,
                })?,
        };
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(CompletionResponse {
            text: text.clone(),
            prompt_tokens: (count_tokens(&request.system_prompt) + count_tokens(&request.user_prompt)) as u64,
            completion_tokens: count_tokens(text) as u64,
            provider: ProviderKind::Scripted,
            latency_ms: 0,
        })
    }
}
