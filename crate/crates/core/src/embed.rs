//! Text embeddings and cosine similarity.
//!
//! Providers implement [`Embedder`] and are registered by name in an
//! [`EmbedderRegistry`]. The `local` provider is a hashed bag of words: it
//! makes fusion and convergence reproducible offline, but it measures lexical
//! overlap, not meaning.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::EmbeddingConfig;

pub const LOCAL_DIMENSION: usize = 256;
pub const REMOTE_BATCH: usize = 64;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub provider_id: String,
}

impl EmbeddingVector {
    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    fn normalized(mut values: Vec<f64>, provider_id: &str) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Self {
            values,
            provider_id: provider_id.to_string(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("embedding dimensions differ ({left} vs {right})")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embeddings come from different providers ({left} vs {right})")]
    ProviderMismatch { left: String, right: String },
    #[error("cosine is undefined for a zero vector")]
    ZeroVector,
    #[error("embedding provider error: {0}")]
    Provider(String),
    #[error("embedding configuration: {0}")]
    Config(String),
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.provider_id != b.provider_id {
        return Err(EmbedError::ProviderMismatch {
            left: a.provider_id.clone(),
            right: b.provider_id.clone(),
        });
    }
    if a.dimension() != b.dimension() {
        return Err(EmbedError::DimensionMismatch {
            left: a.dimension(),
            right: b.dimension(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub trait Embedder: Send + Sync {
    fn id(&self) -> &str;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        Ok(self.embed_batch(&[text])?.pop().expect("one embedding per input"))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Lowercased, punctuation-free whitespace tokens.
pub fn bag_of_words_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Hashed bag-of-words embedder (FNV-1a into 256 buckets, L2-normalized).
#[derive(Debug, Clone, Default)]
pub struct LocalEmbedder;

impl LocalEmbedder {
    pub const ID: &'static str = "local-bow-fnv1a-256";

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let mut counts = vec![0.0; LOCAL_DIMENSION];
        for token in bag_of_words_tokens(text) {
            counts[(fnv1a(token.as_bytes()) % LOCAL_DIMENSION as u64) as usize] += 1.0;
        }
        EmbeddingVector::normalized(counts, Self::ID)
    }
}

impl Embedder for LocalEmbedder {
    fn id(&self) -> &str {
        Self::ID
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// HTTP embedding endpoint: POST `{model, input: [texts]}`, response either a
/// bare list of vectors or `{data: [{embedding: [...]}]}`.
pub struct RemoteEmbedder {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    id: String,
}

impl RemoteEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
    ) -> Result<Self, EmbedError> {
        let model = model.into();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| EmbedError::Config(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            id: format!("remote:{model}"),
            model,
            api_key,
            client,
        })
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let mut req = self
            .client
            .post(&self.endpoint)
            .json(&serde_json::json!({ "model": self.model, "input": texts }));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| EmbedError::Provider(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| EmbedError::Provider(e.to_string()))?;
        if !status.is_success() {
            return Err(EmbedError::Provider(format!("HTTP {status}: {body}")));
        }
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Body {
            Bare(Vec<Vec<f64>>),
            Wrapped { data: Vec<Item> },
        }
        #[derive(Deserialize)]
        struct Item {
            embedding: Vec<f64>,
        }
        let vectors = match serde_json::from_str::<Body>(&body)
            .map_err(|e| EmbedError::Provider(format!("bad embedding response: {e}")))?
        {
            Body::Bare(v) => v,
            Body::Wrapped { data } => data.into_iter().map(|i| i.embedding).collect(),
        };
        if vectors.len() != texts.len() {
            return Err(EmbedError::Provider(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                vectors.len()
            )));
        }
        Ok(vectors)
    }
}

impl Embedder for RemoteEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let mut out: Vec<Option<EmbeddingVector>> = vec![None; texts.len()];
        let pending: Vec<usize> = (0..texts.len())
            .filter(|&i| !bag_of_words_tokens(texts[i]).is_empty())
            .collect();
        let mut dimension = None;
        for chunk in pending.chunks(REMOTE_BATCH) {
            let batch: Vec<&str> = chunk.iter().map(|&i| texts[i]).collect();
            for (&i, values) in chunk.iter().zip(self.request(&batch)?) {
                if values.iter().all(|&v| v == 0.0) || values.iter().any(|v| !v.is_finite()) {
                    return Err(EmbedError::Provider("degenerate vector for non-empty text".into()));
                }
                match dimension {
                    None => dimension = Some(values.len()),
                    Some(d) if d != values.len() => {
                        return Err(EmbedError::DimensionMismatch {
                            left: d,
                            right: values.len(),
                        })
                    }
                    _ => {}
                }
                out[i] = Some(EmbeddingVector::normalized(values, &self.id));
            }
        }
        let dim = dimension.unwrap_or(0);
        Ok(out
            .into_iter()
            .map(|v| {
                v.unwrap_or_else(|| EmbeddingVector {
                    values: vec![0.0; dim],
                    provider_id: self.id.clone(),
                })
            })
            .collect())
    }
}

pub type EmbedderFactory = Box<dyn Fn(&EmbeddingConfig) -> Result<Arc<dyn Embedder>, EmbedError> + Send + Sync>;

/// Name-keyed table of embedder constructors.
pub struct EmbedderRegistry {
    factories: BTreeMap<String, EmbedderFactory>,
}

impl EmbedderRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register("local", |_| Ok(Arc::new(LocalEmbedder) as Arc<dyn Embedder>));
        reg.register("remote", |cfg| {
            let endpoint = cfg
                .endpoint
                .clone()
                .ok_or_else(|| EmbedError::Config("remote embedding needs `embedding.endpoint`".into()))?;
            let model = cfg.model.clone().unwrap_or_else(|| "default".into());
            let key = std::env::var(crate::backend::API_KEY_ENV).ok();
            Ok(Arc::new(RemoteEmbedder::new(endpoint, model, key)?) as Arc<dyn Embedder>)
        });
        reg
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&EmbeddingConfig) -> Result<Arc<dyn Embedder>, EmbedError> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn build(&self, cfg: &EmbeddingConfig) -> Result<Arc<dyn Embedder>, EmbedError> {
        let factory = self
            .factories
            .get(&cfg.provider)
            .ok_or_else(|| EmbedError::Config(format!("unknown embedding provider `{}`", cfg.provider)))?;
        factory(cfg)
    }
}

impl Default for EmbedderRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}
