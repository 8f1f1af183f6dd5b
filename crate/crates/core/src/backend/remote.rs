use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use super::{count_tokens, BackendError, CompletionProvider, CompletionRequest, CompletionResponse, ProviderKind};
use crate::config::BackendConfig;

/// Environment variable holding the bearer credential.
pub const API_KEY_ENV: &str = "WEATHERTGD_API_KEY";

/// Exponential backoff for transient failures.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay.mul_f64(self.factor.powi(retry as i32))
    }
}

/// Chat-completions client over HTTP.
pub struct RemoteProvider {
    endpoint: String,
    api_key: String,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    attempts: AtomicUsize,
}

impl RemoteProvider {
    pub fn new(
        endpoint: impl Into<String>,
        api_key: impl Into<String>,
        timeout: Duration,
        retry: RetryPolicy,
    ) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            client,
            retry,
            attempts: AtomicUsize::new(0),
        })
    }

    pub fn from_config(cfg: &BackendConfig) -> Result<Self, BackendError> {
        let endpoint = cfg
            .endpoint
            .clone()
            .ok_or_else(|| BackendError::Config("remote provider needs `backend.endpoint`".into()))?;
        let api_key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| BackendError::Auth(format!("{API_KEY_ENV} is not set")))?;
        Self::new(
            endpoint,
            api_key,
            Duration::from_secs(cfg.timeout_secs),
            RetryPolicy::default(),
        )
    }

    /// HTTP attempts made so far, retries included.
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::SeqCst)
    }

    fn attempt(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        let body = json!({
            "model": request.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let started = Instant::now();
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(transport_error)?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(transport_error)?;
        if !(200..300).contains(&status) {
            return Err(status_error(status, text));
        }
        let latency_ms = started.elapsed().as_millis() as u64;
        let parsed: ChatResponse = serde_json::from_str(&text).map_err(|e| BackendError::Decode(e.to_string()))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Decode("response has no choices[0].message.content".into()))?;
        let usage = parsed.usage.unwrap_or_default();
        Ok(CompletionResponse {
            prompt_tokens: usage
                .prompt_tokens
                .unwrap_or_else(|| (count_tokens(&request.system_prompt) + count_tokens(&request.user_prompt)) as u64),
            completion_tokens: usage.completion_tokens.unwrap_or_else(|| count_tokens(&content) as u64),
            text: content,
            provider: ProviderKind::Remote,
            latency_ms,
        })
    }
}

fn transport_error(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout(e.to_string())
    } else {
        BackendError::Provider {
            status: None,
            message: e.to_string(),
        }
    }
}

fn status_error(status: u16, body: String) -> BackendError {
    match status {
        401 | 403 => BackendError::Auth(body),
        408 => BackendError::Timeout(body),
        429 => BackendError::RateLimited(body),
        500..=599 => BackendError::Provider {
            status: Some(status),
            message: body,
        },
        _ => BackendError::Rejected { status, message: body },
    }
}

impl CompletionProvider for RemoteProvider {
    fn name(&self) -> &str {
        "remote"
    }

    fn cacheable(&self) -> bool {
        true
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(request) {
                Ok(r) => return Ok(r),
                Err(e) if e.is_retryable() && attempts <= self.retry.max_retries => {
                    let wait = self.retry.delay(attempts - 1);
                    tracing::warn!("attempt {attempts} failed ({e}); retrying in {wait:?}");
                    std::thread::sleep(wait);
                }
                Err(e) if e.is_retryable() => {
                    return Err(BackendError::ExhaustedRetries {
                        attempts,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<Choice>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

#[derive(Deserialize, Default)]
struct Usage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_from_one_second() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay(0), Duration::from_secs(1));
        assert_eq!(p.delay(1), Duration::from_secs(2));
        assert_eq!(p.delay(2), Duration::from_secs(4));
    }

    #[test]
    fn status_mapping() {
        assert!(matches!(status_error(401, String::new()), BackendError::Auth(_)));
        assert!(matches!(status_error(429, String::new()), BackendError::RateLimited(_)));
        assert!(status_error(503, String::new()).is_retryable());
        assert!(!status_error(400, String::new()).is_retryable());
        assert!(!status_error(403, String::new()).is_retryable());
    }
}
