//! Uniform client over VLM inference backends.
//!
//! Both local model servers and hosted APIs are reached through one
//! chat-completions style wire shape ([`HttpChatBackend`]); [`MockBackend`]
//! replays scripted replies for tests and dry runs. [`Gateway`] adds retries
//! with exponential backoff and a bounded worker pool on top of a backend.

mod http;
mod mock;
mod pool;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::prompt::RenderedPrompt;

pub use http::{build_chat_body, extract_reply, HttpChatBackend, Secret};
pub use mock::{MockBackend, MockReply, MockRule, MockScript, MockStats};
pub use pool::for_each_bounded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpChat,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackoffConfig {
    pub base_ms: u64,
    pub factor: f64,
    /// Relative jitter: each delay is scaled by a uniform factor in `[1 - j, 1 + j]`.
    pub jitter: f64,
}

impl Default for BackoffConfig {
    fn default() -> Self {
        BackoffConfig {
            base_ms: 1000,
            factor: 2.0,
            jitter: 0.2,
        }
    }
}

impl BackoffConfig {
    /// Nominal delay before retry number `retry` (0-based), without jitter.
    pub fn nominal(&self, retry: u32) -> Duration {
        Duration::from_secs_f64(self.base_ms as f64 / 1000.0 * self.factor.powi(retry as i32))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    /// Label used in run records; defaults to `model_tag`.
    #[serde(default)]
    pub name: Option<String>,
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    pub model_tag: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_max_parallel")]
    pub max_parallel: usize,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub backoff: BackoffConfig,
    /// Mock only: JSON script file.
    #[serde(default)]
    pub mock_script: Option<PathBuf>,
}

fn default_max_output_tokens() -> u32 {
    512
}
fn default_timeout_secs() -> f64 {
    120.0
}
fn default_max_retries() -> u32 {
    3
}
fn default_max_parallel() -> usize {
    1
}

impl BackendConfig {
    pub fn mock(model_tag: impl Into<String>) -> Self {
        BackendConfig {
            name: None,
            kind: BackendKind::Mock,
            endpoint: None,
            model_tag: model_tag.into(),
            temperature: 0.0,
            max_output_tokens: default_max_output_tokens(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            max_parallel: default_max_parallel(),
            api_key_env: None,
            backoff: BackoffConfig::default(),
            mock_script: None,
        }
    }

    pub fn label(&self) -> &str {
        self.name.as_deref().unwrap_or(&self.model_tag)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::Config(m));
        if self.model_tag.trim().is_empty() {
            return bad("model_tag must not be empty".into());
        }
        if self.kind == BackendKind::HttpChat
            && self.endpoint.as_deref().is_none_or(|e| e.trim().is_empty())
        {
            return bad(format!("backend {}: http_chat requires an endpoint", self.label()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad(format!("temperature {} must be finite and >= 0", self.temperature));
        }
        if self.max_parallel == 0 {
            return bad("max_parallel must be at least 1".into());
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return bad(format!("timeout_secs {} must be positive", self.timeout_secs));
        }
        if !(0.0..1.0).contains(&self.backoff.jitter) || self.backoff.factor < 1.0 {
            return bad("backoff needs jitter in [0, 1) and factor >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmRequest {
    pub prompt: RenderedPrompt,
    /// Attached in order to the last user turn.
    pub images: Vec<RgbImage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmResponse {
    /// Model text exactly as returned.
    pub raw_text: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// Identifies one attempt of one request, as seen by a backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallContext {
    pub request_index: u64,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: String,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// Failure of a single attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttemptError {
    Network(String),
    Status { code: u16, body: String },
    Timeout,
    /// The server answered 2xx but the body was unusable.
    BadResponse(String),
}

impl AttemptError {
    pub fn is_transient(&self) -> bool {
        match self {
            AttemptError::Network(_) | AttemptError::Timeout => true,
            AttemptError::Status { code, .. } => *code == 429 || (500..600).contains(code),
            AttemptError::BadResponse(_) => false,
        }
    }
}

impl fmt::Display for AttemptError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttemptError::Network(m) => write!(f, "network error: {m}"),
            AttemptError::Status { code, body } => write!(f, "HTTP {code}: {body}"),
            AttemptError::Timeout => f.write_str("timed out"),
            AttemptError::BadResponse(m) => write!(f, "unusable response: {m}"),
        }
    }
}

pub trait Backend: Send + Sync {
    fn call(
        &self,
        request: &VlmRequest,
        model_tag: &str,
        ctx: CallContext,
    ) -> Result<BackendReply, AttemptError>;
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("backend config: {0}")]
    Config(String),
    #[error("request has {images} images but the prompt expects {slots}")]
    InvalidRequest { images: usize, slots: usize },
    #[error("transport error after {attempts} attempts: {last}")]
    Transport { attempts: u32, last: String },
    #[error("timed out on all {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("permanent error after {attempts} attempts: {detail}")]
    Permanent { attempts: u32, detail: String },
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Retrying, concurrency-bounded front end to one backend.
pub struct Gateway {
    config: BackendConfig,
    backend: Arc<dyn Backend>,
    jitter_rng: Mutex<ChaCha8Rng>,
    sleeper: Sleeper,
    next_request: AtomicU64,
}

impl Gateway {
    pub fn new(config: BackendConfig, backend: Arc<dyn Backend>) -> Result<Self, GatewayError> {
        config.validate()?;
        Ok(Gateway {
            config,
            backend,
            jitter_rng: Mutex::new(ChaCha8Rng::seed_from_u64(0)),
            sleeper: Arc::new(std::thread::sleep),
            next_request: AtomicU64::new(0),
        })
    }

    /// Build the backend named by `config.kind`.
    pub fn from_config(config: BackendConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let backend: Arc<dyn Backend> = match config.kind {
            BackendKind::HttpChat => Arc::new(HttpChatBackend::from_config(&config)?),
            BackendKind::Mock => {
                let script = match &config.mock_script {
                    Some(path) => MockScript::load(path)?,
                    None => MockScript::default(),
                };
                Arc::new(MockBackend::new(script))
            }
        };
        Self::new(config, backend)
    }

    pub fn with_seed(self, seed: u64) -> Self {
        *self.jitter_rng.lock().unwrap_or_else(|e| e.into_inner()) = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn backoff_delay(&self, retry: u32) -> Duration {
        let nominal = self.config.backoff.nominal(retry).as_secs_f64();
        let j = self.config.backoff.jitter;
        let scale = if j > 0.0 {
            self.jitter_rng
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .random_range(1.0 - j..=1.0 + j)
        } else {
            1.0
        };
        Duration::from_secs_f64(nominal * scale)
    }

    fn send_indexed(&self, request: &VlmRequest, request_index: u64) -> Result<VlmResponse, GatewayError> {
        if request.images.len() != request.prompt.image_slots {
            return Err(GatewayError::InvalidRequest {
                images: request.images.len(),
                slots: request.prompt.image_slots,
            });
        }
        let started = Instant::now();
        let max_attempts = self.config.max_retries + 1;
        let mut attempt = 0;
        loop {
            let ctx = CallContext { request_index, attempt };
            let result = self.backend.call(request, &self.config.model_tag, ctx);
            attempt += 1;
            match result {
                Ok(reply) => {
                    return Ok(VlmResponse {
                        raw_text: reply.text,
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempt_count: attempt,
                        metadata: reply.metadata,
                    })
                }
                Err(e) if !e.is_transient() => {
                    return Err(GatewayError::Permanent {
                        attempts: attempt,
                        detail: e.to_string(),
                    })
                }
                Err(e) if attempt >= max_attempts => {
                    tracing::warn!(backend = self.config.label(), attempts = attempt, "giving up: {e}");
                    return Err(match e {
                        AttemptError::Timeout => GatewayError::Timeout { attempts: attempt },
                        other => GatewayError::Transport {
                            attempts: attempt,
                            last: other.to_string(),
                        },
                    });
                }
                Err(e) => {
                    let delay = self.backoff_delay(attempt - 1);
                    tracing::debug!(backend = self.config.label(), attempt, ?delay, "retrying: {e}");
                    (self.sleeper)(delay);
                }
            }
        }
    }

    /// Send one request, retrying transient failures with backoff.
    pub fn send(&self, request: &VlmRequest) -> Result<VlmResponse, GatewayError> {
        let index = self.next_request.fetch_add(1, Ordering::SeqCst);
        self.send_indexed(request, index)
    }

    /// Send many requests with at most `max_parallel` in flight. Results keep
    /// input order; one failure never cancels the others.
    pub fn send_batch(&self, requests: &[VlmRequest]) -> Vec<Result<VlmResponse, GatewayError>> {
        let base = self
            .next_request
            .fetch_add(requests.len() as u64, Ordering::SeqCst);
        let slots: Vec<Mutex<Option<Result<VlmResponse, GatewayError>>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();
        for_each_bounded(
            requests.len(),
            self.config.max_parallel,
            |i| self.send_indexed(&requests[i], base + i as u64),
            |i, result| *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(result),
        );
        slots
            .into_iter()
            .map(|s| {
                s.into_inner()
                    .unwrap_or_else(|e| e.into_inner())
                    .expect("every slot filled")
            })
            .collect()
    }
}
