//! Provider-agnostic chat-completion gateway.
//!
//! - `replay`: deterministic scripted backend keyed by request digest or prompt pattern
//! - `http`: generic JSON chat-completion endpoint with bearer auth
//! - `cache`: content-addressed on-disk response cache
//! - `schedule`: clock abstraction, rate limiter and retry policy
//!
//! [`Gateway`] ties a backend to the cache and scheduler. Batches run on a
//! bounded pool of worker threads; nothing else in the crate spawns threads
//! for model calls.

mod cache;
mod http;
mod replay;
mod schedule;

pub use cache::{CacheEntry, ResponseCache};
pub use http::{HttpBackend, HttpConfig, WireFormat};
pub use replay::{ReplayBackend, ReplayDefault, ReplayScript};
pub use schedule::{Clock, RateLimiter, RetryPolicy, SystemClock, VirtualClock};

use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::util::sha256_hex;

#[derive(Debug, thiserror::Error)]
pub enum GateError {
    #[error("environment variable `{0}` holding the API key is not set")]
    AuthMissing(String),
    #[error("rate limited on every one of {attempts} attempts")]
    RateLimitedExhausted { attempts: u32 },
    /// Single-attempt rate limit signal; retried by the gateway.
    #[error("rate limited by backend")]
    RateLimited,
    #[error("transport error: {message}")]
    Transport { message: String, transient: bool },
    #[error("no scripted response for request digest {0}")]
    ScriptMiss(String),
    #[error("invalid replay script: {0}")]
    ScriptInvalid(String),
    #[error("corrupt cache entry {0}")]
    CacheCorrupt(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl GateError {
    fn retryable(&self) -> bool {
        matches!(self, GateError::RateLimited | GateError::Transport { transient: true, .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub seed: Option<u64>,
}

impl ChatRequest {
    /// Single user message with the default decoding settings
    /// (temperature 0, 2048 output tokens).
    pub fn user_prompt(model_id: impl Into<String>, prompt: impl Into<String>, seed: Option<u64>) -> Self {
        Self {
            model_id: model_id.into(),
            messages: vec![ChatMessage::user(prompt)],
            temperature: 0.0,
            max_output_tokens: 2048,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), GateError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(GateError::InvalidRequest("at least one user message is required".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GateError::InvalidRequest(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.max_output_tokens == 0 {
            return Err(GateError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        if self.model_id.trim().is_empty() {
            return Err(GateError::InvalidRequest("empty model id".into()));
        }
        Ok(())
    }

    /// Stable SHA-256 hex digest over every field.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct Canon<'a> {
            model_id: &'a str,
            messages: &'a [ChatMessage],
            // -0.0 and 0.0 compare equal, so they must hash equal too.
            temperature: f64,
            max_output_tokens: u32,
            seed: Option<u64>,
        }
        let canon = Canon {
            model_id: &self.model_id,
            messages: &self.messages,
            temperature: self.temperature + 0.0,
            max_output_tokens: self.max_output_tokens,
            seed: self.seed,
        };
        sha256_hex(serde_json::to_vec(&canon).expect("request serializes"))
    }

    /// All message contents joined by blank lines.
    pub fn prompt_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
    pub backend_id: String,
    pub cached: bool,
}

/// Approximate token count: `ceil(chars / 4)`.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

/// One attempt against a model provider. Retries, rate limiting and caching
/// are the gateway's job.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GateError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub max_in_flight: usize,
    pub requests_per_minute: u32,
    pub retry: RetryPolicy,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { max_in_flight: 4, requests_per_minute: 600, retry: RetryPolicy::default() }
    }
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    cache: Option<ResponseCache>,
    limiter: RateLimiter,
    retry: RetryPolicy,
    max_in_flight: usize,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.id())
            .field("cache", &self.cache.as_ref().map(ResponseCache::dir))
            .field("max_in_flight", &self.max_in_flight)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, config: &SchedulerConfig) -> Result<Self, GateError> {
        if config.max_in_flight == 0 || config.requests_per_minute == 0 || config.retry.max_attempts == 0 {
            return Err(GateError::InvalidRequest(
                "max_in_flight, requests_per_minute and retry attempts must be positive".into(),
            ));
        }
        Ok(Self {
            backend,
            cache: None,
            limiter: RateLimiter::new(config.requests_per_minute),
            retry: config.retry.clone(),
            max_in_flight: config.max_in_flight,
            clock: Arc::new(SystemClock::new()),
        })
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn limiter(&self) -> &RateLimiter {
        &self.limiter
    }

    /// Sends `request` with rate limiting and exponential-backoff retries.
    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GateError> {
        request.validate()?;
        let mut attempt = 1;
        loop {
            self.limiter.acquire(self.clock.as_ref());
            match self.backend.send(request) {
                Ok(mut r) => {
                    r.cached = false;
                    return Ok(r);
                }
                Err(e) if e.retryable() && attempt < self.retry.max_attempts => {
                    log::warn!("attempt {attempt} failed ({e}); backing off");
                    self.clock.sleep(self.retry.backoff(attempt));
                    attempt += 1;
                }
                Err(GateError::RateLimited) => {
                    return Err(GateError::RateLimitedExhausted { attempts: attempt });
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Like [`Gateway::complete`] but served from the response cache when one
    /// is configured. Corrupt entries are treated as misses and rewritten.
    pub fn complete_cached(&self, request: &ChatRequest) -> Result<ChatResponse, GateError> {
        let Some(cache) = &self.cache else {
            return self.complete(request);
        };
        request.validate()?;
        let digest = request.digest();
        let key = ResponseCache::key(&digest, self.backend.id());
        let slot = cache.lock_key(&key);
        let _held = slot.lock().unwrap_or_else(|p| p.into_inner());
        match cache.get(&key) {
            Ok(Some(mut hit)) => {
                hit.cached = true;
                return Ok(hit);
            }
            Ok(None) => {}
            Err(e) => log::warn!("{e}; treating as a miss"),
        }
        let resp = self.complete(request)?;
        cache.put(&key, &digest, request, &resp)?;
        Ok(resp)
    }

    /// Runs every request through [`Gateway::complete_cached`] on at most
    /// `max_in_flight` worker threads. Results come back in input order,
    /// paired with their keys.
    pub fn execute_batch<K: Send + Sync + Clone>(
        &self,
        items: &[(K, ChatRequest)],
    ) -> Vec<(K, Result<ChatResponse, GateError>)> {
        self.execute_batch_timed(items).into_iter().map(|(k, r, _)| (k, r)).collect()
    }

    /// [`Gateway::execute_batch`] plus wall-clock latency per item.
    pub fn execute_batch_timed<K: Send + Sync + Clone>(
        &self,
        items: &[(K, ChatRequest)],
    ) -> Vec<(K, Result<ChatResponse, GateError>, Duration)> {
        type Slot = Mutex<Option<(Result<ChatResponse, GateError>, Duration)>>;
        let n = items.len();
        let slots: Vec<Slot> = (0..n).map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.max_in_flight.min(n);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= n {
                        break;
                    }
                    let started = Instant::now();
                    let r = self.complete_cached(&items[i].1);
                    *slots[i].lock().expect("slot lock") = Some((r, started.elapsed()));
                });
            }
        });
        items
            .iter()
            .zip(slots)
            .map(|((k, _), slot)| {
                let (r, d) = slot.into_inner().expect("slot lock").expect("every slot filled");
                (k.clone(), r, d)
            })
            .collect()
    }
}
