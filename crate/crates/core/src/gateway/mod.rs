//! Black-box completion access for the four model roles.
//!
//! Every teacher, student, judge and selector call goes through
//! [`Gateway::complete`], which applies the role's rate limit, retries
//! transient backend failures with exponential backoff, and appends one entry
//! per call to the run transcript.

mod http;
mod mock;
mod structured;

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::model::digest_hex;

pub use http::{HttpChatBackend, HttpChatConfig};
pub use mock::{MockBackend, MockRule, MockScript, MockScriptError};
pub use structured::{extract_first_object, FieldKind, FieldSpec, StructuredRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Student,
    Teacher,
    Judge,
    Selector,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Student, Role::Teacher, Role::Judge, Role::Selector];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Student => "student",
            Role::Teacher => "teacher",
            Role::Judge => "judge",
            Role::Selector => "selector",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s.trim())
            .ok_or_else(|| format!("unknown role {s:?}"))
    }
}

pub const DEFAULT_MAX_TOKENS: u32 = 2048;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionRequest {
    pub role: Role,
    pub system_prompt: String,
    pub user_prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl CompletionRequest {
    pub fn new(
        role: Role,
        system_prompt: impl Into<String>,
        user_prompt: impl Into<String>,
    ) -> Self {
        Self {
            role,
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: 0.0,
        }
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    /// Stable hash of `(role, system prompt, user prompt)`.
    pub fn fingerprint(&self) -> String {
        fingerprint(self.role, &self.system_prompt, &self.user_prompt)
    }
}

pub fn fingerprint(role: Role, system_prompt: &str, user_prompt: &str) -> String {
    let mut buf = String::with_capacity(system_prompt.len() + user_prompt.len() + 16);
    buf.push_str(role.as_str());
    buf.push('\u{0}');
    buf.push_str(system_prompt);
    buf.push('\u{0}');
    buf.push_str(user_prompt);
    digest_hex(buf)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    /// Worth retrying: timeouts, connection resets, 429/5xx.
    #[error("transient: {0}")]
    Transient(String),
    #[error("{0}")]
    Fatal(String),
}

pub trait Backend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("role {0} is not configured")]
    UnconfiguredRole(Role),
    #[error("{role}: gave up after {attempts} attempts: {last}")]
    ExhaustedRetries {
        role: Role,
        attempts: u32,
        last: String,
    },
    #[error("{role}: backend error: {message}")]
    Backend { role: Role, message: String },
    #[error("{role}: no usable structured reply after {attempts} attempts: {last}")]
    StructuredParse {
        role: Role,
        attempts: u32,
        last: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts per call, first one included.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    /// Delay before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u32
            .checked_shl(retry.saturating_sub(1))
            .unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Token bucket: `capacity` burst, refilled at `per_second`.
#[derive(Debug)]
pub struct RateLimiter {
    capacity: f64,
    per_second: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(requests_per_minute: f64, burst: u32) -> Self {
        let capacity = f64::from(burst.max(1));
        Self {
            capacity,
            per_second: requests_per_minute / 60.0,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Blocks until a token is available.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().expect("rate limiter poisoned");
                let now = Instant::now();
                let refill = now.duration_since(state.1).as_secs_f64() * self.per_second;
                state.0 = (state.0 + refill).min(self.capacity);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - state.0) / self.per_second)
            };
            std::thread::sleep(wait);
        }
    }
}

pub struct RoleBinding {
    pub backend: Arc<dyn Backend>,
    pub retry: RetryPolicy,
    pub limiter: Option<RateLimiter>,
}

impl RoleBinding {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            limiter: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_limiter(mut self, limiter: RateLimiter) -> Self {
        self.limiter = Some(limiter);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub role: Role,
    pub request_digest: String,
    #[serde(flatten)]
    pub outcome: TranscriptOutcome,
    pub attempts: u32,
    pub prompt_chars: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscriptOutcome {
    Response(String),
    Error(String),
}

pub const DEFAULT_STRUCTURED_RETRY_CAP: u32 = 2;

pub struct Gateway {
    roles: HashMap<Role, RoleBinding>,
    transcript: Mutex<Vec<TranscriptEntry>>,
    structured_retry_cap: u32,
}

impl Default for Gateway {
    fn default() -> Self {
        Self::new()
    }
}

impl Gateway {
    pub fn new() -> Self {
        Self {
            roles: HashMap::new(),
            transcript: Mutex::new(Vec::new()),
            structured_retry_cap: DEFAULT_STRUCTURED_RETRY_CAP,
        }
    }

    /// One backend for every role (self-teaching and mock runs).
    pub fn uniform(backend: Arc<dyn Backend>) -> Self {
        let mut gw = Self::new();
        for role in Role::ALL {
            gw.bind(
                role,
                RoleBinding::new(Arc::clone(&backend)).with_retry(RetryPolicy::immediate(1)),
            );
        }
        gw
    }

    pub fn bind(&mut self, role: Role, binding: RoleBinding) -> &mut Self {
        self.roles.insert(role, binding);
        self
    }

    pub fn with_structured_retry_cap(mut self, cap: u32) -> Self {
        self.structured_retry_cap = cap;
        self
    }

    pub fn is_configured(&self, role: Role) -> bool {
        self.roles.contains_key(&role)
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        let Some(binding) = self.roles.get(&req.role) else {
            return Err(GatewayError::UnconfiguredRole(req.role));
        };
        let max_attempts = binding.retry.max_attempts.max(1);
        let mut attempts = 0;
        let result = loop {
            attempts += 1;
            if let Some(limiter) = &binding.limiter {
                limiter.acquire();
            }
            match binding.backend.complete(req) {
                Ok(text) => break Ok(text),
                Err(BackendError::Fatal(message)) => {
                    break Err(GatewayError::Backend {
                        role: req.role,
                        message,
                    })
                }
                Err(BackendError::Transient(message)) => {
                    if attempts >= max_attempts {
                        break Err(GatewayError::ExhaustedRetries {
                            role: req.role,
                            attempts,
                            last: message,
                        });
                    }
                    tracing::debug!(role = %req.role, attempts, "transient backend failure: {message}");
                    std::thread::sleep(binding.retry.backoff(attempts));
                }
            }
        };
        let entry = TranscriptEntry {
            role: req.role,
            request_digest: req.fingerprint(),
            outcome: match &result {
                Ok(text) => TranscriptOutcome::Response(text.clone()),
                Err(e) => TranscriptOutcome::Error(e.to_string()),
            },
            attempts,
            prompt_chars: req.system_prompt.len() + req.user_prompt.len(),
        };
        self.transcript
            .lock()
            .expect("transcript poisoned")
            .push(entry);
        result
    }

    /// Completes and extracts a validated key-value object, re-prompting with
    /// an explanation on failure up to the structured retry cap.
    pub fn complete_structured(
        &self,
        req: &CompletionRequest,
        schema: &[FieldSpec],
    ) -> Result<StructuredRecord, GatewayError> {
        assert!(!schema.is_empty(), "structured schema must not be empty");
        let mut current = req.clone();
        let mut attempts = 0;
        loop {
            attempts += 1;
            let text = self.complete(&current)?;
            match structured::parse_structured(&text, schema) {
                Ok(record) => return Ok(record),
                Err(reason) => {
                    if attempts > self.structured_retry_cap {
                        return Err(GatewayError::StructuredParse {
                            role: req.role,
                            attempts,
                            last: reason,
                        });
                    }
                    current.user_prompt = format!(
                        "{}\n\n{}",
                        req.user_prompt,
                        structured::retry_suffix(&reason, schema)
                    );
                }
            }
        }
    }

    /// Snapshot of the transcript in call order.
    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.transcript.lock().expect("transcript poisoned").clone()
    }

    pub fn call_count(&self) -> usize {
        self.transcript.lock().expect("transcript poisoned").len()
    }

    /// Transcript ordered independently of worker scheduling.
    pub fn canonical_transcript(&self) -> Vec<TranscriptEntry> {
        let mut t = self.transcript();
        t.sort_by(|a, b| {
            (a.role, &a.request_digest, format!("{:?}", a.outcome)).cmp(&(
                b.role,
                &b.request_digest,
                format!("{:?}", b.outcome),
            ))
        });
        t
    }
}
