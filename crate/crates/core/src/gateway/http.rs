//! Generic chat-completion HTTP backend.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, CompletionRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpChatConfig {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the API key; substituted for `${API_KEY}`
    /// in header templates.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Header name → value template.
    #[serde(default = "default_headers")]
    pub headers: BTreeMap<String, String>,
    /// Send the system prompt as a top-level `system` field instead of a
    /// `system` message.
    #[serde(default)]
    pub system_top_level: bool,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_headers() -> BTreeMap<String, String> {
    HttpChatConfig::default_headers()
}

impl HttpChatConfig {
    /// `Authorization: Bearer ${API_KEY}`.
    pub fn default_headers() -> BTreeMap<String, String> {
        BTreeMap::from([("Authorization".to_string(), "Bearer ${API_KEY}".to_string())])
    }
}

fn default_timeout_secs() -> u64 {
    120
}

pub struct HttpChatBackend {
    config: HttpChatConfig,
    headers: Vec<(String, String)>,
    client: reqwest::blocking::Client,
}

impl HttpChatBackend {
    pub fn new(config: HttpChatConfig) -> Result<Self, String> {
        let key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| format!("environment variable {var} is not set"))?,
            ),
            None => None,
        };
        let mut headers = Vec::new();
        for (name, template) in &config.headers {
            if template.contains("${API_KEY}") {
                match &key {
                    Some(k) => headers.push((name.clone(), template.replace("${API_KEY}", k))),
                    // no key configured: drop auth headers entirely
                    None => continue,
                }
            } else {
                headers.push((name.clone(), template.clone()));
            }
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| e.to_string())?;
        Ok(Self {
            config,
            headers,
            client,
        })
    }

    pub fn request_body(&self, req: &CompletionRequest) -> Value {
        let mut messages = Vec::new();
        if !req.system_prompt.is_empty() && !self.config.system_top_level {
            messages.push(json!({"role": "system", "content": req.system_prompt}));
        }
        messages.push(json!({"role": "user", "content": req.user_prompt}));
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if self.config.system_top_level && !req.system_prompt.is_empty() {
            body["system"] = Value::String(req.system_prompt.clone());
        }
        body
    }
}

/// Pulls the text out of the common chat response shapes.
pub(crate) fn response_text(body: &Value) -> Option<String> {
    if let Some(s) = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
    {
        return Some(s.to_string());
    }
    if let Some(parts) = body.get("content").and_then(Value::as_array) {
        let text: String = parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect();
        if !text.is_empty() {
            return Some(text);
        }
    }
    body.get("output_text")
        .and_then(Value::as_str)
        .map(str::to_string)
}

fn is_transient_status(status: u16) -> bool {
    matches!(status, 408 | 409 | 425 | 429 | 500 | 502 | 503 | 504 | 529)
}

impl Backend for HttpChatBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        let mut builder = self
            .client
            .post(&self.config.endpoint)
            .json(&self.request_body(req));
        for (name, value) in &self.headers {
            builder = builder.header(name, value);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                BackendError::Transient(e.to_string())
            } else {
                BackendError::Fatal(e.to_string())
            }
        })?;
        let status = response.status().as_u16();
        let text = response
            .text()
            .map_err(|e| BackendError::Transient(format!("reading body: {e}")))?;
        if !(200..300).contains(&status) {
            let snippet: String = text.chars().take(300).collect();
            let msg = format!("HTTP {status}: {snippet}");
            return Err(if is_transient_status(status) {
                BackendError::Transient(msg)
            } else {
                BackendError::Fatal(msg)
            });
        }
        let body: Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::Fatal(format!("response is not JSON: {e}")))?;
        response_text(&body)
            .ok_or_else(|| BackendError::Fatal("response carries no completion text".into()))
    }
}
