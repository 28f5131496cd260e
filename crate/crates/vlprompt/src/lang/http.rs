//! JSON-over-HTTP chat and embedding clients.
//!
//! Wire format: `POST endpoint` with body `{"model": ..., "messages": [...]}`
//! for chat and `{"model": ..., "input": ...}` for embeddings; the reply is
//! read from `choices[0].message.content` / `data[0].embedding`. An API key,
//! when configured, travels in an `authorization: Bearer` header and is never
//! echoed into error messages.
//!
//! Failures are classified by [`BackendErrorKind`]: transport problems,
//! non-2xx statuses (with 429 singled out as rate limiting), and malformed
//! reply bodies. Transport errors, 429s, and 5xx statuses are retried with
//! exponential backoff up to `max_retries`; other statuses and malformed
//! bodies fail immediately.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::Serialize;
use serde_json::Value;

use crate::error::{BackendErrorKind, Error, Result};

use super::backend::{ChatBackend, EmbedBackend};
use super::DialogueMessage;

/// Connection settings shared by the chat and embedding clients.
#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Full URL the request is POSTed to.
    pub endpoint: String,
    /// Model identifier sent in the request body.
    pub model: String,
    /// Secret for the `authorization: Bearer` header; `None` sends no header.
    pub api_key: Option<String>,
    /// Retries after the first attempt (so `3` allows 4 attempts total).
    pub max_retries: u32,
    /// First backoff delay; doubles per retry.
    pub retry_base_ms: u64,
    /// Global per-request timeout.
    pub timeout_ms: u64,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            max_retries: 3,
            retry_base_ms: 200,
            timeout_ms: 30_000,
        }
    }
}

fn classify(e: &ureq::Error) -> BackendErrorKind {
    match e {
        ureq::Error::StatusCode(429) => BackendErrorKind::RateLimited,
        ureq::Error::StatusCode(s) => BackendErrorKind::Status(*s),
        _ => BackendErrorKind::Transport,
    }
}

fn retryable(kind: BackendErrorKind) -> bool {
    match kind {
        BackendErrorKind::Transport | BackendErrorKind::RateLimited => true,
        BackendErrorKind::Status(s) => (500..=599).contains(&s),
        BackendErrorKind::Malformed => false,
    }
}

fn build_agent(cfg: &HttpConfig) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
        .build()
        .new_agent()
}

/// One POST attempt; returns the response body text.
fn post_once(agent: &ureq::Agent, cfg: &HttpConfig, body: &str) -> Result<String> {
    let mut req = agent.post(cfg.endpoint.as_str()).header("content-type", "application/json");
    if let Some(key) = &cfg.api_key {
        req = req.header("authorization", format!("Bearer {key}"));
    }
    let mut resp = req.send(body).map_err(|e| Error::Backend {
        kind: classify(&e),
        detail: format!("POST {}: {e}", cfg.endpoint),
    })?;
    resp.body_mut().read_to_string().map_err(|e| Error::Backend {
        kind: BackendErrorKind::Transport,
        detail: format!("reading response from {}: {e}", cfg.endpoint),
    })
}

/// POST with bounded exponential backoff on retryable failures.
fn post_with_retries(agent: &ureq::Agent, cfg: &HttpConfig, body: &str) -> Result<String> {
    let mut attempt = 0u32;
    loop {
        match post_once(agent, cfg, body) {
            Err(Error::Backend { kind, detail })
                if attempt < cfg.max_retries && retryable(kind) =>
            {
                let delay = cfg.retry_base_ms.saturating_mul(1u64 << attempt.min(16));
                std::thread::sleep(Duration::from_millis(delay));
                attempt += 1;
                let _ = detail;
            }
            other => return other,
        }
    }
}

fn malformed(endpoint: &str, what: &str) -> Error {
    Error::Backend {
        kind: BackendErrorKind::Malformed,
        detail: format!("response from {endpoint}: {what}"),
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [DialogueMessage],
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a str,
}

/// Chat client; replies come from `choices[0].message.content`.
pub struct HttpChat {
    cfg: HttpConfig,
    agent: ureq::Agent,
    calls: AtomicU64,
}

impl HttpChat {
    pub fn new(cfg: HttpConfig) -> Self {
        let agent = build_agent(&cfg);
        HttpChat { cfg, agent, calls: AtomicU64::new(0) }
    }
}

impl ChatBackend for HttpChat {
    fn chat(&self, messages: &[DialogueMessage]) -> Result<String> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let body = serde_json::to_string(&ChatRequest { model: &self.cfg.model, messages })
            .expect("chat request serializes infallibly");
        let text = post_with_retries(&self.agent, &self.cfg, &body)?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| malformed(&self.cfg.endpoint, &format!("invalid JSON: {e}")))?;
        v.get("choices")
            .and_then(|c| c.get(0))
            .and_then(|c| c.get("message"))
            .and_then(|m| m.get("content"))
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| malformed(&self.cfg.endpoint, "missing choices[0].message.content"))
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

/// Embedding client; vectors come from `data[0].embedding` and must have the
/// configured length.
pub struct HttpEmbed {
    cfg: HttpConfig,
    dim: usize,
    agent: ureq::Agent,
    calls: AtomicU64,
}

impl HttpEmbed {
    pub fn new(cfg: HttpConfig, dim: usize) -> Self {
        let agent = build_agent(&cfg);
        HttpEmbed { cfg, dim, agent, calls: AtomicU64::new(0) }
    }
}

impl EmbedBackend for HttpEmbed {
    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        if text.is_empty() {
            return Err(Error::Data("cannot encode empty text".into()));
        }
        let body = serde_json::to_string(&EmbedRequest { model: &self.cfg.model, input: text })
            .expect("embed request serializes infallibly");
        let reply = post_with_retries(&self.agent, &self.cfg, &body)?;
        let v: Value = serde_json::from_str(&reply)
            .map_err(|e| malformed(&self.cfg.endpoint, &format!("invalid JSON: {e}")))?;
        let arr = v
            .get("data")
            .and_then(|d| d.get(0))
            .and_then(|d| d.get("embedding"))
            .and_then(Value::as_array)
            .ok_or_else(|| malformed(&self.cfg.endpoint, "missing data[0].embedding"))?;
        let mut out = Vec::with_capacity(arr.len());
        for x in arr {
            let f = x
                .as_f64()
                .ok_or_else(|| malformed(&self.cfg.endpoint, "non-numeric embedding entry"))?;
            out.push(f as f32);
        }
        if out.len() != self.dim {
            return Err(malformed(
                &self.cfg.endpoint,
                &format!("embedding length {} but encoder dim is {}", out.len(), self.dim),
            ));
        }
        Ok(out)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn id(&self) -> String {
        self.cfg.model.clone()
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}
