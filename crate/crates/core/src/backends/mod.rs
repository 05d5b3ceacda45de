//! Chat-completion clients for the model under test and the proxy reasoner.
//!
//! Every call goes through [`Client::chat`], which consults an optional [`Cassette`]
//! before touching the network. In replay mode the network is never used.

mod cassette;
mod http;

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use cassette::{inspect as inspect_cassette, Cassette, CassetteEntry, CassetteMode, MessageSummary, RequestSummary};
pub use http::HttpTransport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<PathBuf>,
}

impl Message {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn user_with_images(text: impl Into<String>, images: Vec<PathBuf>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            images,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_name: String,
    pub messages: Vec<Message>,
    pub max_output_tokens: u32,
    /// Reasoning-token allowance; 0 disables it.
    #[serde(default)]
    pub thinking_budget: u32,
    #[serde(default)]
    pub temperature: f64,
    /// Extra key folded into the fingerprint but never sent, used to keep cassette
    /// entries of different run settings apart.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<()> {
        if self.messages.is_empty() {
            return Err(Error::Invalid("chat request has no messages".into()));
        }
        if self
            .messages
            .iter()
            .any(|m| m.role != Role::User && !m.images.is_empty())
        {
            return Err(Error::Invalid("images are only allowed on user messages".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(Error::Invalid("max_output_tokens must be positive".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::Invalid(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        Ok(())
    }

    pub fn image_count(&self) -> usize {
        self.messages.iter().map(|m| m.images.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatReply {
    pub text: String,
    pub finish_reason: FinishReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

impl ChatReply {
    pub fn stop(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            finish_reason: FinishReason::Stop,
            usage: None,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn image_hash(path: &PathBuf) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Content hash of the normalized request. Images contribute through the hash of
/// their bytes, so the same frames at different paths share a fingerprint. Object
/// keys are emitted sorted, making the result independent of field order.
pub fn fingerprint(req: &ChatRequest) -> Result<String> {
    let mut messages = Vec::with_capacity(req.messages.len());
    for m in &req.messages {
        let images = m.images.iter().map(image_hash).collect::<Result<Vec<_>>>()?;
        messages.push(json!({ "role": m.role, "text": m.text, "images": images }));
    }
    // serde_json's default map is ordered by key, so this serialisation is canonical
    let canonical = json!({
        "model": req.model_name,
        "messages": messages,
        "max_output_tokens": req.max_output_tokens,
        "thinking_budget": req.thinking_budget,
        "temperature": req.temperature,
        "context": req.context,
    });
    Ok(sha256_hex(serde_json::to_string(&canonical)?.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub model: String,
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the bearer credential.
    pub credential_env: Option<String>,
    pub max_output_tokens: u32,
    pub temperature: f64,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub timeout_s: u64,
    /// Top-level request field carrying the thinking budget for endpoints that support
    /// it natively. When unset, the budget is passed as a leading system instruction.
    pub thinking_field: Option<String>,
    pub cassette: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            model: String::new(),
            endpoint: None,
            credential_env: None,
            max_output_tokens: 1024,
            temperature: 0.0,
            max_in_flight: 4,
            max_attempts: 4,
            backoff_ms: 500,
            timeout_s: 300,
            thinking_field: None,
            cassette: None,
        }
    }
}

/// A single POST of a JSON body. Implementations return the status and raw body, or
/// `Err` for failures that never produced a response (connection, timeout).
pub trait Transport: Send + Sync {
    fn post(&self, body: &Value) -> std::result::Result<(u16, String), String>;
}

/// Transport backed by a closure; used for scripted offline backends.
pub struct FnTransport<F>(pub F);

impl<F> Transport for FnTransport<F>
where
    F: Fn(&Value) -> std::result::Result<(u16, String), String> + Send + Sync,
{
    fn post(&self, body: &Value) -> std::result::Result<(u16, String), String> {
        (self.0)(body)
    }
}

/// A well-formed chat-completion response body carrying `text`.
pub fn completion_body(text: &str) -> String {
    json!({
        "choices": [{ "index": 0, "message": { "role": "assistant", "content": text }, "finish_reason": "stop" }],
        "usage": { "prompt_tokens": 0, "completion_tokens": 0 }
    })
    .to_string()
}

/// Concatenated text of every `text` part of the last user message in a wire body.
pub fn wire_user_text(body: &Value) -> String {
    let Some(msg) = body["messages"]
        .as_array()
        .and_then(|m| m.iter().rev().find(|m| m["role"] == "user"))
    else {
        return String::new();
    };
    match &msg["content"] {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join("\n"),
        _ => String::new(),
    }
}

/// Number of image parts across all messages of a wire body.
pub fn wire_image_count(body: &Value) -> usize {
    body["messages"]
        .as_array()
        .map(|msgs| {
            msgs.iter()
                .filter_map(|m| m["content"].as_array())
                .flatten()
                .filter(|p| p["type"] == "image_url")
                .count()
        })
        .unwrap_or(0)
}

struct Gate {
    in_flight: Mutex<usize>,
    cv: Condvar,
    cap: usize,
}

impl Gate {
    fn new(cap: usize) -> Self {
        Self {
            in_flight: Mutex::new(0),
            cv: Condvar::new(),
            cap: cap.max(1),
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.cap {
            n = self.cv.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.cv.notify_one();
    }
}

/// Shareable chat client: configuration, transport, optional cassette and an
/// in-flight cap.
pub struct Client {
    config: BackendConfig,
    transport: Option<Arc<dyn Transport>>,
    cassette: Option<Arc<Cassette>>,
    gate: Gate,
    network_calls: AtomicUsize,
    chat_calls: AtomicUsize,
}

impl Client {
    /// Client without any network route; only usable with a replay cassette.
    pub fn offline(config: BackendConfig, cassette: Arc<Cassette>) -> Self {
        Self::build(config, None, Some(cassette))
    }

    pub fn with_transport(config: BackendConfig, transport: Arc<dyn Transport>, cassette: Option<Arc<Cassette>>) -> Self {
        Self::build(config, Some(transport), cassette)
    }

    /// HTTP client for `config.endpoint`, reading the credential from the environment.
    pub fn http(config: BackendConfig, cassette: Option<Arc<Cassette>>) -> Result<Self> {
        let transport = HttpTransport::from_config(&config)?;
        Ok(Self::build(config, Some(Arc::new(transport)), cassette))
    }

    fn build(config: BackendConfig, transport: Option<Arc<dyn Transport>>, cassette: Option<Arc<Cassette>>) -> Self {
        let gate = Gate::new(config.max_in_flight);
        Self {
            config,
            transport,
            cassette,
            gate,
            network_calls: AtomicUsize::new(0),
            chat_calls: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn cassette(&self) -> Option<&Arc<Cassette>> {
        self.cassette.as_ref()
    }

    /// Number of requests that reached the transport (retries counted individually).
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    /// Number of `chat` invocations, whether served from cassette or network.
    pub fn chat_calls(&self) -> usize {
        self.chat_calls.load(Ordering::SeqCst)
    }

    /// Request with this client's model and decoding defaults.
    pub fn request(&self, messages: Vec<Message>, thinking_budget: u32) -> ChatRequest {
        ChatRequest {
            model_name: self.config.model.clone(),
            messages,
            max_output_tokens: self.config.max_output_tokens,
            thinking_budget,
            temperature: self.config.temperature,
            context: None,
        }
    }

    pub fn chat(&self, req: &ChatRequest) -> Result<ChatReply> {
        req.validate()?;
        self.chat_calls.fetch_add(1, Ordering::SeqCst);
        let Some(cassette) = &self.cassette else {
            return self.call_network(req);
        };
        match cassette.mode() {
            CassetteMode::Replay => {
                let fp = fingerprint(req)?;
                cassette.lookup(&fp).ok_or_else(|| Error::ReplayMiss {
                    summary: RequestSummary::of(req, &fp).short(),
                    fingerprint: fp,
                })
            }
            CassetteMode::Record => {
                let fp = fingerprint(req)?;
                let reply = self.call_network(req)?;
                cassette.record(CassetteEntry {
                    request: RequestSummary::of(req, &fp),
                    fingerprint: fp,
                    reply: reply.clone(),
                })?;
                Ok(reply)
            }
            CassetteMode::Passthrough => self.call_network(req),
        }
    }

    fn call_network(&self, req: &ChatRequest) -> Result<ChatReply> {
        let transport = self
            .transport
            .as_ref()
            .ok_or_else(|| Error::Config("no endpoint configured for live calls".into()))?;
        let body = wire_body(req, &self.config)?;
        let _slot = self.gate.acquire();
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            match transport.post(&body) {
                Ok((status, text)) if (200..300).contains(&status) => return parse_completion(status, &text),
                Ok((status, text)) if status == 408 || status == 429 || status >= 500 => {
                    log::warn!("transient status {status} (attempt {}/{attempts})", attempt + 1);
                    last = format!("status {status}: {}", excerpt(&text));
                }
                Ok((status, text)) => {
                    return Err(Error::Protocol {
                        status,
                        excerpt: excerpt(&text),
                    })
                }
                Err(msg) => {
                    log::warn!("transport failure (attempt {}/{attempts}): {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(Error::Transport { attempts, message: last })
    }
}

fn excerpt(text: &str) -> String {
    text.chars().take(300).collect()
}

fn mime_for(path: &std::path::Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        _ => "image/png",
    }
}

/// OpenAI-style chat-completion body for `req`.
pub fn wire_body(req: &ChatRequest, cfg: &BackendConfig) -> Result<Value> {
    let mut messages = Vec::with_capacity(req.messages.len() + 1);
    if req.thinking_budget > 0 && cfg.thinking_field.is_none() {
        messages.push(json!({
            "role": "system",
            "content": format!(
                "Think through the problem before answering, using at most {} tokens of reasoning.",
                req.thinking_budget
            ),
        }));
    }
    for m in &req.messages {
        if m.images.is_empty() {
            messages.push(json!({ "role": m.role, "content": m.text }));
            continue;
        }
        let mut parts = Vec::with_capacity(m.images.len() + 1);
        for path in &m.images {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let data = base64::engine::general_purpose::STANDARD.encode(bytes);
            parts.push(json!({
                "type": "image_url",
                "image_url": { "url": format!("data:{};base64,{data}", mime_for(path)) },
            }));
        }
        parts.push(json!({ "type": "text", "text": m.text }));
        messages.push(json!({ "role": m.role, "content": parts }));
    }
    let mut body = json!({
        "model": req.model_name,
        "messages": messages,
        "max_tokens": req.max_output_tokens,
        "temperature": req.temperature,
    });
    if let (Some(field), true) = (&cfg.thinking_field, req.thinking_budget > 0) {
        body[field.as_str()] = json!(req.thinking_budget);
    }
    Ok(body)
}

fn parse_completion(status: u16, text: &str) -> Result<ChatReply> {
    let bad = |why: &str| Error::Protocol {
        status,
        excerpt: format!("{why}: {}", excerpt(text)),
    };
    let v: Value = serde_json::from_str(text).map_err(|_| bad("response is not JSON"))?;
    let choice = &v["choices"][0];
    let content = match &choice["message"]["content"] {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts.iter().filter_map(|p| p["text"].as_str()).collect(),
        Value::Null => String::new(),
        _ => return Err(bad("unexpected content shape")),
    };
    let finish_reason = match choice["finish_reason"].as_str() {
        Some("stop") | None => FinishReason::Stop,
        Some("length") | Some("max_tokens") => FinishReason::Length,
        Some(other) => return Err(bad(&format!("finish_reason `{other}`"))),
    };
    let usage = v["usage"]["prompt_tokens"].as_u64().map(|p| Usage {
        prompt_tokens: p,
        completion_tokens: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
    });
    Ok(ChatReply {
        text: content,
        finish_reason,
        usage,
    })
}
