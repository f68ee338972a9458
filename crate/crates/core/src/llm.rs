//! Text-generation clients: a deterministic stub and a chat-completions HTTP
//! client with bounded retries.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub system: String,
    pub user: String,
    pub max_tokens: u32,
    pub temperature: f32,
    pub seed: u64,
}

impl GenerationRequest {
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Self {
        Self { system: system.into(), user: user.into(), max_tokens: 512, temperature: 0.0, seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be positive".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest("temperature must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    pub finish_reason: String,
    pub latency_ms: u64,
    pub provider: String,
    /// Failed attempts before this response.
    pub retries: u32,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("request timed out")]
    Timeout,
    #[error("server returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("environment variable {0} is not set")]
    MissingCredential(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<LlmError> },
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        match self {
            LlmError::Timeout | LlmError::Transport(_) => true,
            LlmError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// A single-shot text generator. Implementations must be safe to call
/// from several threads.
pub trait TextGenerator: Send + Sync {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResponse, LlmError>;
}

/// Deterministic offline client: the reply is a function of the request.
#[derive(Clone, Debug, Default)]
pub struct StubClient;

impl StubClient {
    pub fn request_key(request: &GenerationRequest) -> String {
        let mut h = Sha256::new();
        h.update(request.system.as_bytes());
        h.update([0]);
        h.update(request.user.as_bytes());
        h.update(request.seed.to_le_bytes());
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

impl TextGenerator for StubClient {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResponse, LlmError> {
        request.validate()?;
        let head: Vec<&str> = request.user.split_whitespace().take(12).collect();
        let words: Vec<&str> = head.iter().copied().take(request.max_tokens as usize).collect();
        let finish = if words.len() < head.len() { "length" } else { "stop" };
        Ok(GenerationResponse {
            text: format!("[stub {}] {}", Self::request_key(request), words.join(" ")),
            finish_reason: finish.into(),
            latency_ms: 0,
            provider: "stub".into(),
            retries: 0,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: f64,
    /// Attempts after the first one.
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    /// Name of the environment variable holding the bearer token, if any.
    pub api_key_env: Option<String>,
    pub max_in_flight: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "local".into(),
            timeout_secs: 60.0,
            max_retries: 3,
            backoff_base_ms: 500,
            api_key_env: None,
            max_in_flight: 4,
        }
    }
}

struct Gate {
    limit: usize,
    busy: Mutex<usize>,
    free: Condvar,
}

impl Gate {
    fn enter(&self) -> GateGuard<'_> {
        let mut busy = self.busy.lock().expect("gate lock");
        while *busy >= self.limit {
            busy = self.free.wait(busy).expect("gate lock");
        }
        *busy += 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.busy.lock().expect("gate lock") -= 1;
        self.0.free.notify_one();
    }
}

/// Client for the common chat-completions JSON shape.
pub struct HttpClient {
    config: HttpConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
    gate: Gate,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: [WireMessage<'a>; 2],
    max_tokens: u32,
    temperature: f32,
    seed: u64,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireReply,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireReply {
    content: Option<String>,
}

impl HttpClient {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        if !(config.timeout_secs > 0.0) {
            return Err(LlmError::InvalidRequest("timeout must be positive".into()));
        }
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| LlmError::MissingCredential(var.clone()))?),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let gate = Gate { limit: config.max_in_flight.max(1), busy: Mutex::new(0), free: Condvar::new() };
        Ok(Self { config, api_key, http, gate })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn attempt(&self, request: &GenerationRequest) -> Result<(String, String), LlmError> {
        let body = WireRequest {
            model: &self.config.model,
            messages: [
                WireMessage { role: "system", content: &request.system },
                WireMessage { role: "user", content: &request.user },
            ],
            max_tokens: request.max_tokens,
            temperature: request.temperature,
            seed: request.seed,
        };
        let mut rb = self.http.post(&self.config.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(|e| {
            if e.is_timeout() {
                LlmError::Timeout
            } else {
                LlmError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                LlmError::Timeout
            } else {
                LlmError::Transport(e.to_string())
            }
        })?;
        if !status.is_success() {
            return Err(LlmError::Status { status: status.as_u16(), body: text.chars().take(500).collect() });
        }
        let parsed: WireResponse = serde_json::from_str(&text).map_err(|e| LlmError::Malformed(e.to_string()))?;
        let choice = parsed.choices.into_iter().next().ok_or_else(|| LlmError::Malformed("no choices".into()))?;
        let content = choice.message.content.ok_or_else(|| LlmError::Malformed("choice has no content".into()))?;
        Ok((content, choice.finish_reason.unwrap_or_else(|| "stop".into())))
    }
}

impl TextGenerator for HttpClient {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResponse, LlmError> {
        request.validate()?;
        let _slot = self.gate.enter();
        let started = Instant::now();
        let mut retries = 0u32;
        loop {
            match self.attempt(request) {
                Ok((text, finish_reason)) => {
                    return Ok(GenerationResponse {
                        text,
                        finish_reason,
                        latency_ms: started.elapsed().as_millis() as u64,
                        provider: format!("http:{}", self.config.model),
                        retries,
                    })
                }
                Err(e) if e.is_retryable() && retries < self.config.max_retries => {
                    let wait = self.config.backoff_base_ms.saturating_mul(1u64 << retries.min(16));
                    log::warn!("attempt {} failed ({e}); retrying in {wait} ms", retries + 1);
                    std::thread::sleep(Duration::from_millis(wait));
                    retries += 1;
                }
                Err(e) if e.is_retryable() => {
                    return Err(LlmError::RetriesExhausted { attempts: retries + 1, last: Box::new(e) })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Placeholder prompt templates. They are starting points, not tuned prompts.
pub mod prompts {
    pub const EXTRACT_SYSTEM: &str = "You extract factual statements about human brain cytoarchitecture.";
    pub const COMPOSE_SYSTEM: &str = "You write concise captions for cytoarchitecture microscopy patches.";
    pub const QA_SYSTEM: &str = "You write multiple-choice questions about human brain cytoarchitecture.";
    pub const JUDGE_SYSTEM: &str = "You identify brain areas from descriptions. Answer with a single number.";

    pub fn extract(area: &str, chunk: &str) -> String {
        format!(
            "List statements about the cytoarchitecture of area {area} found in the text below. \
             Each statement must be one sentence that can be understood without the text. \
             Leave out experimental details specific to a single study. One statement per line.\n\n{chunk}"
        )
    }

    pub fn compose(area: &str, statements: &[String]) -> String {
        format!(
            "Write a caption for a microscopy patch of area {area}. Start with the sentence \
             \"This patch shows cytoarchitecture of area {area}.\" and then describe it using these \
             statements:\n- {}",
            statements.join("\n- ")
        )
    }

    pub fn qa(chunk: &str) -> String {
        format!(
            "Write one multiple-choice question with four options about the cytoarchitecture described \
             below. Reply as JSON: {{\"stem\": ..., \"options\": [...], \"correct\": <index>}}.\n\n{chunk}"
        )
    }

    pub fn answer(stem: &str, options: &[String]) -> String {
        let listed: Vec<String> = options.iter().enumerate().map(|(i, o)| format!("{i}: {o}")).collect();
        format!("{stem}\n{}\nReply with the number of the correct option.", listed.join("\n"))
    }

    pub fn judge(caption: &str, candidates: &[(String, Vec<String>)]) -> String {
        let mut s = format!("Description:\n{caption}\n\nWhich area does it describe?\n");
        for (i, (_, statements)) in candidates.iter().enumerate() {
            s.push_str(&format!("{i}: {}\n", statements.join(" ")));
        }
        s.push_str("Reply with the number of the matching option.");
        s
    }
}

/// First integer in `text` that is `< n`.
pub fn parse_choice(text: &str, n: usize) -> Option<usize> {
    text.split(|c: char| !c.is_ascii_digit())
        .filter(|t| !t.is_empty())
        .filter_map(|t| t.parse::<usize>().ok())
        .find(|&i| i < n)
}
