//! Uniform client over chat-completion endpoints.
//!
//! Every model the pipeline talks to (query generator, answerability
//! filterer, the two-stage policy, LLM judge, answer extractor, trace
//! verifier) sits behind the same [`Endpoint`] trait. Production traffic
//! goes through [`HttpEndpoint`]; everything is also drivable fully offline
//! through [`MockBackend`], which is a pure function of (seed, request).

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{hex_digest, ImageHandle};

/// Which pipeline function this request serves. Each role may be bound to a
/// different endpoint in the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generator,
    Filterer,
    Policy,
    Judge,
    Extractor,
    Verifier,
}

#[derive(Debug, Clone)]
pub enum ContentPart {
    Text(String),
    Image(ImageHandle),
}

#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub role: Role,
    pub system_prompt: String,
    pub parts: Vec<ContentPart>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub want_logits: bool,
}

impl ChatRequest {
    pub fn text(role: Role, system_prompt: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            role,
            system_prompt: system_prompt.into(),
            parts: vec![ContentPart::Text(user.into())],
            temperature: 0.0,
            max_tokens: 2048,
            want_logits: false,
        }
    }

    /// All text content concatenated, used for fingerprints and mock rule
    /// matching.
    pub fn flat_text(&self) -> String {
        let mut out = String::new();
        for part in &self.parts {
            if let ContentPart::Text(t) = part {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(t);
            }
        }
        out
    }

    /// Stable content hash over role, prompts, image pixels and sampling
    /// parameters.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(format!("{:?}", self.role).as_bytes());
        hasher.update([0]);
        hasher.update(self.system_prompt.as_bytes());
        for part in &self.parts {
            hasher.update([1]);
            match part {
                ContentPart::Text(t) => hasher.update(t.as_bytes()),
                ContentPart::Image(img) => hasher.update(img.content_hash().as_bytes()),
            }
        }
        hasher.update(self.temperature.to_le_bytes());
        hasher.update(self.max_tokens.to_le_bytes());
        hasher.update([self.want_logits as u8]);
        hex_digest(hasher)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Debug, Clone)]
pub struct ChatResponse {
    pub text: String,
    pub token_logprobs: Option<Vec<f64>>,
    pub token_logits: Option<Vec<Vec<f64>>>,
    pub usage: Usage,
    pub latency_ms: u64,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("http status {0}")]
    HttpStatus(u16),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("endpoint does not support logits")]
    Capability,
    #[error("no mock rule matches request (strict mode): {0}")]
    UnscriptedRequest(String),
    #[error("transport error: {0}")]
    Transport(String),
}

impl BackendError {
    /// Timeouts and throttling/server statuses are worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Timeout | BackendError::Transport(_) => true,
            BackendError::HttpStatus(code) => *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

pub trait Endpoint: Send + Sync {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;

    fn supports_logits(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 2,
            backoff_ms: 250,
        }
    }
}

/// One logical completion: at most `retries` re-attempts with exponential
/// backoff on retryable failures. Returns the response together with the
/// number of attempts actually made.
pub fn complete_with_attempts(
    endpoint: &dyn Endpoint,
    req: &ChatRequest,
    policy: &RetryPolicy,
) -> (Result<ChatResponse, BackendError>, u32) {
    if req.want_logits && !endpoint.supports_logits() {
        return (Err(BackendError::Capability), 0);
    }
    let mut attempts = 0u32;
    loop {
        attempts += 1;
        match endpoint.send(req) {
            Ok(resp) => return (Ok(resp), attempts),
            Err(err) if err.is_retryable() && attempts <= policy.retries => {
                let backoff = policy.backoff_ms.saturating_mul(1 << (attempts - 1).min(8));
                if backoff > 0 {
                    std::thread::sleep(Duration::from_millis(backoff));
                }
            }
            Err(err) => return (Err(err), attempts),
        }
    }
}

pub fn complete(
    endpoint: &dyn Endpoint,
    req: &ChatRequest,
    policy: &RetryPolicy,
) -> Result<ChatResponse, BackendError> {
    complete_with_attempts(endpoint, req, policy).0
}

// ---------------------------------------------------------------------------
// HTTP endpoint (OpenAI-style chat completion wire format)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpEndpointConfig {
    pub url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub supports_logits: bool,
    /// Bound on concurrent requests to this endpoint.
    #[serde(default = "default_max_inflight")]
    pub max_inflight: usize,
    /// Retries for retryable failures (timeouts, 429, 5xx).
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_max_inflight() -> usize {
    4
}

fn default_retries() -> u32 {
    2
}

/// Counting semaphore bounding in-flight requests per endpoint.
struct Inflight {
    lock: Mutex<usize>,
    cond: std::sync::Condvar,
    limit: usize,
}

impl Inflight {
    fn new(limit: usize) -> Self {
        Self {
            lock: Mutex::new(0),
            cond: std::sync::Condvar::new(),
            limit: limit.max(1),
        }
    }

    fn acquire(&self) -> InflightGuard<'_> {
        let mut count = self.lock.lock().unwrap();
        while *count >= self.limit {
            count = self.cond.wait(count).unwrap();
        }
        *count += 1;
        InflightGuard(self)
    }
}

struct InflightGuard<'a>(&'a Inflight);

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        let mut count = self.0.lock.lock().unwrap();
        *count -= 1;
        self.0.cond.notify_one();
    }
}

pub struct HttpEndpoint {
    config: HttpEndpointConfig,
    client: reqwest::blocking::Client,
    inflight: Inflight,
}

impl HttpEndpoint {
    pub fn new(config: HttpEndpointConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let inflight = Inflight::new(config.max_inflight);
        Ok(Self {
            config,
            client,
            inflight,
        })
    }

    /// Retry policy mirroring this endpoint's configuration.
    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            retries: self.config.retries,
            ..RetryPolicy::default()
        }
    }

    fn wire_request(&self, req: &ChatRequest) -> serde_json::Value {
        let mut content = Vec::new();
        for part in &req.parts {
            match part {
                ContentPart::Text(t) => {
                    content.push(serde_json::json!({"type": "text", "text": t}));
                }
                ContentPart::Image(img) => {
                    let mut png = Vec::new();
                    let mut cursor = std::io::Cursor::new(&mut png);
                    // fallible only on allocation failure for PNG encode
                    let _ = img
                        .as_image()
                        .write_to(&mut cursor, image::ImageFormat::Png);
                    let b64 = base64::engine::general_purpose::STANDARD.encode(&png);
                    content.push(serde_json::json!({
                        "type": "image_url",
                        "image_url": {"url": format!("data:image/png;base64,{b64}")}
                    }));
                }
            }
        }
        let mut body = serde_json::json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": [{"type": "text", "text": req.system_prompt}]},
                {"role": "user", "content": content},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if req.want_logits {
            body["logprobs"] = serde_json::Value::Bool(true);
        }
        body
    }
}

impl Endpoint for HttpEndpoint {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let _slot = self.inflight.acquire();
        let token = std::env::var(&self.config.auth_env).unwrap_or_default();
        let start = std::time::Instant::now();
        let resp = self
            .client
            .post(&self.config.url)
            .bearer_auth(token)
            .json(&self.wire_request(req))
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    BackendError::Timeout
                } else {
                    BackendError::Transport(e.to_string())
                }
            })?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(BackendError::HttpStatus(status));
        }
        let body: serde_json::Value = resp
            .json()
            .map_err(|e| BackendError::Malformed(e.to_string()))?;
        let text = body["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .or_else(|| {
                // some endpoints return content as an array of parts
                body["choices"][0]["message"]["content"].as_array().map(|parts| {
                    parts
                        .iter()
                        .filter_map(|p| p["text"].as_str())
                        .collect::<Vec<_>>()
                        .join("")
                })
            })
            .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))?;
        let token_logprobs = body["choices"][0]["logprobs"]["content"].as_array().map(|arr| {
            arr.iter()
                .filter_map(|t| t["logprob"].as_f64())
                .collect::<Vec<f64>>()
        });
        let usage = Usage {
            prompt_tokens: body["usage"]["prompt_tokens"].as_u64().unwrap_or(0) as u32,
            completion_tokens: body["usage"]["completion_tokens"].as_u64().unwrap_or(0) as u32,
        };
        Ok(ChatResponse {
            text,
            token_logprobs,
            token_logits: None,
            usage,
            latency_ms: start.elapsed().as_millis() as u64,
        })
    }

    fn supports_logits(&self) -> bool {
        self.config.supports_logits
    }
}

// ---------------------------------------------------------------------------
// Deterministic mock backend
// ---------------------------------------------------------------------------

/// How a mock rule decides whether it applies to a request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum MockMatcher {
    /// Matches every request (useful as a trailing default).
    Any,
    /// Matches when the request's flattened text contains the substring.
    Contains(String),
}

impl MockMatcher {
    fn matches(&self, req: &ChatRequest) -> bool {
        match self {
            MockMatcher::Any => true,
            MockMatcher::Contains(s) => {
                req.flat_text().contains(s.as_str()) || req.system_prompt.contains(s.as_str())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum MockResponse {
    /// Fixed canned text.
    Text(String),
    /// Fail with the given HTTP status `failures` times per distinct
    /// request, then answer with the text. Exercises retry paths.
    FailThen {
        failures: u32,
        status: u16,
        text: String,
    },
    /// Always fail with the given HTTP status.
    Fail { status: u16 },
    /// Cycle through the texts on repeated deliveries of the same request
    /// (scripted refinement loops).
    Sequence(Vec<String>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockRule {
    /// Restrict the rule to one role; `None` applies to all roles.
    pub role: Option<Role>,
    pub matcher: MockMatcher,
    pub response: MockResponse,
}

impl MockRule {
    pub fn new(role: Role, contains: &str, text: &str) -> Self {
        Self {
            role: Some(role),
            matcher: MockMatcher::Contains(contains.to_string()),
            response: MockResponse::Text(text.to_string()),
        }
    }

    pub fn any(role: Role, text: &str) -> Self {
        Self {
            role: Some(role),
            matcher: MockMatcher::Any,
            response: MockResponse::Text(text.to_string()),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
}

impl MockScript {
    pub fn rule(mut self, rule: MockRule) -> Self {
        self.rules.push(rule);
        self
    }
}

/// Offline stand-in for every model role. Responses are a pure function of
/// (seed, request); the only state is a per-request delivery counter used by
/// `FailThen`/`Sequence` scripting, so concurrent issue order cannot change
/// what any given request receives.
pub struct MockBackend {
    seed: u64,
    script: MockScript,
    strict: bool,
    emit_logits: bool,
    logit_dim: usize,
    deliveries: Mutex<HashMap<(usize, String), u32>>,
}

/// Synthetic mock logit vector width.
pub const MOCK_LOGIT_DIM: usize = 32;

impl MockBackend {
    pub fn new(seed: u64, script: MockScript) -> Self {
        Self {
            seed,
            script,
            strict: false,
            emit_logits: true,
            logit_dim: MOCK_LOGIT_DIM,
            deliveries: Mutex::new(HashMap::new()),
        }
    }

    /// Strict mode: requests matched by no rule error out instead of falling
    /// back to a generated reply.
    pub fn strict(mut self) -> Self {
        self.strict = true;
        self
    }

    /// A profile that refuses logit requests (capability testing).
    pub fn without_logits(mut self) -> Self {
        self.emit_logits = false;
        self
    }

    fn request_seed(&self, hash: &str) -> u64 {
        let mut s = self.seed;
        for chunk in hash.as_bytes().chunks(8) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            s ^= u64::from_le_bytes(buf).rotate_left(17);
        }
        s
    }

    fn synthesize(&self, req: &ChatRequest, text: &str) -> ChatResponse {
        let hash = req.content_hash();
        let n_tokens = text.split_whitespace().count().max(1);
        let (token_logprobs, token_logits) = if req.want_logits {
            let mut rng = ChaCha20Rng::seed_from_u64(self.request_seed(&hash));
            let mut logits = Vec::with_capacity(n_tokens);
            let mut logprobs = Vec::with_capacity(n_tokens);
            for _ in 0..n_tokens {
                let vec: Vec<f64> = (0..self.logit_dim).map(|_| rng.gen_range(-4.0..4.0)).collect();
                let max = vec.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + vec.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
                logprobs.push(max - lse);
                logits.push(vec);
            }
            (Some(logprobs), Some(logits))
        } else {
            (None, None)
        };
        ChatResponse {
            text: text.to_string(),
            token_logprobs,
            token_logits,
            usage: Usage {
                prompt_tokens: req.flat_text().split_whitespace().count() as u32,
                completion_tokens: n_tokens as u32,
            },
            latency_ms: 0,
        }
    }
}

impl Endpoint for MockBackend {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let hash = req.content_hash();
        for (idx, rule) in self.script.rules.iter().enumerate() {
            if let Some(role) = rule.role {
                if role != req.role {
                    continue;
                }
            }
            if !rule.matcher.matches(req) {
                continue;
            }
            return match &rule.response {
                MockResponse::Text(text) => Ok(self.synthesize(req, text)),
                MockResponse::Fail { status } => Err(BackendError::HttpStatus(*status)),
                MockResponse::FailThen {
                    failures,
                    status,
                    text,
                } => {
                    let mut deliveries = self.deliveries.lock().unwrap();
                    let count = deliveries.entry((idx, hash.clone())).or_insert(0);
                    *count += 1;
                    if *count <= *failures {
                        Err(BackendError::HttpStatus(*status))
                    } else {
                        Ok(self.synthesize(req, text))
                    }
                }
                MockResponse::Sequence(texts) => {
                    let mut deliveries = self.deliveries.lock().unwrap();
                    let count = deliveries.entry((idx, hash.clone())).or_insert(0);
                    let text = &texts[(*count as usize).min(texts.len() - 1)];
                    *count += 1;
                    Ok(self.synthesize(req, text))
                }
            };
        }
        if self.strict {
            return Err(BackendError::UnscriptedRequest(format!(
                "role {:?}, hash {}",
                req.role,
                &hash[..12]
            )));
        }
        // Unscripted default: a deterministic reply derived from the hash.
        let text = format!("mock-reply-{}", &hash[..16]);
        Ok(self.synthesize(req, &text))
    }

    fn supports_logits(&self) -> bool {
        self.emit_logits
    }
}
