//! Chat-completion access behind one trait, with three backends: a live
//! HTTP client, a scripted mock, and a cassette layer that records live
//! traffic and replays it offline.

use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable holding the bearer token for the HTTP backend.
pub const API_KEY_ENV: &str = "EMOSIM_API_KEY";
pub const DEFAULT_TEMPERATURE: f32 = 0.7;
/// Temperature for manager and leader judgment calls.
pub const JUDGE_TEMPERATURE: f32 = 0.0;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend refused request (status {status}): {message}")]
    BackendRefusal { status: u16, message: String },
    #[error("response body error: {0}")]
    BodyRead(String),
    #[error("mock has no response left for request tagged {0:?}")]
    MockExhausted(String),
    #[error("cassette has no recording for request tagged {tag:?} (digest {digest})")]
    CassetteMiss { tag: String, digest: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("cassette {path}: {message}")]
    Cassette { path: PathBuf, message: String },
}

impl GatewayError {
    fn is_transient(&self) -> bool {
        match self {
            GatewayError::Transport(_) => true,
            GatewayError::BackendRefusal { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
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
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f32,
    pub max_tokens: u32,
    /// Pipeline stage name; used by mock matchers and cassette digests.
    pub request_tag: String,
}

impl ChatRequest {
    pub fn new(model: &str, request_tag: &str, messages: Vec<ChatMessage>) -> Self {
        ChatRequest {
            model: model.to_string(),
            messages,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: 1024,
            request_tag: request_tag.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let first = self
            .messages
            .first()
            .ok_or_else(|| GatewayError::InvalidRequest("no messages".into()))?;
        if first.role == Role::Assistant {
            return Err(GatewayError::InvalidRequest(
                "first message must be system or user".into(),
            ));
        }
        if let Some(m) = self
            .messages
            .iter()
            .find(|m| m.role != Role::Assistant && m.content.trim().is_empty())
        {
            return Err(GatewayError::InvalidRequest(format!(
                "empty {:?} message",
                m.role
            )));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// All message contents joined by newlines; what prompt matchers see.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub backend_id: String,
    pub latency: Duration,
    pub token_usage: Option<TokenUsage>,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError>;

    fn backend_id(&self) -> &str;
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub model_name: String,
    #[serde(default = "default_timeout", with = "duration_secs")]
    pub timeout: Duration,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff", with = "duration_millis")]
    pub initial_backoff: Duration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cassette_path: Option<PathBuf>,
    /// Mock script file (JSONL of [`ScriptSpec`]); mock kind only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script_path: Option<PathBuf>,
}

fn default_timeout() -> Duration {
    Duration::from_secs(60)
}

fn default_retries() -> u32 {
    3
}

fn default_backoff() -> Duration {
    Duration::from_millis(500)
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        if !secs.is_finite() || secs <= 0.0 {
            return Err(serde::de::Error::custom("timeout must be positive"));
        }
        Ok(Duration::from_secs_f64(secs))
    }
}

mod duration_millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

impl BackendConfig {
    pub fn mock(model_name: &str) -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            endpoint: None,
            model_name: model_name.to_string(),
            timeout: default_timeout(),
            max_retries: default_retries(),
            initial_backoff: default_backoff(),
            cassette_path: None,
            script_path: None,
        }
    }

    pub fn http(endpoint: &str, model_name: &str) -> Self {
        BackendConfig {
            kind: BackendKind::Http,
            endpoint: Some(endpoint.to_string()),
            ..BackendConfig::mock(model_name)
        }
    }

    pub fn replay(cassette: impl Into<PathBuf>, model_name: &str) -> Self {
        BackendConfig {
            kind: BackendKind::Replay,
            cassette_path: Some(cassette.into()),
            ..BackendConfig::mock(model_name)
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidConfig(m.to_string()));
        match (self.kind, &self.endpoint) {
            (BackendKind::Http, None) => return bad("http backend requires an endpoint"),
            (BackendKind::Mock | BackendKind::Replay, Some(_)) => {
                return bad("endpoint is only valid for the http backend")
            }
            _ => {}
        }
        match (self.kind, &self.cassette_path) {
            (BackendKind::Replay, None) => return bad("replay backend requires a cassette path"),
            (BackendKind::Http | BackendKind::Mock, Some(_)) => {
                return bad("cassette path is only valid for the replay backend")
            }
            _ => {}
        }
        if self.script_path.is_some() && self.kind != BackendKind::Mock {
            return bad("script path is only valid for the mock backend");
        }
        if self.model_name.trim().is_empty() {
            return bad("model name is empty");
        }
        Ok(())
    }
}

/// Builds the backend a config describes.
pub fn connect(cfg: &BackendConfig) -> Result<Arc<dyn ChatBackend>, GatewayError> {
    cfg.validate()?;
    Ok(match cfg.kind {
        BackendKind::Http => Arc::new(HttpBackend::new(cfg)?),
        BackendKind::Mock => {
            let mock = MockBackend::new();
            if let Some(path) = &cfg.script_path {
                mock.load_scripts(path)?;
            }
            Arc::new(mock)
        }
        BackendKind::Replay => Arc::new(ReplayBackend::open(
            cfg.cassette_path.as_ref().expect("validated"),
            DigestMode::Normalized,
        )?),
    })
}

/// One-shot completion against the backend a config describes.
pub fn complete(cfg: &BackendConfig, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
    connect(cfg)?.complete(req)
}

// ---------------------------------------------------------------------------
// HTTP
// ---------------------------------------------------------------------------

/// Chat-completions client. Retries transport failures and 429/5xx
/// statuses with exponential backoff inside the configured timeout.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
    timeout: Duration,
    max_retries: u32,
    initial_backoff: Duration,
    id: String,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl HttpBackend {
    pub fn new(cfg: &BackendConfig) -> Result<Self, GatewayError> {
        let endpoint = cfg
            .endpoint
            .clone()
            .ok_or_else(|| GatewayError::InvalidConfig("missing endpoint".into()))?;
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| GatewayError::InvalidConfig(e.to_string()))?;
        Ok(HttpBackend {
            client,
            id: format!("http:{}", cfg.model_name),
            endpoint,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            timeout: cfg.timeout,
            max_retries: cfg.max_retries,
            initial_backoff: cfg.initial_backoff,
        })
    }

    fn attempt(&self, body: &serde_json::Value, budget: Duration) -> Result<ChatResponse, GatewayError> {
        let started = Instant::now();
        let mut rb = self.client.post(&self.endpoint).timeout(budget).json(body);
        if let Some(key) = &self.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout(self.timeout)
            } else {
                GatewayError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            // Retryable: the body is left unread.
            return Err(GatewayError::BackendRefusal {
                status: status.as_u16(),
                message: status.canonical_reason().unwrap_or("server error").to_string(),
            });
        }
        if !status.is_success() {
            let message = resp.text().unwrap_or_default();
            return Err(GatewayError::BackendRefusal {
                status: status.as_u16(),
                message: message.trim().chars().take(500).collect(),
            });
        }
        // Past this point body bytes are being consumed: failures are final.
        let bytes = resp.bytes().map_err(|e| GatewayError::BodyRead(e.to_string()))?;
        let wire: WireResponse = serde_json::from_slice(&bytes)
            .map_err(|e| GatewayError::BodyRead(format!("malformed response body: {e}")))?;
        let text = wire
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::BodyRead("response has no message content".into()))?;
        Ok(ChatResponse {
            text,
            backend_id: self.id.clone(),
            latency: started.elapsed(),
            token_usage: wire.usage.map(|u| TokenUsage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            }),
        })
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        let body = serde_json::json!({
            "model": req.model,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let deadline = Instant::now() + self.timeout;
        let mut attempt = 0u32;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                return Err(GatewayError::Timeout(self.timeout));
            }
            let err = match self.attempt(&body, remaining) {
                Ok(resp) => return Ok(resp),
                Err(e) => e,
            };
            if !err.is_transient() || attempt >= self.max_retries {
                return Err(err);
            }
            let backoff = self.initial_backoff.saturating_mul(1 << attempt.min(16));
            if Instant::now() + backoff >= deadline {
                return Err(err);
            }
            tracing::warn!(attempt, error = %err, "retrying chat completion");
            std::thread::sleep(backoff);
            attempt += 1;
        }
    }

    fn backend_id(&self) -> &str {
        &self.id
    }
}

// ---------------------------------------------------------------------------
// Scripted mock
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum ScriptMatcher {
    /// Regex over the request tag.
    Tag(Regex),
    /// Regex over the concatenated prompt text.
    Prompt(Regex),
    Any,
}

impl ScriptMatcher {
    pub fn tag(pattern: &str) -> Result<Self, GatewayError> {
        Ok(ScriptMatcher::Tag(anchored(pattern)?))
    }

    pub fn prompt(pattern: &str) -> Result<Self, GatewayError> {
        Regex::new(pattern)
            .map(ScriptMatcher::Prompt)
            .map_err(|e| GatewayError::InvalidConfig(e.to_string()))
    }

    fn matches(&self, req: &ChatRequest) -> bool {
        match self {
            ScriptMatcher::Tag(re) => re.is_match(&req.request_tag),
            ScriptMatcher::Prompt(re) => re.is_match(&req.prompt_text()),
            ScriptMatcher::Any => true,
        }
    }
}

fn anchored(pattern: &str) -> Result<Regex, GatewayError> {
    Regex::new(&format!("^(?:{pattern})$")).map_err(|e| GatewayError::InvalidConfig(e.to_string()))
}

/// Mock script file line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    pub responses: Vec<String>,
    #[serde(default)]
    pub cycle: bool,
}

struct Script {
    matcher: ScriptMatcher,
    responses: Vec<String>,
    next: usize,
    cycle: bool,
}

impl Script {
    fn take(&mut self) -> Option<String> {
        if self.next >= self.responses.len() {
            if !self.cycle {
                return None;
            }
            self.next = 0;
        }
        let r = self.responses[self.next].clone();
        self.next += 1;
        Some(r)
    }
}

type Responder = dyn Fn(&ChatRequest) -> Option<String> + Send + Sync;

/// Deterministic scripted backend. Scripts are consulted in registration
/// order; the first matching script with a response left answers. A
/// responder closure, when set, answers whatever no script claims.
#[derive(Default)]
pub struct MockBackend {
    scripts: Mutex<Vec<Script>>,
    responder: Option<Box<Responder>>,
    log: Mutex<Vec<ChatRequest>>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_responder(
        responder: impl Fn(&ChatRequest) -> Option<String> + Send + Sync + 'static,
    ) -> Self {
        MockBackend {
            responder: Some(Box::new(responder)),
            ..Self::default()
        }
    }

    /// Matching requests consume `responses` in order until exhausted.
    pub fn register_script(
        &self,
        matcher: ScriptMatcher,
        responses: Vec<String>,
    ) -> Result<(), GatewayError> {
        self.push_script(matcher, responses, false)
    }

    /// Like [`register_script`](Self::register_script) but wraps around.
    pub fn register_cycle(
        &self,
        matcher: ScriptMatcher,
        responses: Vec<String>,
    ) -> Result<(), GatewayError> {
        self.push_script(matcher, responses, true)
    }

    fn push_script(
        &self,
        matcher: ScriptMatcher,
        responses: Vec<String>,
        cycle: bool,
    ) -> Result<(), GatewayError> {
        if responses.is_empty() {
            return Err(GatewayError::InvalidConfig("script has no responses".into()));
        }
        self.scripts.lock().expect("mock lock").push(Script {
            matcher,
            responses,
            next: 0,
            cycle,
        });
        Ok(())
    }

    pub fn register_spec(&self, spec: ScriptSpec) -> Result<(), GatewayError> {
        let matcher = match (&spec.tag, &spec.prompt) {
            (Some(_), Some(_)) => {
                return Err(GatewayError::InvalidConfig(
                    "script sets both tag and prompt patterns".into(),
                ))
            }
            (Some(t), None) => ScriptMatcher::tag(t)?,
            (None, Some(p)) => ScriptMatcher::prompt(p)?,
            (None, None) => ScriptMatcher::Any,
        };
        self.push_script(matcher, spec.responses, spec.cycle)
    }

    pub fn load_scripts(&self, path: &Path) -> Result<(), GatewayError> {
        let specs: Vec<ScriptSpec> =
            crate::persist::read_jsonl(path).map_err(|e| GatewayError::InvalidConfig(e.to_string()))?;
        specs.into_iter().try_for_each(|s| self.register_spec(s))
    }

    /// Requests seen so far, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("mock lock").clone()
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        let started = Instant::now();
        // One lock across lookup and consumption keeps the order well-defined.
        let mut scripts = self.scripts.lock().expect("mock lock");
        self.log.lock().expect("mock lock").push(req.clone());
        let scripted = scripts
            .iter_mut()
            .filter(|s| s.matcher.matches(req))
            .find_map(Script::take);
        drop(scripts);
        let text = scripted
            .or_else(|| self.responder.as_ref().and_then(|r| r(req)))
            .ok_or_else(|| GatewayError::MockExhausted(req.request_tag.clone()))?;
        Ok(ChatResponse {
            text,
            backend_id: "mock".into(),
            latency: started.elapsed(),
            token_usage: None,
        })
    }

    fn backend_id(&self) -> &str {
        "mock"
    }
}

// ---------------------------------------------------------------------------
// Cassettes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DigestMode {
    /// Whitespace runs collapse to one space before hashing.
    #[default]
    Normalized,
    Strict,
}

/// Stable hash of (request tag, message roles and texts).
pub fn request_digest(req: &ChatRequest, mode: DigestMode) -> String {
    let mut h = Sha256::new();
    h.update(req.request_tag.as_bytes());
    for m in &req.messages {
        h.update([0x1f]);
        h.update(serde_json::to_string(&m.role).expect("role serializes").as_bytes());
        h.update([0x1e]);
        match mode {
            DigestMode::Strict => h.update(m.content.as_bytes()),
            DigestMode::Normalized => {
                let collapsed = m.content.split_whitespace().collect::<Vec<_>>().join(" ");
                h.update(collapsed.as_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub digest: String,
    pub request_tag: String,
    pub response_text: String,
}

/// Wraps a backend and appends every successful exchange to a cassette.
pub struct RecordingBackend {
    inner: Arc<dyn ChatBackend>,
    out: Mutex<File>,
    mode: DigestMode,
    id: String,
}

impl RecordingBackend {
    pub fn new(
        inner: Arc<dyn ChatBackend>,
        cassette_path: &Path,
        mode: DigestMode,
    ) -> Result<Self, GatewayError> {
        let out = OpenOptions::new()
            .create(true)
            .append(true)
            .open(cassette_path)
            .map_err(|e| GatewayError::Cassette {
                path: cassette_path.to_path_buf(),
                message: e.to_string(),
            })?;
        Ok(RecordingBackend {
            id: format!("record:{}", inner.backend_id()),
            inner,
            out: Mutex::new(out),
            mode,
        })
    }
}

impl ChatBackend for RecordingBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let resp = self.inner.complete(req)?;
        let entry = CassetteEntry {
            digest: request_digest(req, self.mode),
            request_tag: req.request_tag.clone(),
            response_text: resp.text.clone(),
        };
        let mut line = serde_json::to_string(&entry).expect("entry serializes");
        line.push('\n');
        let mut out = self.out.lock().expect("cassette lock");
        out.write_all(line.as_bytes())
            .and_then(|_| out.flush())
            .map_err(|e| GatewayError::Transport(format!("cassette write failed: {e}")))?;
        Ok(resp)
    }

    fn backend_id(&self) -> &str {
        &self.id
    }
}

/// Wraps the backend `cfg` describes in a recorder writing to `cassette_path`.
pub fn record(cfg: &BackendConfig, cassette_path: &Path) -> Result<RecordingBackend, GatewayError> {
    RecordingBackend::new(connect(cfg)?, cassette_path, DigestMode::Normalized)
}

/// Opens a cassette for offline replay.
pub fn replay(cassette_path: &Path) -> Result<ReplayBackend, GatewayError> {
    ReplayBackend::open(cassette_path, DigestMode::Normalized)
}

/// Serves recorded responses by request digest. Repeated identical requests
/// are answered in recording order.
pub struct ReplayBackend {
    entries: Mutex<HashMap<String, VecDeque<String>>>,
    empty: bool,
    mode: DigestMode,
}

impl ReplayBackend {
    pub fn open(path: &Path, mode: DigestMode) -> Result<Self, GatewayError> {
        let file = File::open(path).map_err(|e| GatewayError::Cassette {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut entries: Vec<CassetteEntry> = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| GatewayError::Cassette {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| GatewayError::Cassette {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", n + 1),
            })?);
        }
        Ok(ReplayBackend::from_entries(entries, mode))
    }

    pub fn from_entries(entries: Vec<CassetteEntry>, mode: DigestMode) -> Self {
        let empty = entries.is_empty();
        let mut map: HashMap<String, VecDeque<String>> = HashMap::new();
        for e in entries {
            map.entry(e.digest).or_default().push_back(e.response_text);
        }
        ReplayBackend {
            entries: Mutex::new(map),
            empty,
            mode,
        }
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        if self.empty {
            return Err(GatewayError::MockExhausted(req.request_tag.clone()));
        }
        let digest = request_digest(req, self.mode);
        let text = self
            .entries
            .lock()
            .expect("replay lock")
            .get_mut(&digest)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| GatewayError::CassetteMiss {
                tag: req.request_tag.clone(),
                digest,
            })?;
        Ok(ChatResponse {
            text,
            backend_id: "replay".into(),
            latency: Duration::ZERO,
            token_usage: None,
        })
    }

    fn backend_id(&self) -> &str {
        "replay"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(tag: &str, text: &str) -> ChatRequest {
        ChatRequest::new("m", tag, vec![ChatMessage::user(text)])
    }

    #[test]
    fn scripted_echo() {
        let mock = MockBackend::new();
        mock.register_script(ScriptMatcher::Any, vec!["STRATEGY: Encouraging".into()])
            .unwrap();
        let r = mock.complete(&req("conversation", "hello")).unwrap();
        assert_eq!(r.text, "STRATEGY: Encouraging");
        assert!(matches!(
            mock.complete(&req("conversation", "hello")),
            Err(GatewayError::MockExhausted(_))
        ));
    }

    #[test]
    fn scripts_match_by_tag_then_prompt() {
        let mock = MockBackend::new();
        mock.register_script(ScriptMatcher::tag("next_speaker").unwrap(), vec!["a".into(), "b".into()])
            .unwrap();
        mock.register_script(ScriptMatcher::prompt("budget").unwrap(), vec!["c".into()])
            .unwrap();
        assert_eq!(mock.complete(&req("next_speaker", "x")).unwrap().text, "a");
        assert_eq!(mock.complete(&req("other", "the budget is")).unwrap().text, "c");
        assert_eq!(mock.complete(&req("next_speaker", "x")).unwrap().text, "b");
        // tag patterns are anchored
        assert!(mock.complete(&req("next_speaker_2", "x")).is_err());
        assert_eq!(mock.requests().len(), 4);
    }

    #[test]
    fn cycle_scripts_wrap() {
        let mock = MockBackend::new();
        mock.register_cycle(ScriptMatcher::Any, vec!["1".into(), "2".into()]).unwrap();
        let got: Vec<_> = (0..5).map(|_| mock.complete(&req("t", "x")).unwrap().text).collect();
        assert_eq!(got, ["1", "2", "1", "2", "1"]);
    }

    #[test]
    fn empty_script_rejected() {
        assert!(MockBackend::new().register_script(ScriptMatcher::Any, vec![]).is_err());
    }

    #[test]
    fn request_validation() {
        let mut r = req("t", "x");
        r.temperature = 2.5;
        assert!(r.validate().is_err());
        let r = ChatRequest::new("m", "t", vec![]);
        assert!(r.validate().is_err());
        let r = ChatRequest::new(
            "m",
            "t",
            vec![ChatMessage {
                role: Role::Assistant,
                content: "x".into(),
            }],
        );
        assert!(r.validate().is_err());
        assert!(req("t", "  ").validate().is_err());
    }

    #[test]
    fn digest_normalizes_whitespace_unless_strict() {
        let a = req("t", "hello   world\n");
        let b = req("t", "hello world");
        assert_eq!(request_digest(&a, DigestMode::Normalized), request_digest(&b, DigestMode::Normalized));
        assert_ne!(request_digest(&a, DigestMode::Strict), request_digest(&b, DigestMode::Strict));
        assert_ne!(
            request_digest(&req("t1", "x"), DigestMode::Normalized),
            request_digest(&req("t2", "x"), DigestMode::Normalized)
        );
    }

    #[test]
    fn empty_cassette_is_exhausted() {
        let replay = ReplayBackend::from_entries(vec![], DigestMode::Normalized);
        assert!(matches!(
            replay.complete(&req("t", "x")),
            Err(GatewayError::MockExhausted(_))
        ));
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mock = Arc::new(MockBackend::new());
        mock.register_script(ScriptMatcher::Any, vec!["one".into(), "two".into(), "three".into()])
            .unwrap();
        let rec = RecordingBackend::new(mock, &path, DigestMode::Normalized).unwrap();
        assert_eq!(rec.complete(&req("a", "x")).unwrap().text, "one");
        assert_eq!(rec.complete(&req("a", "x")).unwrap().text, "two");
        assert_eq!(rec.complete(&req("b", "y")).unwrap().text, "three");

        let replay = replay(&path).unwrap();
        assert_eq!(replay.complete(&req("b", "y  ")).unwrap().text, "three");
        assert_eq!(replay.complete(&req("a", "x")).unwrap().text, "one");
        assert_eq!(replay.complete(&req("a", "x")).unwrap().text, "two");
        assert!(matches!(
            replay.complete(&req("a", "x")),
            Err(GatewayError::CassetteMiss { .. })
        ));
        assert!(matches!(
            replay.complete(&req("zzz", "x")),
            Err(GatewayError::CassetteMiss { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(BackendConfig::mock("m").validate().is_ok());
        assert!(BackendConfig::http("http://x", "m").validate().is_ok());
        let mut c = BackendConfig::mock("m");
        c.kind = BackendKind::Http;
        assert!(c.validate().is_err());
        let mut c = BackendConfig::replay("c.jsonl", "m");
        c.cassette_path = None;
        assert!(c.validate().is_err());
        let mut c = BackendConfig::mock("m");
        c.cassette_path = Some("x".into());
        assert!(c.validate().is_err());
    }
}
