//! Provider-agnostic access to text completion models.
//!
//! Every request goes through a [`Gateway`], which renders a
//! [`PromptTemplate`], consults the content-addressed response cache, calls the
//! configured provider and parses the final answer marker out of a
//! chain-of-thought style reply. The mock and cache-replay providers never
//! touch the network.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Environment variable holding the remote API credential.
pub const DEFAULT_API_KEY_ENV: &str = "PROTOCHECK_API_KEY";
pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";
pub const DEFAULT_MODEL: &str = "gpt-4-0613";

pub const YES_NO_REMINDER: &str = "Answer with ANSWER: YES or ANSWER: NO only.";
pub const FIELDS_REMINDER: &str =
    "End your reply with the fenced ```answer block of key: value lines only.";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("template {template}: placeholder {{{name}}} is not bound")]
    UnboundPlaceholder { template: String, name: String },
    #[error("template {template}: placeholder {{{name}}} is not declared")]
    UndeclaredPlaceholder { template: String, name: String },
    #[error("template {template}: unbalanced brace in body")]
    MalformedTemplate { template: String },
    #[error("unknown prompt template {0:?}")]
    UnknownTemplate(String),
    #[error("cache miss in replay mode for request {hash}")]
    CacheMiss { hash: String },
    #[error("cache entry {hash} does not match its request")]
    CacheCorrupt { hash: String },
    #[error("no answer marker in model output for {template} after {attempts} attempt(s)")]
    Unparseable { template: String, attempts: u32 },
    #[error("provider error: {0}")]
    Provider(String),
    #[error("credential variable {0} is not set")]
    MissingCredential(String),
    #[error("cache i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("cache record: {0}")]
    Record(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    RemoteChatApi,
    CacheReplay,
    #[default]
    Mock,
}

/// Unknown keys are rejected so that a credential pasted into a config file
/// fails loudly instead of being ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub provider: ProviderKind,
    /// Pinned model snapshot.
    pub model_id: String,
    /// Per-template model overrides, keyed by template id.
    pub model_overrides: BTreeMap<String, String>,
    pub temperature: f64,
    pub max_attempts: u32,
    pub cache_dir: PathBuf,
    pub max_concurrency: usize,
    pub endpoint: String,
    pub api_key_env: String,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            provider: ProviderKind::Mock,
            model_id: DEFAULT_MODEL.to_string(),
            model_overrides: BTreeMap::new(),
            temperature: 0.0,
            max_attempts: 3,
            cache_dir: PathBuf::from("llm-cache"),
            max_concurrency: 4,
            endpoint: DEFAULT_ENDPOINT.to_string(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
        }
    }
}

impl LlmConfig {
    pub fn model_for(&self, template_id: &str) -> &str {
        self.model_overrides
            .get(template_id)
            .map(String::as_str)
            .unwrap_or(&self.model_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerContract {
    YesNo,
    StructuredFields,
}

/// A prompt with `{name}` placeholders. `{{` and `}}` are literal braces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub role_preamble: String,
    pub body: String,
    pub answer_contract: AnswerContract,
    pub placeholders: Vec<String>,
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn tokenize<'a>(template_id: &str, body: &'a str) -> Result<Vec<Piece<'a>>, LlmError> {
    let malformed = || LlmError::MalformedTemplate { template: template_id.to_string() };
    let mut pieces = Vec::new();
    let mut rest = body;
    while !rest.is_empty() {
        let next = rest.find(['{', '}']);
        let Some(i) = next else {
            pieces.push(Piece::Text(rest));
            break;
        };
        if i > 0 {
            pieces.push(Piece::Text(&rest[..i]));
        }
        let tail = &rest[i..];
        if tail.starts_with("{{") {
            pieces.push(Piece::Text("{"));
            rest = &tail[2..];
        } else if tail.starts_with("}}") {
            pieces.push(Piece::Text("}"));
            rest = &tail[2..];
        } else if tail.starts_with('}') {
            return Err(malformed());
        } else {
            let end = tail.find('}').ok_or_else(malformed)?;
            let name = &tail[1..end];
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(malformed());
            }
            pieces.push(Piece::Slot(name));
            rest = &tail[end + 1..];
        }
    }
    Ok(pieces)
}

impl PromptTemplate {
    /// Builds a template, checking that every placeholder in the body is
    /// declared.
    pub fn new(
        template_id: impl Into<String>,
        role_preamble: impl Into<String>,
        body: impl Into<String>,
        answer_contract: AnswerContract,
        placeholders: &[&str],
    ) -> Result<Self, LlmError> {
        let t = PromptTemplate {
            template_id: template_id.into(),
            role_preamble: role_preamble.into(),
            body: body.into(),
            answer_contract,
            placeholders: placeholders.iter().map(|s| s.to_string()).collect(),
        };
        t.check()?;
        Ok(t)
    }

    pub fn check(&self) -> Result<(), LlmError> {
        for piece in tokenize(&self.template_id, &self.body)? {
            if let Piece::Slot(name) = piece {
                if !self.placeholders.iter().any(|p| p == name) {
                    return Err(LlmError::UndeclaredPlaceholder {
                        template: self.template_id.clone(),
                        name: name.to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// A rendered prompt, split into the role preamble and the task body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

impl RenderedPrompt {
    /// Full prompt text: preamble, a blank line, then the body.
    pub fn text(&self) -> String {
        if self.system.is_empty() {
            self.user.clone()
        } else {
            format!("{}\n\n{}", self.system, self.user)
        }
    }
}

/// Renders a template. Unused bindings are logged and returned.
pub fn render_prompt(
    template: &PromptTemplate,
    bindings: &BTreeMap<String, String>,
) -> Result<(RenderedPrompt, Vec<String>), LlmError> {
    template.check()?;
    let mut out = String::with_capacity(template.body.len());
    let mut used = BTreeSet::new();
    for piece in tokenize(&template.template_id, &template.body)? {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot(name) => {
                let value = bindings.get(name).ok_or_else(|| LlmError::UnboundPlaceholder {
                    template: template.template_id.clone(),
                    name: name.to_string(),
                })?;
                used.insert(name);
                out.push_str(value);
            }
        }
    }
    let unused: Vec<String> = bindings
        .keys()
        .filter(|k| !used.contains(k.as_str()))
        .cloned()
        .collect();
    for k in &unused {
        log::warn!("template {}: binding {k:?} is not used", template.template_id);
    }
    Ok((
        RenderedPrompt { system: template.role_preamble.clone(), user: out },
        unused,
    ))
}

/// Renders a template to its full prompt text.
pub fn render(template: &PromptTemplate, bindings: &BTreeMap<String, String>) -> Result<String, LlmError> {
    render_prompt(template, bindings).map(|(p, _)| p.text())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Yes,
    No,
    Fields(BTreeMap<String, String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LlmVerdict {
    pub raw_text: String,
    pub decision: Decision,
    /// Everything before the final answer marker.
    pub rationale: String,
}

impl LlmVerdict {
    pub fn is_yes(&self) -> Option<bool> {
        match self.decision {
            Decision::Yes => Some(true),
            Decision::No => Some(false),
            Decision::Fields(_) => None,
        }
    }

    pub fn fields(&self) -> Option<&BTreeMap<String, String>> {
        match &self.decision {
            Decision::Fields(f) => Some(f),
            _ => None,
        }
    }
}

fn parse_yes_no(raw: &str) -> Option<(Decision, String)> {
    let lines: Vec<&str> = raw.lines().collect();
    let last = lines.iter().rposition(|l| !l.trim().is_empty())?;
    let line = lines[last].trim().trim_matches('*').trim();
    let (key, value) = line.split_once(':')?;
    if !key.trim().eq_ignore_ascii_case("answer") {
        return None;
    }
    let value = value.trim().trim_end_matches(['.', '!']).trim().trim_matches('*');
    let decision = if value.eq_ignore_ascii_case("yes") {
        Decision::Yes
    } else if value.eq_ignore_ascii_case("no") {
        Decision::No
    } else {
        return None;
    };
    Some((decision, lines[..last].join("\n").trim().to_string()))
}

fn parse_fields(raw: &str) -> Option<(Decision, String)> {
    let lines: Vec<&str> = raw.lines().collect();
    let close = lines.iter().rposition(|l| l.trim() == "```")?;
    let open = lines[..close]
        .iter()
        .rposition(|l| matches!(l.trim(), "```" | "```answer"))?;
    if lines[close + 1..].iter().any(|l| !l.trim().is_empty()) {
        return None;
    }
    let mut fields = BTreeMap::new();
    for line in &lines[open + 1..close] {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once(':')?;
        fields.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
    }
    Some((Decision::Fields(fields), lines[..open].join("\n").trim().to_string()))
}

/// Parses a model reply according to its answer contract. The decision comes
/// only from the final marker: a trailing `ANSWER: YES|NO` line, or a trailing
/// fenced block of `key: value` lines.
pub fn parse_answer(contract: AnswerContract, raw: &str) -> Option<LlmVerdict> {
    let (decision, rationale) = match contract {
        AnswerContract::YesNo => parse_yes_no(raw)?,
        AnswerContract::StructuredFields => parse_fields(raw)?,
    };
    Some(LlmVerdict { raw_text: raw.to_string(), decision, rationale })
}

/// One fully rendered request as seen by a provider.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub template_id: String,
    /// The protocol the request concerns, if any. Not part of the cache key.
    pub subject: Option<String>,
    pub model_id: String,
    pub temperature: f64,
    pub prompt: RenderedPrompt,
}

impl CompletionRequest {
    pub fn cache_key(&self) -> String {
        cache_key(&self.model_id, &self.prompt.text(), self.temperature)
    }
}

/// Content hash of `(model_id, prompt, temperature)`, hex encoded.
pub fn cache_key(model_id: &str, prompt: &str, temperature: f64) -> String {
    let mut h = Sha256::new();
    h.update(model_id.as_bytes());
    h.update([0u8]);
    h.update(temperature.to_bits().to_be_bytes());
    h.update([0u8]);
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

pub trait Provider: Send + Sync {
    fn name(&self) -> &str;
    fn send(&self, request: &CompletionRequest) -> Result<String, LlmError>;
}

/// Offline provider answering from scripted responses.
///
/// Lookup order: `(template, subject)` script, then a per-template default,
/// then the global fallback. A script with several responses pops them in
/// order and repeats the last one.
#[derive(Debug, Default)]
pub struct MockProvider {
    scripts: Mutex<HashMap<(String, Option<String>), VecDeque<String>>>,
    defaults: HashMap<String, String>,
    fallback: Option<String>,
    calls: AtomicUsize,
    log: Mutex<Vec<CompletionRequest>>,
}

impl MockProvider {
    pub fn new() -> Self {
        Self::default()
    }

    /// A provider that answers every request with `text`.
    pub fn answering(text: impl Into<String>) -> Self {
        MockProvider { fallback: Some(text.into()), ..Self::default() }
    }

    pub fn with_response(self, template_id: &str, subject: Option<&str>, text: impl Into<String>) -> Self {
        self.with_sequence(template_id, subject, vec![text.into()])
    }

    pub fn with_sequence(self, template_id: &str, subject: Option<&str>, texts: Vec<String>) -> Self {
        self.scripts
            .lock()
            .expect("mock lock")
            .insert((template_id.to_string(), subject.map(str::to_string)), texts.into());
        self
    }

    pub fn with_default(mut self, template_id: &str, text: impl Into<String>) -> Self {
        self.defaults.insert(template_id.to_string(), text.into());
        self
    }

    pub fn with_fallback(mut self, text: impl Into<String>) -> Self {
        self.fallback = Some(text.into());
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.log.lock().expect("mock lock").clone()
    }
}

impl Provider for MockProvider {
    fn name(&self) -> &str {
        "mock"
    }

    fn send(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().expect("mock lock").push(request.clone());
        let mut scripts = self.scripts.lock().expect("mock lock");
        let key = (request.template_id.clone(), request.subject.clone());
        if let Some(queue) = scripts.get_mut(&key) {
            let text = if queue.len() > 1 { queue.pop_front() } else { queue.front().cloned() };
            if let Some(text) = text {
                return Ok(text);
            }
        }
        self.defaults
            .get(&request.template_id)
            .or(self.fallback.as_ref())
            .cloned()
            .ok_or_else(|| {
                LlmError::Provider(format!(
                    "mock has no response for template {} (subject {:?})",
                    request.template_id, request.subject
                ))
            })
    }
}

/// Minimal JSON-over-HTTP transport so remote calls can be intercepted.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &serde_json::Value,
    ) -> Result<serde_json::Value, String>;
}

#[derive(Debug)]
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpTransport { agent }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        HttpTransport::new(Duration::from_secs(120))
    }
}

impl Transport for HttpTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &serde_json::Value,
    ) -> Result<serde_json::Value, String> {
        let mut response = self
            .agent
            .post(url)
            .header("Authorization", &format!("Bearer {bearer}"))
            .send_json(body)
            .map_err(|e| e.to_string())?;
        response
            .body_mut()
            .read_json::<serde_json::Value>()
            .map_err(|e| e.to_string())
    }
}

/// Chat-completions style remote provider.
pub struct RemoteChatProvider {
    endpoint: String,
    api_key: String,
    transport: Arc<dyn Transport>,
}

impl RemoteChatProvider {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>, transport: Arc<dyn Transport>) -> Self {
        RemoteChatProvider { endpoint: endpoint.into(), api_key: api_key.into(), transport }
    }

    /// Reads the credential from the configured environment variable.
    pub fn from_env(cfg: &LlmConfig, transport: Arc<dyn Transport>) -> Result<Self, LlmError> {
        let key = std::env::var(&cfg.api_key_env)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| LlmError::MissingCredential(cfg.api_key_env.clone()))?;
        Ok(Self::new(cfg.endpoint.clone(), key, transport))
    }
}

impl Provider for RemoteChatProvider {
    fn name(&self) -> &str {
        "remote-chat-api"
    }

    fn send(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let mut messages = Vec::new();
        if !request.prompt.system.is_empty() {
            messages.push(serde_json::json!({"role": "system", "content": request.prompt.system}));
        }
        messages.push(serde_json::json!({"role": "user", "content": request.prompt.user}));
        let body = serde_json::json!({
            "model": request.model_id,
            "temperature": request.temperature,
            "messages": messages,
        });
        let reply = self
            .transport
            .post_json(&self.endpoint, &self.api_key, &body)
            .map_err(LlmError::Provider)?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::Provider(format!("malformed response: {reply}")))
    }
}

/// One cached exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub model_id: String,
    pub prompt: String,
    pub temperature: f64,
    pub raw_response: String,
    /// Seconds since the Unix epoch when the response was recorded.
    pub timestamp: u64,
}

/// One file per request, named by the request's hex content hash.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ResponseCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, hash: &str) -> PathBuf {
        self.dir.join(hash)
    }

    pub fn get(&self, request: &CompletionRequest) -> Result<Option<CacheRecord>, LlmError> {
        let hash = request.cache_key();
        let path = self.path_for(&hash);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let record: CacheRecord = toml::from_str(&text).map_err(|e| LlmError::Record(e.to_string()))?;
        if record.model_id != request.model_id
            || record.prompt != request.prompt.text()
            || record.temperature.to_bits() != request.temperature.to_bits()
        {
            return Err(LlmError::CacheCorrupt { hash });
        }
        Ok(Some(record))
    }

    /// Writes the record atomically (temp file in the same directory, then rename).
    pub fn put(&self, request: &CompletionRequest, raw_response: &str) -> Result<CacheRecord, LlmError> {
        fs::create_dir_all(&self.dir)?;
        let record = CacheRecord {
            model_id: request.model_id.clone(),
            prompt: request.prompt.text(),
            temperature: request.temperature,
            raw_response: raw_response.to_string(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        let text = toml::to_string(&record).map_err(|e| LlmError::Record(e.to_string()))?;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(text.as_bytes())?;
        tmp.persist(self.path_for(&request.cache_key()))
            .map_err(|e| LlmError::Io(e.error))?;
        Ok(record)
    }
}

#[derive(Debug)]
struct Limiter {
    cap: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    fn acquire(&self) -> LimiterGuard<'_> {
        let mut n = self.in_flight.lock().expect("limiter lock");
        while *n >= self.cap {
            n = self.freed.wait(n).expect("limiter lock");
        }
        *n += 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().expect("limiter lock") -= 1;
        self.0.freed.notify_one();
    }
}

/// Entry point for every model call in the pipeline.
pub struct Gateway {
    cfg: LlmConfig,
    provider: Option<Arc<dyn Provider>>,
    cache: ResponseCache,
    limiter: Limiter,
}

impl Gateway {
    /// `provider` is ignored in cache-replay mode and required otherwise.
    pub fn new(cfg: LlmConfig, provider: Option<Arc<dyn Provider>>) -> Self {
        let cache = ResponseCache::new(cfg.cache_dir.clone());
        let limiter = Limiter {
            cap: cfg.max_concurrency.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        };
        Gateway { cfg, provider, cache, limiter }
    }

    pub fn mock(provider: Arc<MockProvider>) -> Self {
        let cfg = LlmConfig { provider: ProviderKind::Mock, ..LlmConfig::default() };
        Gateway::new(cfg, Some(provider))
    }

    pub fn config(&self) -> &LlmConfig {
        &self.cfg
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    fn fetch(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        match self.cfg.provider {
            ProviderKind::CacheReplay => match self.cache.get(request)? {
                Some(record) => Ok(record.raw_response),
                None => Err(LlmError::CacheMiss { hash: request.cache_key() }),
            },
            ProviderKind::RemoteChatApi => {
                if let Some(record) = self.cache.get(request)? {
                    return Ok(record.raw_response);
                }
                let raw = self.send_with_retries(request)?;
                self.cache.put(request, &raw)?;
                Ok(raw)
            }
            ProviderKind::Mock => self.send_with_retries(request),
        }
    }

    fn send_with_retries(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let provider = self
            .provider
            .as_ref()
            .ok_or_else(|| LlmError::Provider("no provider configured".into()))?;
        let attempts = self.cfg.max_attempts.max(1);
        let mut last = None;
        for attempt in 1..=attempts {
            let _slot = self.limiter.acquire();
            match provider.send(request) {
                Ok(raw) => return Ok(raw),
                Err(e @ LlmError::Provider(_)) => {
                    log::warn!("{} attempt {attempt}/{attempts} failed: {e}", provider.name());
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.unwrap_or_else(|| LlmError::Provider("no attempts made".into())))
    }

    /// Renders, sends and parses. An unparseable reply is re-asked with a
    /// terse answer-format reminder appended, up to `max_attempts` times.
    pub fn complete(
        &self,
        template: &PromptTemplate,
        bindings: &BTreeMap<String, String>,
        subject: Option<&str>,
    ) -> Result<LlmVerdict, LlmError> {
        let (prompt, _) = render_prompt(template, bindings)?;
        let reminder = match template.answer_contract {
            AnswerContract::YesNo => YES_NO_REMINDER,
            AnswerContract::StructuredFields => FIELDS_REMINDER,
        };
        let attempts = self.cfg.max_attempts.max(1);
        let mut request = CompletionRequest {
            template_id: template.template_id.clone(),
            subject: subject.map(str::to_string),
            model_id: self.cfg.model_for(&template.template_id).to_string(),
            temperature: self.cfg.temperature,
            prompt,
        };
        for attempt in 1..=attempts {
            let raw = self.fetch(&request)?;
            if let Some(verdict) = parse_answer(template.answer_contract, &raw) {
                return Ok(verdict);
            }
            log::debug!("{}: unparseable reply on attempt {attempt}", template.template_id);
            request.prompt.user = format!("{}\n\n{reminder}", request.prompt.user);
        }
        Err(LlmError::Unparseable { template: template.template_id.clone(), attempts })
    }
}

/// The prompt templates used by the pipeline, keyed by template id.
#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: BTreeMap<String, PromptTemplate>,
}

#[derive(Deserialize)]
struct PromptFile {
    template: Vec<PromptTemplate>,
}

const PROMPTS_EN: &str = include_str!("../data/prompts/en/templates.toml");

impl PromptSet {
    /// Built-in templates for a locale. Only English ships.
    pub fn builtin(locale: &str) -> Result<Self, LlmError> {
        match locale {
            "en" => Self::parse(PROMPTS_EN),
            other => Err(LlmError::UnknownTemplate(format!("no built-in prompts for locale {other:?}"))),
        }
    }

    pub fn parse(text: &str) -> Result<Self, LlmError> {
        let file: PromptFile = toml::from_str(text).map_err(|e| LlmError::Record(e.to_string()))?;
        let mut templates = BTreeMap::new();
        for t in file.template {
            t.check()?;
            templates.insert(t.template_id.clone(), t);
        }
        Ok(PromptSet { templates })
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate, LlmError> {
        self.templates.get(id).ok_or_else(|| LlmError::UnknownTemplate(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }
}
