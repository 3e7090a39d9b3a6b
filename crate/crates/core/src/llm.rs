//! Chat-completion client that labels posts and argues its label during
//! negotiation.
//!
//! The wire transport is behind [`ChatTransport`] so annotation runs can be
//! replayed from recorded replies. Every request/reply pair is appended to an
//! audit log before the reply is parsed.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotation::{ConflictCase, Elaborator};
use crate::ingest::Post;
use crate::taxonomy::ChallengeCategory;

pub const CATEGORIZE_TEMPLATE: &str = include_str!("../prompts/categorize.txt");
pub const NEGOTIATE_TEMPLATE: &str = include_str!("../prompts/negotiate.txt");

pub const SYSTEM_PROMPT: &str =
    "You are an expert annotator of quantum software engineering developer discussions.";

/// Order in which categories are listed inside prompts.
const PROMPT_ORDER: [ChallengeCategory; 6] = [
    ChallengeCategory::Conceptual,
    ChallengeCategory::Theoretical,
    ChallengeCategory::Tooling,
    ChallengeCategory::Learning,
    ChallengeCategory::Errors,
    ChallengeCategory::ApiUsage,
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("network error: {0}")]
    Network(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed completion payload: {0}")]
    Payload(String),
    #[error("no recorded reply for prompt {0}")]
    NoRecording(String),
}

impl TransportError {
    fn is_transient(&self) -> bool {
        match self {
            TransportError::Timeout | TransportError::Network(_) => true,
            TransportError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("no category name found in reply")]
    UnparsableReply { reply: String },
    #[error("reply names several categories ({candidates:?}) without a Category: line")]
    AmbiguousReply {
        reply: String,
        candidates: Vec<ChallengeCategory>,
    },
    #[error("chat service unavailable after {attempts} attempts: {last}")]
    ServiceUnavailable { attempts: u32, last: TransportError },
    #[error("chat service rejected the request: {0}")]
    Rejected(TransportError),
    #[error("post {0} has an empty body")]
    EmptyBody(String),
    #[error("conflict for {0} is already resolved")]
    CaseResolved(String),
    #[error("audit log: {0}")]
    Audit(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub system: String,
    pub user: String,
    pub temperature: f32,
}

impl ChatRequest {
    /// Stable fingerprint of what the model sees.
    pub fn fingerprint(&self) -> String {
        prompt_fingerprint(&self.system, &self.user)
    }
}

pub fn prompt_fingerprint(system: &str, user: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(system.as_bytes());
    hasher.update([0u8]);
    hasher.update(user.as_bytes());
    hex::encode(hasher.finalize())
}

pub trait ChatTransport: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError>;
}

/// OpenAI-style `chat/completions` endpoint.
pub struct HttpTransport {
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("HTTP client configuration is static");
        HttpTransport {
            url: url.into(),
            api_key,
            client,
        }
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let body = serde_json::json!({
            "model": request.model,
            "temperature": request.temperature,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
        });
        let mut builder = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Network(e.to_string())
            }
        })?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        if !status.is_success() {
            return Err(TransportError::Http {
                status: status.as_u16(),
                body: text,
            });
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| TransportError::Payload(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| TransportError::Payload("missing choices[0].message.content".into()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Recording {
    pub prompt_sha256: String,
    pub reply: String,
}

/// Replays replies recorded against prompt fingerprints.
#[derive(Debug, Default, Clone)]
pub struct ReplayTransport {
    replies: HashMap<String, String>,
}

impl ReplayTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, fingerprint: impl Into<String>, reply: impl Into<String>) {
        self.replies.insert(fingerprint.into(), reply.into());
    }

    /// Loads a JSONL file of [`Recording`]s or [`AuditEntry`] lines, so an
    /// audit log from a live session can be replayed as is.
    pub fn from_jsonl(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let mut this = Self::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let invalid = |e: serde_json::Error| std::io::Error::new(std::io::ErrorKind::InvalidData, e);
            let value: serde_json::Value = serde_json::from_str(&line).map_err(invalid)?;
            if value.get("prompt_sha256").is_some() {
                let rec: Recording = serde_json::from_value(value).map_err(invalid)?;
                this.insert(rec.prompt_sha256, rec.reply);
            } else {
                let entry: AuditEntry = serde_json::from_value(value).map_err(invalid)?;
                this.insert(prompt_fingerprint(SYSTEM_PROMPT, &entry.prompt), entry.raw_reply);
            }
        }
        Ok(this)
    }
}

impl ChatTransport for ReplayTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let key = request.fingerprint();
        self.replies
            .get(&key)
            .cloned()
            .ok_or(TransportError::NoRecording(key))
    }
}

/// Transport driven by a closure; handy for tests and scripted sessions.
pub struct FnTransport<F>(pub F);

impl<F> ChatTransport for FnTransport<F>
where
    F: Fn(&ChatRequest) -> Result<String, TransportError> + Send + Sync,
{
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        (self.0)(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Human,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegotiationTurn {
    pub speaker: Speaker,
    pub message: String,
    pub proposed_category: Option<ChallengeCategory>,
    pub timestamp: DateTime<Utc>,
}

impl NegotiationTurn {
    pub fn new(
        speaker: Speaker,
        message: impl Into<String>,
        proposed_category: Option<ChallengeCategory>,
    ) -> Self {
        NegotiationTurn {
            speaker,
            message: message.into(),
            proposed_category,
            timestamp: Utc::now(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmLabelResponse {
    pub category: ChallengeCategory,
    pub rationale: String,
    pub raw_reply: String,
    pub model_id: String,
    pub latency_ms: u64,
}

fn category_line_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^[\s*#>_-]*(?:final\s+)?category[\s*_]*:(.*)$").unwrap())
}

fn rationale_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?is)^[\s*#>_-]*rationale[\s*_]*:(.*)$").unwrap())
}

fn name_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(tooling|theoretical|learning|conceptual|errors|api\s?usage)\b").unwrap()
    })
}

fn names_in(text: &str) -> Vec<ChallengeCategory> {
    let mut found = Vec::new();
    for m in name_regex().find_iter(text) {
        let cat: ChallengeCategory = m.as_str().parse().expect("regex only matches category names");
        if !found.contains(&cat) {
            found.push(cat);
        }
    }
    found
}

/// Extracts the category from a model reply.
///
/// Priority: a `Category: <name>` line (first name on that line wins), then
/// the single category name mentioned anywhere, otherwise an error.
pub fn parse_category(reply: &str) -> Result<ChallengeCategory, LlmError> {
    for caps in category_line_regex().captures_iter(reply) {
        if let Some(first) = names_in(&caps[1]).first() {
            return Ok(*first);
        }
    }
    match names_in(reply).as_slice() {
        [] => Err(LlmError::UnparsableReply {
            reply: reply.to_string(),
        }),
        [only] => Ok(*only),
        many => Err(LlmError::AmbiguousReply {
            reply: reply.to_string(),
            candidates: many.to_vec(),
        }),
    }
}

/// The `Rationale:` section if present, else the reply without its category line.
pub fn parse_rationale(reply: &str) -> String {
    let mut lines = reply.lines();
    while let Some(line) = lines.next() {
        if let Some(caps) = rationale_regex().captures(line) {
            let mut text = caps[1].trim().to_string();
            for rest in lines.by_ref() {
                text.push('\n');
                text.push_str(rest);
            }
            let text = text.trim().to_string();
            if !text.is_empty() {
                return text;
            }
            break;
        }
    }
    let stripped = category_line_regex().replace_all(reply, "");
    let stripped = stripped.trim();
    if stripped.is_empty() {
        reply.trim().to_string()
    } else {
        stripped.to_string()
    }
}

#[derive(Debug, Clone)]
pub struct PromptTemplates {
    pub categorize: String,
    pub negotiate: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            categorize: CATEGORIZE_TEMPLATE.to_string(),
            negotiate: NEGOTIATE_TEMPLATE.to_string(),
        }
    }
}

impl PromptTemplates {
    /// Loads `categorize.txt` and `negotiate.txt` from a directory.
    pub fn from_dir(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        let dir = dir.as_ref();
        Ok(PromptTemplates {
            categorize: std::fs::read_to_string(dir.join("categorize.txt"))?,
            negotiate: std::fs::read_to_string(dir.join("negotiate.txt"))?,
        })
    }

    pub fn categories_block() -> String {
        PROMPT_ORDER
            .iter()
            .map(|c| format!("- {}: {}", c.name(), c.definition()))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn render_categorize(&self, title: &str, body: &str) -> String {
        self.categorize
            .replace("{categories}", &Self::categories_block())
            .replace("{title}", title)
            .replace("{body}", body)
    }

    pub fn render_negotiate(&self, case: &ConflictCase, title: &str, body: &str) -> String {
        let transcript = if case.turns.is_empty() {
            "(no prior turns)".to_string()
        } else {
            case.turns
                .iter()
                .map(|t| {
                    let who = match t.speaker {
                        Speaker::Human => "Human",
                        Speaker::Llm => "Assistant",
                    };
                    match t.proposed_category {
                        Some(c) => format!("{who} [{c}]: {}", t.message),
                        None => format!("{who}: {}", t.message),
                    }
                })
                .collect::<Vec<_>>()
                .join("\n")
        };
        self.negotiate
            .replace("{categories}", &Self::categories_block())
            .replace("{human_label}", case.human_label.name())
            .replace("{llm_label}", case.llm_label.name())
            .replace("{transcript}", &transcript)
            .replace("{title}", title)
            .replace("{body}", body)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditEntry {
    pub post_id: String,
    pub prompt: String,
    pub raw_reply: String,
    pub parsed: Option<ChallengeCategory>,
    pub ts: DateTime<Utc>,
}

/// Append-only JSONL log of every exchange.
pub struct AuditLog {
    path: PathBuf,
    out: Mutex<BufWriter<File>>,
}

impl AuditLog {
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(AuditLog {
            path,
            out: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, entry: &AuditEntry) -> std::io::Result<()> {
        let mut out = self.out.lock().expect("audit log lock poisoned");
        serde_json::to_writer(&mut *out, entry)?;
        out.write_all(b"\n")?;
        out.flush()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

/// Counting semaphore bounding in-flight requests.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut free = self.free.lock().expect("limiter lock poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("limiter lock poisoned");
        }
        *free -= 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter lock poisoned") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct LlmConfig {
    pub model_id: String,
    pub temperature: f32,
    pub retry: RetryPolicy,
    pub max_concurrent: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            model_id: "unknown-model".into(),
            temperature: 0.0,
            retry: RetryPolicy::default(),
            max_concurrent: 4,
        }
    }
}

pub struct LlmClient {
    transport: Arc<dyn ChatTransport>,
    config: LlmConfig,
    templates: PromptTemplates,
    audit: Option<AuditLog>,
    limiter: Limiter,
}

impl LlmClient {
    pub fn new(transport: Arc<dyn ChatTransport>, config: LlmConfig) -> Self {
        LlmClient {
            transport,
            limiter: Limiter::new(config.max_concurrent),
            config,
            templates: PromptTemplates::default(),
            audit: None,
        }
    }

    /// HTTP client configured from `QSE_LLM_URL`, `QSE_LLM_MODEL` and `QSE_LLM_KEY`.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var("QSE_LLM_URL").ok()?;
        let model = std::env::var("QSE_LLM_MODEL").unwrap_or_else(|_| "unknown-model".into());
        let key = std::env::var("QSE_LLM_KEY").ok();
        let transport = HttpTransport::new(url, key, Duration::from_secs(60));
        Some(LlmClient::new(
            Arc::new(transport),
            LlmConfig {
                model_id: model,
                ..LlmConfig::default()
            },
        ))
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_audit(mut self, audit: AuditLog) -> Self {
        self.audit = Some(audit);
        self
    }

    pub fn model_id(&self) -> &str {
        &self.config.model_id
    }

    /// `llm:<model>` as used in annotation records.
    pub fn annotator_id(&self) -> String {
        format!("llm:{}", self.config.model_id)
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    pub fn request_for(&self, user: String) -> ChatRequest {
        ChatRequest {
            model: self.config.model_id.clone(),
            system: SYSTEM_PROMPT.to_string(),
            user,
            temperature: self.config.temperature,
        }
    }

    fn send(&self, post_id: &str, request: &ChatRequest) -> Result<String, LlmError> {
        let _slot = self.limiter.acquire();
        let policy = self.config.retry;
        let mut attempt = 0;
        let reply = loop {
            attempt += 1;
            match self.transport.complete(request) {
                Ok(reply) => break reply,
                Err(err) if err.is_transient() && attempt <= policy.max_retries => {
                    let delay = policy.base_delay * 2u32.saturating_pow(attempt - 1);
                    log::warn!("chat request for {post_id} failed ({err}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                }
                Err(err) if err.is_transient() => {
                    return Err(LlmError::ServiceUnavailable {
                        attempts: attempt,
                        last: err,
                    })
                }
                Err(err) => return Err(LlmError::Rejected(err)),
            }
        };
        if let Some(audit) = &self.audit {
            let entry = AuditEntry {
                post_id: post_id.to_string(),
                prompt: request.user.clone(),
                raw_reply: reply.clone(),
                parsed: parse_category(&reply).ok(),
                ts: Utc::now(),
            };
            audit
                .append(&entry)
                .map_err(|e| LlmError::Audit(e.to_string()))?;
        }
        Ok(reply)
    }

    pub fn categorize_request(&self, post: &Post) -> ChatRequest {
        self.request_for(self.templates.render_categorize(&post.title, &post.body_text))
    }

    pub fn annotate(&self, post: &Post) -> Result<LlmLabelResponse, LlmError> {
        if post.body_text.trim().is_empty() {
            return Err(LlmError::EmptyBody(post.key()));
        }
        let request = self.categorize_request(post);
        let started = Instant::now();
        let reply = self.send(&post.key(), &request)?;
        let latency_ms = started.elapsed().as_millis() as u64;
        let category = parse_category(&reply)?;
        Ok(LlmLabelResponse {
            category,
            rationale: parse_rationale(&reply),
            raw_reply: reply,
            model_id: self.config.model_id.clone(),
            latency_ms,
        })
    }

    pub fn negotiate_request(&self, case: &ConflictCase, title: &str, body: &str) -> ChatRequest {
        self.request_for(self.templates.render_negotiate(case, title, body))
    }

    /// Asks the model to elaborate on both candidate labels and restate its final one.
    pub fn elaborate(
        &self,
        case: &ConflictCase,
        title: &str,
        body: &str,
    ) -> Result<NegotiationTurn, LlmError> {
        if !case.is_open() {
            return Err(LlmError::CaseResolved(case.post_id.clone()));
        }
        let request = self.negotiate_request(case, title, body);
        let reply = self.send(&case.post_id, &request)?;
        let category = parse_category(&reply)?;
        Ok(NegotiationTurn::new(
            Speaker::Llm,
            parse_rationale(&reply),
            Some(category),
        ))
    }
}

impl Elaborator for LlmClient {
    fn elaborate(
        &self,
        case: &ConflictCase,
        title: &str,
        body: &str,
    ) -> Result<NegotiationTurn, LlmError> {
        LlmClient::elaborate(self, case, title, body)
    }
}
