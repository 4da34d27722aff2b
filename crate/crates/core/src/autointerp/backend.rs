use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{ensure, Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Explanation,
    Fuzzing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub id: String,
    pub kind: RequestKind,
    pub messages: Vec<ChatMessage>,
    /// Known label of a fuzzing item. Only offline mocks read it; it is
    /// never sent to an endpoint.
    #[serde(skip)]
    pub ground_truth: Option<bool>,
}

pub trait ChatBackend: Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String>;
    /// Model or mock name recorded in reports.
    fn model(&self) -> String;
    fn temperature(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmEndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub timeout_secs: f64,
    pub max_concurrent: usize,
    pub temperature: f64,
    pub max_attempts: u32,
    pub backoff_secs: f64,
}

impl Default for LlmEndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model: "meta-llama/Meta-Llama-3.1-70B-Instruct".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            timeout_secs: 60.0,
            max_concurrent: 8,
            temperature: 0.0,
            max_attempts: 3,
            backoff_secs: 1.0,
        }
    }
}

impl LlmEndpointConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.timeout_secs > 0.0, "timeout must be positive");
        ensure!(self.max_concurrent >= 1, "max_concurrent must be at least 1");
        ensure!(self.max_attempts >= 1, "max_attempts must be at least 1");
        Ok(())
    }
}

/// Audit log of every request and its outcome, written as JSON lines.
#[derive(Debug, Default)]
pub struct Transcript {
    entries: Mutex<Vec<Value>>,
}

impl Transcript {
    pub fn record(&self, entry: Value) {
        self.entries.lock().expect("transcript lock").push(entry);
    }

    /// Entries sorted by request id, so the file does not depend on timing.
    pub fn entries(&self) -> Vec<Value> {
        let mut v = self.entries.lock().expect("transcript lock").clone();
        v.sort_by(|a, b| {
            let key = |e: &Value| (e["id"].as_str().unwrap_or("").to_string(), e["attempt"].as_u64());
            key(a).cmp(&key(b))
        });
        v
    }

    pub fn write_jsonl(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::new();
        for e in self.entries() {
            out.push_str(&serde_json::to_string(&e)?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// OpenAI-compatible chat-completions client.
pub struct HttpBackend<'t> {
    config: LlmEndpointConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    transcript: &'t Transcript,
}

impl<'t> HttpBackend<'t> {
    pub fn new(config: LlmEndpointConfig, transcript: &'t Transcript) -> Result<Self> {
        config.validate()?;
        let api_key = config.api_key_env.as_deref().and_then(|v| std::env::var(v).ok());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| Error::Endpoint(e.to_string()))?;
        Ok(Self {
            config,
            client,
            api_key,
            transcript,
        })
    }

    fn attempt(&self, body: &Value) -> std::result::Result<Value, (String, bool)> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| (e.to_string(), true))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| (e.to_string(), true))?;
        if !status.is_success() {
            let retry = status.is_server_error() || status.as_u16() == 429;
            return Err((format!("HTTP {status}: {text}"), retry));
        }
        serde_json::from_str(&text).map_err(|e| (format!("invalid JSON reply: {e}"), false))
    }
}

impl ChatBackend for HttpBackend<'_> {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let body = json!({
            "model": self.config.model,
            "messages": request.messages,
            "temperature": self.config.temperature,
        });
        let mut last = String::new();
        for attempt in 0..self.config.max_attempts {
            if attempt > 0 {
                let wait = self.config.backoff_secs * 2f64.powi(attempt as i32 - 1);
                std::thread::sleep(Duration::from_secs_f64(wait));
            }
            match self.attempt(&body) {
                Ok(reply) => {
                    self.transcript.record(json!({
                        "id": request.id, "attempt": attempt, "request": body, "response": reply,
                    }));
                    return reply["choices"][0]["message"]["content"]
                        .as_str()
                        .map(str::to_string)
                        .ok_or_else(|| Error::Endpoint("reply has no message content".into()));
                }
                Err((msg, retry)) => {
                    self.transcript.record(json!({
                        "id": request.id, "attempt": attempt, "request": body, "error": msg,
                    }));
                    log::warn!("request {} attempt {} failed: {msg}", request.id, attempt + 1);
                    last = msg;
                    if !retry {
                        break;
                    }
                }
            }
        }
        Err(Error::Endpoint(last))
    }

    fn model(&self) -> String {
        self.config.model.clone()
    }

    fn temperature(&self) -> f64 {
        self.config.temperature
    }
}

/// Offline stand-ins for an endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockKind {
    /// Answers fuzzing items with their known label.
    Oracle,
    /// Answers fuzzing items with a seeded coin flip per prompt.
    CoinFlip { seed: u64 },
    /// Answers by lexical overlap between the explanation and marked spans.
    Lexical,
    /// Returns a fixed string for every request.
    Echo { reply: String },
}

pub struct MockBackend<'t> {
    kind: MockKind,
    transcript: &'t Transcript,
}

impl<'t> MockBackend<'t> {
    pub fn new(kind: MockKind, transcript: &'t Transcript) -> Self {
        Self { kind, transcript }
    }

    fn reply(&self, request: &ChatRequest) -> Result<String> {
        let prompt = request.messages.last().map_or("", |m| m.content.as_str());
        let yes_no = |b: bool| if b { "Yes" } else { "No" }.to_string();
        Ok(match (&self.kind, request.kind) {
            (MockKind::Echo { reply }, _) => reply.clone(),
            (_, RequestKind::Explanation) => lexical_explanation(prompt),
            (MockKind::Oracle, RequestKind::Fuzzing) => yes_no(
                request
                    .ground_truth
                    .ok_or_else(|| Error::Endpoint("oracle mock needs the item's label".into()))?,
            ),
            (MockKind::CoinFlip { seed }, RequestKind::Fuzzing) => {
                yes_no(rng::derive(*seed, rng::label_id(prompt)) & 1 == 1)
            }
            (MockKind::Lexical, RequestKind::Fuzzing) => yes_no(lexical_verdict(prompt)),
        })
    }
}

impl ChatBackend for MockBackend<'_> {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let reply = self.reply(request);
        self.transcript.record(json!({
            "id": request.id,
            "attempt": 0,
            "request": { "model": self.model(), "messages": request.messages, "temperature": 0.0 },
            "response": reply.as_ref().map_err(|e| e.to_string()).map(|s| json!({
                "choices": [{ "message": { "role": "assistant", "content": s } }]
            })).unwrap_or_else(|e| json!({ "error": e })),
        }));
        reply
    }

    fn model(&self) -> String {
        match &self.kind {
            MockKind::Oracle => "mock-oracle".into(),
            MockKind::CoinFlip { seed } => format!("mock-coin-flip-{seed}"),
            MockKind::Lexical => "mock-lexical".into(),
            MockKind::Echo { .. } => "mock-echo".into(),
        }
    }
}

/// Text between every `<<` and the following `>>`.
pub fn marked_spans(text: &str) -> Vec<&str> {
    let mut spans = Vec::new();
    let mut rest = text;
    while let Some(i) = rest.find("<<") {
        let after = &rest[i + 2..];
        let Some(j) = after.find(">>") else { break };
        spans.push(&after[..j]);
        rest = &after[j + 2..];
    }
    spans
}

/// Names the most frequently marked span, quoted.
fn lexical_explanation(prompt: &str) -> String {
    let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
    for s in marked_spans(prompt) {
        *counts.entry(s).or_default() += 1;
    }
    match counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) {
        Some((span, _)) => format!("Fires on the text '{span}'."),
        None => "Fires on nothing recognizable.".into(),
    }
}

/// Yes iff every marked span of the excerpt appears quoted in the explanation.
fn lexical_verdict(prompt: &str) -> bool {
    let Some(expl_start) = prompt.find("Explanation: ") else {
        return false;
    };
    let rest = &prompt[expl_start + "Explanation: ".len()..];
    let Some(expl_end) = rest.find("\n\nExcerpt: ") else {
        return false;
    };
    let explanation = &rest[..expl_end];
    let excerpt = &rest[expl_end..];
    let quoted: Vec<&str> = explanation.split('\'').skip(1).step_by(2).collect();
    let spans = marked_spans(excerpt);
    !spans.is_empty() && spans.iter().all(|s| quoted.iter().any(|q| q.eq_ignore_ascii_case(s)))
}
