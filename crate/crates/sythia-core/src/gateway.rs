//! Chat-completion backends, prompt templates, and the structured-output
//! retry loop.
//!
//! Two backends ship: a deterministic scripted backend (a queue of canned
//! replies, used by every offline test) and an OpenAI-compatible HTTP
//! backend. Templates live as plain-text data files with `{{placeholder}}`
//! markers and optional `<<system>>` / `<<user>>` role section headers.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sigparse::{self, Extracted, Shape};

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
    pub body: String,
}

impl ChatMessage {
    pub fn system(body: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, body: body.into() }
    }

    pub fn user(body: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, body: body.into() }
    }
}

/// Sampling parameters for one completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Sampling {
    /// Diverse generation stages.
    pub fn generation() -> Self {
        Sampling { temperature: 0.7, max_tokens: None, seed: None }
    }

    /// Judges must be stable gates.
    pub fn judge() -> Self {
        Sampling { temperature: 0.0, max_tokens: None, seed: None }
    }
}

/// Token usage as reported by the wire, when available.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("MISSING_BINDING: template '{template}' placeholder '{name}' has no binding")]
    MissingBinding { template: String, name: String },
    #[error("SCRIPT_EXHAUSTED: scripted backend queue is empty (call #{call})")]
    ScriptExhausted { call: usize },
    #[error("SCRIPT_MISMATCH: reply #{call} expects prompt containing {expected:?}")]
    ScriptMismatch { call: usize, expected: String },
    #[error("TRANSPORT: {message}{}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Transport { status: Option<u16>, message: String },
    #[error("TIMEOUT: no reply within the configured deadline")]
    Timeout,
    #[error("EXHAUSTED: {attempts} attempt(s) failed; last errors: {}", last_errors.join("; "))]
    Exhausted { attempts: usize, last_errors: Vec<String> },
    #[error("bad template '{template}': {message}")]
    BadTemplate { template: String, message: String },
    #[error("unknown template '{0}'")]
    UnknownTemplate(String),
}

/// Binding names supplied but never used by the template. A warning, not an
/// error: pipelines share binding maps across templates.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderWarning {
    pub unknown_placeholder: String,
}

/// A prompt template: ordered role-tagged bodies with `{{name}}` markers.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub id: String,
    pub messages: Vec<ChatMessage>,
}

fn placeholder_pattern() -> &'static regex::Regex {
    static PATTERN: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    PATTERN.get_or_init(|| regex::Regex::new(r"\{\{([A-Za-z_][A-Za-z0-9_]*)\}\}").unwrap())
}

impl PromptTemplate {
    /// Parse a template data file. Lines `<<system>>` / `<<user>>` open role
    /// sections; a file without section headers is a single user message.
    pub fn parse(id: &str, source: &str) -> Result<Self, GatewayError> {
        let mut messages: Vec<ChatMessage> = Vec::new();
        let mut current: Option<(Role, String)> = None;
        let mut preamble = String::new();
        for line in source.lines() {
            let role = match line.trim() {
                "<<system>>" => Some(Role::System),
                "<<user>>" => Some(Role::User),
                _ => None,
            };
            match role {
                Some(role) => {
                    if let Some((r, body)) = current.take() {
                        messages.push(ChatMessage { role: r, body: body.trim_end().to_string() });
                    }
                    current = Some((role, String::new()));
                }
                None => match &mut current {
                    Some((_, body)) => {
                        body.push_str(line);
                        body.push('\n');
                    }
                    None => {
                        preamble.push_str(line);
                        preamble.push('\n');
                    }
                },
            }
        }
        if let Some((r, body)) = current.take() {
            messages.push(ChatMessage { role: r, body: body.trim_end().to_string() });
        }
        if messages.is_empty() {
            let body = preamble.trim();
            if body.is_empty() {
                return Err(GatewayError::BadTemplate {
                    template: id.to_string(),
                    message: "empty template".to_string(),
                });
            }
            messages.push(ChatMessage::user(body));
        } else if !preamble.trim().is_empty() {
            return Err(GatewayError::BadTemplate {
                template: id.to_string(),
                message: "text before the first role section".to_string(),
            });
        }
        Ok(PromptTemplate { id: id.to_string(), messages })
    }

    /// Set of `{{name}}` markers appearing in any body.
    pub fn required_placeholders(&self) -> BTreeSet<String> {
        let mut names = BTreeSet::new();
        for message in &self.messages {
            for capture in placeholder_pattern().captures_iter(&message.body) {
                names.insert(capture[1].to_string());
            }
        }
        names
    }

    /// Substitute every placeholder. Bindings must cover all markers; extra
    /// bindings produce warnings.
    pub fn render(
        &self,
        bindings: &BTreeMap<String, String>,
    ) -> Result<(Vec<ChatMessage>, Vec<RenderWarning>), GatewayError> {
        let required = self.required_placeholders();
        for name in &required {
            if !bindings.contains_key(name) {
                return Err(GatewayError::MissingBinding {
                    template: self.id.clone(),
                    name: name.clone(),
                });
            }
        }
        let warnings = bindings
            .keys()
            .filter(|k| !required.contains(*k))
            .map(|k| RenderWarning { unknown_placeholder: k.clone() })
            .collect();
        let messages = self
            .messages
            .iter()
            .map(|m| ChatMessage {
                role: m.role,
                body: placeholder_pattern()
                    .replace_all(&m.body, |caps: &regex::Captures<'_>| {
                        bindings[&caps[1]].clone()
                    })
                    .into_owned(),
            })
            .collect();
        Ok((messages, warnings))
    }
}

macro_rules! embedded_templates {
    ($($id:literal),+ $(,)?) => {
        &[$(($id, include_str!(concat!("../templates/", $id, ".txt")))),+]
    };
}

const TEMPLATE_SOURCES: &[(&str, &str)] = embedded_templates![
    "create_scenario",
    "create_agentic_scenario",
    "create_functions_list",
    "create_pseudo_code",
    "create_possible_scenarios",
    "create_user_scenario",
    "create_function_descriptions",
    "create_agentic_execution",
    "dag_from_template",
    "dag_utterance",
    "dag_judge",
    "dag_utterance_repair",
    "utterance_judge",
    "think_trace",
    "dialogue_user_proxy",
    "dialogue_agent",
    "dialogue_mock_response",
    "dialogue_turn_judge",
    "dialogue_final_verdict",
];

/// All built-in templates, parsed once.
pub fn registry() -> &'static BTreeMap<String, PromptTemplate> {
    static REGISTRY: std::sync::OnceLock<BTreeMap<String, PromptTemplate>> =
        std::sync::OnceLock::new();
    REGISTRY.get_or_init(|| {
        TEMPLATE_SOURCES
            .iter()
            .map(|(id, source)| {
                let template = PromptTemplate::parse(id, source)
                    .unwrap_or_else(|e| panic!("embedded template {id}: {e}"));
                (id.to_string(), template)
            })
            .collect()
    })
}

pub fn template(id: &str) -> Result<&'static PromptTemplate, GatewayError> {
    registry().get(id).ok_or_else(|| GatewayError::UnknownTemplate(id.to_string()))
}

/// Render a registry template with string bindings.
pub fn render_template(
    id: &str,
    bindings: &BTreeMap<String, String>,
) -> Result<Vec<ChatMessage>, GatewayError> {
    let (messages, _warnings) = template(id)?.render(bindings)?;
    Ok(messages)
}

/// A chat-completion backend. Implementations must be shareable across
/// worker threads.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, messages: &[ChatMessage], sampling: &Sampling) -> Result<String, GatewayError>;

    /// Upper bound on concurrent requests this backend tolerates.
    fn max_in_flight(&self) -> usize {
        8
    }

    /// Usage from the most recent reply, when the wire reports it.
    fn last_usage(&self) -> Option<Usage> {
        None
    }
}

/// One canned reply; `expect` is an optional substring the rendered prompt
/// must contain, catching scripts that drift out of sync with the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub reply: String,
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub expect: Option<String>,
}

/// Deterministic backend: replies come from a fixed queue, consumed in
/// order. Consuming past the end is an error, and consumption is serialized
/// (`max_in_flight` = 1) so runs are bit-reproducible.
pub struct ScriptedBackend {
    queue: Mutex<(usize, VecDeque<ScriptEntry>)>,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        ScriptedBackend { queue: Mutex::new((0, entries.into())) }
    }

    pub fn from_replies<S: Into<String>>(replies: Vec<S>) -> Self {
        Self::new(
            replies
                .into_iter()
                .map(|r| ScriptEntry { reply: r.into(), expect: None })
                .collect(),
        )
    }

    /// Load a JSONL script: one `{"reply": ..., "match": ...?}` per line.
    pub fn from_jsonl(source: &str) -> Result<Self, serde_json::Error> {
        let mut entries = Vec::new();
        for line in source.lines() {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(line)?);
        }
        Ok(Self::new(entries))
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().unwrap().1.len()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, messages: &[ChatMessage], _sampling: &Sampling) -> Result<String, GatewayError> {
        let mut guard = self.queue.lock().unwrap();
        guard.0 += 1;
        let call = guard.0;
        let entry = guard
            .1
            .pop_front()
            .ok_or(GatewayError::ScriptExhausted { call })?;
        if let Some(expected) = &entry.expect {
            let prompt: String = messages.iter().map(|m| m.body.as_str()).collect::<Vec<_>>().join("\n");
            if !prompt.contains(expected.as_str()) {
                return Err(GatewayError::ScriptMismatch { call, expected: expected.clone() });
            }
        }
        Ok(entry.reply)
    }

    fn max_in_flight(&self) -> usize {
        1
    }
}

/// OpenAI-compatible chat-completions backend. Endpoint and API key default
/// to the SYTHIA_ENDPOINT / SYTHIA_API_KEY environment variables.
pub struct HttpBackend {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    max_retries: usize,
    in_flight: usize,
    last_usage: Mutex<Option<Usage>>,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        HttpBackend {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: std::env::var("SYTHIA_API_KEY").ok(),
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("http client"),
            max_retries: 3,
            in_flight: 8,
            last_usage: Mutex::new(None),
        }
    }

    pub fn from_env(model: impl Into<String>) -> Option<Self> {
        std::env::var("SYTHIA_ENDPOINT").ok().map(|e| Self::new(e, model))
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn with_max_retries(mut self, retries: usize) -> Self {
        self.max_retries = retries;
        self
    }

    pub fn with_in_flight(mut self, limit: usize) -> Self {
        self.in_flight = limit.max(1);
        self
    }

    fn url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, (GatewayError, Option<Duration>)> {
        let mut request = self.client.post(self.url()).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| {
            let err = if e.is_timeout() {
                GatewayError::Timeout
            } else {
                GatewayError::Transport { status: None, message: e.to_string() }
            };
            (err, None)
        })?;
        let status = response.status();
        if !status.is_success() {
            let retry_after = response
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.parse::<u64>().ok())
                .map(Duration::from_secs);
            let text = response.text().unwrap_or_default();
            let excerpt: String = text.chars().take(200).collect();
            return Err((
                GatewayError::Transport { status: Some(status.as_u16()), message: excerpt },
                retry_after,
            ));
        }
        let payload: serde_json::Value = response.json().map_err(|e| {
            (GatewayError::Transport { status: None, message: e.to_string() }, None)
        })?;
        if let Some(usage) = payload.get("usage") {
            let parsed = Usage {
                prompt_tokens: usage.get("prompt_tokens").and_then(|v| v.as_u64()).unwrap_or(0),
                completion_tokens: usage
                    .get("completion_tokens")
                    .and_then(|v| v.as_u64())
                    .unwrap_or(0),
            };
            *self.last_usage.lock().unwrap() = Some(parsed);
        }
        payload["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| {
                (
                    GatewayError::Transport {
                        status: None,
                        message: "reply missing choices[0].message.content".to_string(),
                    },
                    None,
                )
            })
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, messages: &[ChatMessage], sampling: &Sampling) -> Result<String, GatewayError> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": messages.iter().map(|m| serde_json::json!({
                "role": match m.role { Role::System => "system", Role::User => "user", Role::Assistant => "assistant" },
                "content": m.body,
            })).collect::<Vec<_>>(),
            "temperature": sampling.temperature,
        });
        let mut last_error = GatewayError::Timeout;
        for attempt in 0..=self.max_retries {
            match self.attempt(&body) {
                Ok(reply) => return Ok(reply),
                Err((error, retry_after)) => {
                    let retryable = matches!(
                        &error,
                        GatewayError::Timeout
                            | GatewayError::Transport { status: None, .. }
                            | GatewayError::Transport { status: Some(429), .. }
                            | GatewayError::Transport { status: Some(500..=599), .. }
                    );
                    last_error = error;
                    if !retryable || attempt == self.max_retries {
                        return Err(last_error);
                    }
                    let backoff = retry_after
                        .unwrap_or_else(|| Duration::from_millis(250 * (1 << attempt)));
                    std::thread::sleep(backoff);
                }
            }
        }
        Err(last_error)
    }

    fn max_in_flight(&self) -> usize {
        self.in_flight
    }

    fn last_usage(&self) -> Option<Usage> {
        *self.last_usage.lock().unwrap()
    }
}

/// Outcome of a structured completion: extracted payload plus how many
/// backend calls it took.
#[derive(Debug, Clone)]
pub struct Structured {
    pub extracted: Extracted,
    pub attempts: usize,
}

/// Complete-and-extract with a retry loop. Extraction failures and validator
/// rejections re-prompt immediately (no backoff: transport retries live in
/// the backend); at most `max_attempts` backend calls are made.
pub fn complete_structured(
    backend: &dyn ChatBackend,
    messages: &[ChatMessage],
    sampling: &Sampling,
    shape: Shape,
    max_attempts: usize,
    validator: Option<&dyn Fn(&serde_json::Value) -> Vec<String>>,
) -> Result<Structured, GatewayError> {
    assert!(max_attempts >= 1, "max_attempts must be at least 1");
    let mut last_errors = Vec::new();
    for attempt in 1..=max_attempts {
        let reply = backend.complete(messages, sampling)?;
        match sigparse::extract_structured(&reply, shape) {
            Ok(extracted) => {
                let problems = validator.map(|v| v(&extracted.value)).unwrap_or_default();
                if problems.is_empty() {
                    return Ok(Structured { extracted, attempts: attempt });
                }
                last_errors = problems;
            }
            Err(e) => last_errors = vec![e.to_string()],
        }
    }
    Err(GatewayError::Exhausted { attempts: max_attempts, last_errors })
}

/// Default attempt budget for every structured stage.
pub const DEFAULT_MAX_ATTEMPTS: usize = 3;

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn bindings(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn registry_templates_parse_and_declare_placeholders() {
        let registry = registry();
        assert_eq!(registry.len(), TEMPLATE_SOURCES.len());
        let scenario = &registry["create_scenario"];
        assert_eq!(
            scenario.required_placeholders(),
            ["num", "domain"].iter().map(|s| s.to_string()).collect()
        );
    }

    #[test]
    fn render_substitutes_every_occurrence() {
        let rendered = render_template(
            "create_scenario",
            &bindings(&[("num", "5"), ("domain", "IT Service Management (ITSM)")]),
        )
        .unwrap();
        let body = &rendered.last().unwrap().body;
        assert!(body.contains("5 unique and practical"));
        assert!(body.contains("IT Service Management (ITSM)"));
        assert!(!placeholder_pattern().is_match(body));
    }

    #[test]
    fn missing_binding_is_an_error() {
        let err = render_template("create_scenario", &bindings(&[("num", "5")])).unwrap_err();
        assert!(matches!(err, GatewayError::MissingBinding { name, .. } if name == "domain"));
    }

    #[test]
    fn unknown_binding_is_a_warning() {
        let template = template("create_scenario").unwrap();
        let (_messages, warnings) = template
            .render(&bindings(&[("num", "5"), ("domain", "x"), ("ghost", "y")]))
            .unwrap();
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].unknown_placeholder, "ghost");
    }

    #[test]
    fn repeated_placeholder_substituted_everywhere() {
        let template = PromptTemplate::parse("t", "make {{num}} items, exactly {{num}}").unwrap();
        let (messages, _) = template.render(&bindings(&[("num", "7")])).unwrap();
        assert_eq!(messages[0].body.matches('7').count(), 2);
    }

    #[test]
    fn render_is_injective_in_used_bindings() {
        let template = template("create_scenario").unwrap();
        let a = template.render(&bindings(&[("num", "3"), ("domain", "x")])).unwrap().0;
        let b = template.render(&bindings(&[("num", "4"), ("domain", "x")])).unwrap().0;
        assert_ne!(a, b);
    }

    #[test]
    fn role_sections_parsed() {
        let template = template("dialogue_user_proxy").unwrap();
        assert_eq!(template.messages.len(), 2);
        assert_eq!(template.messages[0].role, Role::System);
        assert_eq!(template.messages[1].role, Role::User);
    }

    #[test]
    fn scripted_backend_replays_in_order() {
        let backend = ScriptedBackend::from_replies(vec!["hello", "world"]);
        let messages = [ChatMessage::user("hi")];
        assert_eq!(backend.complete(&messages, &Sampling::generation()).unwrap(), "hello");
        assert_eq!(backend.complete(&messages, &Sampling::generation()).unwrap(), "world");
        let err = backend.complete(&messages, &Sampling::generation()).unwrap_err();
        assert!(matches!(err, GatewayError::ScriptExhausted { call: 3 }));
    }

    #[test]
    fn scripted_matcher_catches_drift() {
        let backend = ScriptedBackend::new(vec![ScriptEntry {
            reply: "ok".to_string(),
            expect: Some("expected marker".to_string()),
        }]);
        let err = backend
            .complete(&[ChatMessage::user("something else")], &Sampling::judge())
            .unwrap_err();
        assert!(matches!(err, GatewayError::ScriptMismatch { .. }));
    }

    #[test]
    fn structured_retries_until_extraction_succeeds() {
        let backend = ScriptedBackend::from_replies(vec!["not json at all", "{\"ok\": true}"]);
        let result = complete_structured(
            &backend,
            &[ChatMessage::user("go")],
            &Sampling::judge(),
            Shape::Object,
            3,
            None,
        )
        .unwrap();
        assert_eq!(result.attempts, 2);
        assert_eq!(result.extracted.value, json!({"ok": true}));
    }

    #[test]
    fn structured_exhausts_after_budget() {
        let backend = ScriptedBackend::from_replies(vec!["garbage", "more garbage"]);
        let err = complete_structured(
            &backend,
            &[ChatMessage::user("go")],
            &Sampling::judge(),
            Shape::Object,
            2,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, GatewayError::Exhausted { attempts: 2, .. }));
    }

    #[test]
    fn validator_rejection_consumes_an_attempt() {
        let backend =
            ScriptedBackend::from_replies(vec!["{\"n\": 1}", "{\"n\": 2}", "{\"n\": 3}"]);
        let validator = |v: &serde_json::Value| {
            if v["n"].as_i64() == Some(2) {
                vec![]
            } else {
                vec!["n must be 2".to_string()]
            }
        };
        let result = complete_structured(
            &backend,
            &[ChatMessage::user("go")],
            &Sampling::judge(),
            Shape::Object,
            3,
            Some(&validator),
        )
        .unwrap();
        assert_eq!(result.attempts, 2);
        assert_eq!(result.extracted.value["n"], json!(2));
    }

    #[test]
    fn http_backend_honors_retry_after_on_429() {
        use std::io::{Read, Write};
        use std::net::TcpListener;

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let respond = |stream: &mut std::net::TcpStream, head: &str, body: &str| {
                let mut buffer = [0u8; 65536];
                let mut read = 0;
                // read until end of headers plus declared body length
                loop {
                    let n = stream.read(&mut buffer[read..]).unwrap();
                    read += n;
                    let text = String::from_utf8_lossy(&buffer[..read]);
                    if let Some(split) = text.find("\r\n\r\n") {
                        let length = text
                            .lines()
                            .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                            .unwrap_or(0);
                        if read >= split + 4 + length {
                            break;
                        }
                    }
                    if n == 0 {
                        break;
                    }
                }
                write!(
                    stream,
                    "{head}Connection: close\r\nContent-Length: {}\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            };
            let (mut first, _) = listener.accept().unwrap();
            respond(
                &mut first,
                "HTTP/1.1 429 Too Many Requests\r\nRetry-After: 0\r\n",
                "slow down",
            );
            let (mut second, _) = listener.accept().unwrap();
            respond(
                &mut second,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\n",
                "{\"choices\":[{\"message\":{\"content\":\"pong\"}}],\"usage\":{\"prompt_tokens\":3,\"completion_tokens\":1}}",
            );
        });

        let backend = HttpBackend::new(format!("http://{addr}/v1"), "test-model")
            .with_api_key("k")
            .with_max_retries(2);
        let reply = backend
            .complete(&[ChatMessage::user("ping")], &Sampling::generation())
            .unwrap();
        assert_eq!(reply, "pong");
        assert_eq!(backend.last_usage().unwrap().prompt_tokens, 3);
        server.join().unwrap();
    }

    #[test]
    fn http_backend_does_not_retry_client_errors() {
        use std::io::{Read, Write};
        use std::net::TcpListener;

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buffer = [0u8; 65536];
            let _ = stream.read(&mut buffer).unwrap();
            write!(stream, "HTTP/1.1 400 Bad Request\r\nContent-Length: 3\r\n\r\nbad").unwrap();
        });
        let backend = HttpBackend::new(format!("http://{addr}"), "test-model").with_max_retries(3);
        let err = backend
            .complete(&[ChatMessage::user("ping")], &Sampling::generation())
            .unwrap_err();
        assert!(matches!(err, GatewayError::Transport { status: Some(400), .. }));
        server.join().unwrap();
    }
}
