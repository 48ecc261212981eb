//! Chat-completion backends with tool calling.

use std::ops::{Add, AddAssign};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tracing::{debug, warn};

pub const ENV_BASE_URL: &str = "D2F_LLM_BASE_URL";
pub const ENV_API_KEY: &str = "D2F_LLM_API_KEY";
pub const ENV_MODEL: &str = "D2F_MODEL";
/// Substituted in scripted turns with the text of the most recent tool result.
pub const LAST_TOOL_RESULT: &str = "{{last_tool_result}}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub id: String,
    pub name: String,
    /// JSON object text.
    pub arguments: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl ChatMessage {
    fn plain(role: Role, content: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: None,
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::plain(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::plain(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::plain(Role::Assistant, content)
    }

    pub fn tool(call_id: impl Into<String>, content: impl Into<String>) -> Self {
        ChatMessage {
            tool_call_id: Some(call_id.into()),
            ..Self::plain(Role::Tool, content)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl TokenUsage {
    pub fn total(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

impl Add for TokenUsage {
    type Output = TokenUsage;
    fn add(self, o: TokenUsage) -> TokenUsage {
        TokenUsage {
            input_tokens: self.input_tokens + o.input_tokens,
            output_tokens: self.output_tokens + o.output_tokens,
        }
    }
}

impl AddAssign for TokenUsage {
    fn add_assign(&mut self, o: TokenUsage) {
        *self = *self + o;
    }
}

/// A function tool offered to the model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: Value,
}

impl ToolSchema {
    pub fn new(name: &str, description: &str, parameters: Value) -> Self {
        ToolSchema {
            name: name.to_string(),
            description: description.to_string(),
            parameters,
        }
    }

    fn wire(&self) -> Value {
        json!({
            "type": "function",
            "function": {"name": self.name, "description": self.description, "parameters": self.parameters}
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub message: ChatMessage,
    pub usage: TokenUsage,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("LLM API error (status {status:?}): {body_digest}")]
    ApiError { status: Option<u16>, body_digest: String },
    #[error("scripted LLM ran out of turns after {0}")]
    ScriptExhausted(usize),
    #[error("invalid LLM script: {0}")]
    InvalidScript(String),
    #[error("LLM not configured: {0}")]
    Config(String),
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, messages: &[ChatMessage], tools: &[ToolSchema]) -> Result<Completion, LlmError>;
}

/// Fallback token count: one token per four bytes, rounded up.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

fn estimate_message(m: &ChatMessage) -> u64 {
    estimate_tokens(&m.content) + m.tool_calls.iter().map(|c| estimate_tokens(&c.name) + estimate_tokens(&c.arguments)).sum::<u64>()
}

fn estimate_usage(messages: &[ChatMessage], reply: &ChatMessage) -> TokenUsage {
    TokenUsage {
        input_tokens: messages.iter().map(estimate_message).sum(),
        output_tokens: estimate_message(reply),
    }
}

fn digest(text: &str) -> String {
    let t = text.trim();
    match t.char_indices().nth(200) {
        Some((i, _)) => format!("{}... ({} bytes)", &t[..i], t.len()),
        None => t.to_string(),
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub api_key: String,
    pub model: String,
    pub request_timeout: Duration,
    pub attempts: u32,
    /// First backoff; doubles after each failed attempt.
    pub backoff_base: Duration,
}

impl HttpConfig {
    pub fn from_env() -> Result<Self, LlmError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.trim().is_empty());
        let api_key = var(ENV_API_KEY).ok_or_else(|| LlmError::Config(format!("{ENV_API_KEY} is not set")))?;
        let base_url = var(ENV_BASE_URL).ok_or_else(|| LlmError::Config(format!("{ENV_BASE_URL} is not set")))?;
        let model = var(ENV_MODEL).ok_or_else(|| LlmError::Config(format!("{ENV_MODEL} is not set")))?;
        Ok(HttpConfig {
            base_url,
            api_key,
            model,
            request_timeout: Duration::from_secs(300),
            attempts: 3,
            backoff_base: Duration::from_secs(1),
        })
    }
}

/// OpenAI-compatible `/chat/completions` over HTTP.
pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.request_timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend { config, agent }
    }

    fn request_body(&self, messages: &[ChatMessage], tools: &[ToolSchema]) -> Value {
        let wire_messages: Vec<Value> = messages
            .iter()
            .map(|m| {
                let mut v = json!({"role": m.role, "content": m.content});
                if !m.tool_calls.is_empty() {
                    v["tool_calls"] = m
                        .tool_calls
                        .iter()
                        .map(|c| json!({"id": c.id, "type": "function", "function": {"name": c.name, "arguments": c.arguments}}))
                        .collect();
                }
                if let Some(id) = &m.tool_call_id {
                    v["tool_call_id"] = json!(id);
                }
                v
            })
            .collect();
        let mut body = json!({"model": self.config.model, "messages": wire_messages});
        if !tools.is_empty() {
            body["tools"] = tools.iter().map(ToolSchema::wire).collect();
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<Value, (bool, LlmError)> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let result = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.config.api_key))
            .send_json(body);
        let mut resp = match result {
            Ok(r) => r,
            Err(e) => {
                return Err((
                    true,
                    LlmError::ApiError {
                        status: None,
                        body_digest: e.to_string(),
                    },
                ))
            }
        };
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        if !(200..300).contains(&status) {
            let retryable = status >= 500 || status == 429 || status == 408;
            return Err((
                retryable,
                LlmError::ApiError {
                    status: Some(status),
                    body_digest: digest(&text),
                },
            ));
        }
        serde_json::from_str(&text).map_err(|e| {
            (
                true,
                LlmError::ApiError {
                    status: Some(status),
                    body_digest: format!("unparseable response ({e}): {}", digest(&text)),
                },
            )
        })
    }
}

fn parse_reply(v: &Value) -> Result<(ChatMessage, Option<TokenUsage>), LlmError> {
    let bad = |what: &str| LlmError::ApiError {
        status: Some(200),
        body_digest: format!("{what}: {}", digest(&v.to_string())),
    };
    let msg = v.pointer("/choices/0/message").ok_or_else(|| bad("response has no message"))?;
    let content = msg.get("content").and_then(Value::as_str).unwrap_or_default().to_string();
    let tool_calls = msg
        .get("tool_calls")
        .and_then(Value::as_array)
        .map(|calls| {
            calls
                .iter()
                .enumerate()
                .map(|(i, c)| ToolCall {
                    id: c.get("id").and_then(Value::as_str).map(str::to_string).unwrap_or_else(|| format!("call_{i}")),
                    name: c.pointer("/function/name").and_then(Value::as_str).unwrap_or_default().to_string(),
                    arguments: match c.pointer("/function/arguments") {
                        Some(Value::String(s)) => s.clone(),
                        Some(other) => other.to_string(),
                        None => "{}".into(),
                    },
                })
                .collect()
        })
        .unwrap_or_default();
    let usage = v.get("usage").and_then(|u| {
        Some(TokenUsage {
            input_tokens: u.get("prompt_tokens")?.as_u64()?,
            output_tokens: u.get("completion_tokens")?.as_u64()?,
        })
    });
    Ok((
        ChatMessage {
            role: Role::Assistant,
            content,
            tool_calls,
            tool_call_id: None,
        },
        usage,
    ))
}

impl ChatBackend for HttpBackend {
    fn complete(&self, messages: &[ChatMessage], tools: &[ToolSchema]) -> Result<Completion, LlmError> {
        let body = self.request_body(messages, tools);
        let mut backoff = self.config.backoff_base;
        let mut last = None;
        for attempt in 1..=self.config.attempts.max(1) {
            match self.attempt(&body) {
                Ok(v) => {
                    let (message, usage) = parse_reply(&v)?;
                    let usage = usage.unwrap_or_else(|| estimate_usage(messages, &message));
                    debug!(attempt, ?usage, "completion");
                    return Ok(Completion { message, usage });
                }
                Err((retryable, e)) => {
                    warn!(attempt, error = %e, "completion attempt failed");
                    last = Some(e);
                    if !retryable || attempt == self.config.attempts {
                        break;
                    }
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
            }
        }
        Err(last.unwrap_or(LlmError::ApiError {
            status: None,
            body_digest: "no attempt made".into(),
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptToolCall {
    pub name: String,
    #[serde(default = "empty_object")]
    pub arguments: Value,
}

fn empty_object() -> Value {
    json!({})
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptTurn {
    #[serde(default)]
    pub content: String,
    #[serde(default)]
    pub tool_calls: Vec<ScriptToolCall>,
}

/// Replays a fixed list of assistant turns in order.
pub struct ScriptedBackend {
    turns: Vec<ScriptTurn>,
    cursor: Mutex<usize>,
}

impl ScriptedBackend {
    pub fn new(turns: Vec<ScriptTurn>) -> Self {
        ScriptedBackend {
            turns,
            cursor: Mutex::new(0),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, LlmError> {
        let turns: Vec<ScriptTurn> = serde_json::from_str(text).map_err(|e| LlmError::InvalidScript(e.to_string()))?;
        Ok(Self::new(turns))
    }

    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::InvalidScript(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Turns consumed so far.
    pub fn consumed(&self) -> usize {
        *self.cursor.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, messages: &[ChatMessage], _tools: &[ToolSchema]) -> Result<Completion, LlmError> {
        let index = {
            let mut cursor = self.cursor.lock().unwrap_or_else(|e| e.into_inner());
            let i = *cursor;
            if i >= self.turns.len() {
                return Err(LlmError::ScriptExhausted(self.turns.len()));
            }
            *cursor += 1;
            i
        };
        let turn = &self.turns[index];
        let last_tool = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::Tool)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let tool_calls = turn
            .tool_calls
            .iter()
            .enumerate()
            .map(|(i, c)| ToolCall {
                id: format!("call_{index}_{i}"),
                name: c.name.clone(),
                arguments: match &c.arguments {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                },
            })
            .collect();
        let message = ChatMessage {
            role: Role::Assistant,
            content: turn.content.replace(LAST_TOOL_RESULT, last_tool),
            tool_calls,
            tool_call_id: None,
        };
        let usage = estimate_usage(messages, &message);
        Ok(Completion { message, usage })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read as _, Write as _};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn estimator() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("12345678"), 2);
        assert_eq!(estimate_tokens("123456789"), 3);
        let mut prev = 0;
        for n in 0..64 {
            let e = estimate_tokens(&"x".repeat(n));
            assert!(e >= prev);
            prev = e;
        }
    }

    #[test]
    fn usage_is_additive() {
        let a = TokenUsage { input_tokens: 3, output_tokens: 1 };
        let b = TokenUsage { input_tokens: 10, output_tokens: 7 };
        let mut sum = TokenUsage::default();
        for u in [a, b, a] {
            sum += u;
        }
        assert_eq!(sum, TokenUsage { input_tokens: 16, output_tokens: 9 });
    }

    #[test]
    fn script_runs_out() {
        let s = ScriptedBackend::from_json(r#"[{"content": "a"}, {"tool_calls": [{"name": "grep", "arguments": {"pattern": "x"}}]}]"#).unwrap();
        let msgs = [ChatMessage::system("s")];
        assert_eq!(s.complete(&msgs, &[]).unwrap().message.content, "a");
        let second = s.complete(&msgs, &[]).unwrap().message;
        assert_eq!(second.tool_calls[0].arguments, r#"{"pattern":"x"}"#);
        assert!(matches!(s.complete(&msgs, &[]), Err(LlmError::ScriptExhausted(2))));
    }

    #[test]
    fn script_substitutes_last_tool_result() {
        let s = ScriptedBackend::from_json(r#"[{"content": "saw: {{last_tool_result}}"}]"#).unwrap();
        let msgs = [ChatMessage::system("s"), ChatMessage::tool("c1", "x = 1970")];
        assert_eq!(s.complete(&msgs, &[]).unwrap().message.content, "saw: x = 1970");
    }

    #[test]
    fn script_rejects_unknown_fields() {
        assert!(matches!(
            ScriptedBackend::from_json(r#"[{"contnet": "typo"}]"#),
            Err(LlmError::InvalidScript(_))
        ));
    }

    /// Serves canned (status, body) replies, one per connection.
    fn stub_server(replies: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let Ok((mut stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                }
                let mut buf = vec![0; len];
                let _ = reader.read_exact(&mut buf);
                counter.fetch_add(1, Ordering::SeqCst);
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
            }
        });
        (format!("http://{addr}"), hits)
    }

    fn config(base_url: String) -> HttpConfig {
        HttpConfig {
            base_url,
            api_key: "k".into(),
            model: "m".into(),
            request_timeout: Duration::from_secs(5),
            attempts: 3,
            backoff_base: Duration::from_millis(5),
        }
    }

    #[test]
    fn http_retries_then_fails() {
        let (url, hits) = stub_server(vec![(500, "{}".into()), (500, "{}".into()), (500, "{\"error\":\"boom\"}".into())]);
        let backend = HttpBackend::new(config(url));
        match backend.complete(&[ChatMessage::system("s")], &[]) {
            Err(LlmError::ApiError { status, body_digest }) => {
                assert_eq!(status, Some(500));
                assert!(body_digest.contains("boom"));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn http_parses_tool_calls_and_usage() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":null,"tool_calls":[{"id":"t1","type":"function","function":{"name":"grep","arguments":"{\"pattern\":\"x\"}"}}]}}],"usage":{"prompt_tokens":12,"completion_tokens":5}}"#;
        let (url, hits) = stub_server(vec![(503, "busy".into()), (200, ok.into())]);
        let backend = HttpBackend::new(config(url));
        let tools = [ToolSchema::new("grep", "search", json!({"type": "object"}))];
        let c = backend.complete(&[ChatMessage::system("s"), ChatMessage::user("u")], &tools).unwrap();
        assert_eq!(c.usage, TokenUsage { input_tokens: 12, output_tokens: 5 });
        assert_eq!(c.message.tool_calls[0].name, "grep");
        assert_eq!(c.message.content, "");
        assert_eq!(hits.load(Ordering::SeqCst), 2);
    }
}
