//! Chat-completion clients: a remote endpoint speaking the chat-completions
//! JSON schema, a scripted mock, and a closure-backed client for tests.

mod mock;
mod remote;
mod tokens;

use std::fmt;
use std::hash::Hasher;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::http::{HttpError, RetryPolicy};

pub use mock::{load_mock_script, FnChatClient, MissPolicy, MockChatClient, MockScript, FALLBACK_KEY};
pub use remote::RemoteChatClient;
pub use tokens::{count_tokens_approx, ApproxTokenCounter, TokenBudget, TokenCounter};

/// Environment variable holding the bearer token for remote chat endpoints.
pub const CHAT_TOKEN_ENV: &str = "RECGEN_CHAT_TOKEN";

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_TOKEN_BUDGET: usize = 4096;

/// Completion length caps per call type.
pub const MAX_TOKENS_QUERY: u32 = 256;
pub const MAX_TOKENS_ITEM: u32 = 64;
pub const MAX_TOKENS_COT: u32 = 512;

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("prompt must end with a user message")]
    LastNotUser,
    #[error("prompt has {tokens} tokens, over the budget of {limit}")]
    OverBudget { tokens: usize, limit: usize },
    #[error("no scripted response for fingerprint {0}")]
    Unscripted(String),
    #[error("invalid mock script line {line}: {message}")]
    Script { line: usize, message: String },
    #[error("endpoint config: {0}")]
    Config(String),
    #[error("malformed chat response: {0}")]
    Response(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error(transparent)]
    Http(#[from] HttpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatPrompt {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatPrompt {
    /// Single user message at the default temperature.
    pub fn user(content: impl Into<String>, max_tokens: u32) -> Self {
        Self {
            messages: vec![ChatMessage {
                role: Role::User,
                content: content.into(),
            }],
            temperature: DEFAULT_TEMPERATURE,
            max_tokens,
        }
    }

    /// Content of the final user message.
    pub fn user_text(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map_or("", |m| m.content.as_str())
    }

    /// 64-bit FNV-1a over `role:content\n` for every message.
    pub fn fingerprint(&self) -> Fingerprint {
        let mut hasher = FnvHasher::default();
        for m in &self.messages {
            hasher.write(m.role.as_str().as_bytes());
            hasher.write(b":");
            hasher.write(m.content.as_bytes());
            hasher.write(b"\n");
        }
        Fingerprint(hasher.finish())
    }

    pub fn token_count(&self, counter: &dyn TokenCounter) -> usize {
        self.messages.iter().map(|m| counter.count(&m.content)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub u64);

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
}

/// A chat-completion backend.
pub trait ChatClient: Send + Sync {
    fn complete(&self, prompt: &ChatPrompt) -> Result<ChatResponse, LlmError>;
}

impl<C: ChatClient + ?Sized> ChatClient for Arc<C> {
    fn complete(&self, prompt: &ChatPrompt) -> Result<ChatResponse, LlmError> {
        (**self).complete(prompt)
    }
}

impl<C: ChatClient + ?Sized> ChatClient for Box<C> {
    fn complete(&self, prompt: &ChatPrompt) -> Result<ChatResponse, LlmError> {
        (**self).complete(prompt)
    }
}

/// Sends `prompt` after checking its shape and that it fits `budget`.
/// Every pipeline stage talks to a model through here.
pub fn chat(
    client: &dyn ChatClient,
    prompt: &ChatPrompt,
    budget: &TokenBudget,
) -> Result<ChatResponse, LlmError> {
    if prompt.messages.last().map(|m| m.role) != Some(Role::User) {
        return Err(LlmError::LastNotUser);
    }
    let tokens = prompt.token_count(budget.counter());
    if tokens > budget.limit() {
        return Err(LlmError::OverBudget {
            tokens,
            limit: budget.limit(),
        });
    }
    let response = client.complete(prompt)?;
    if response.finish_reason == FinishReason::Error {
        return Err(LlmError::Backend(response.content));
    }
    Ok(response)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointKind {
    Http,
    Mock,
}

/// Where a model lives. `http` endpoints need `url` and `model`; `mock`
/// endpoints read a script file (relative paths resolve against the
/// config file's directory).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub kind: EndpointKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    #[serde(default)]
    pub on_miss: MissPolicy,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_in_flight() -> usize {
    4
}

fn default_timeout() -> u64 {
    120
}

impl EndpointConfig {
    pub fn mock(script: impl Into<PathBuf>) -> Self {
        Self {
            kind: EndpointKind::Mock,
            url: None,
            model: None,
            script: Some(script.into()),
            on_miss: MissPolicy::Fail,
            max_in_flight: default_in_flight(),
            timeout_secs: default_timeout(),
            retry: RetryPolicy::default(),
        }
    }

    pub fn http(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            kind: EndpointKind::Http,
            url: Some(url.into()),
            model: Some(model.into()),
            script: None,
            ..Self::mock("")
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        match self.kind {
            EndpointKind::Http if self.url.is_none() || self.model.is_none() => {
                Err(LlmError::Config("http endpoint requires url and model".into()))
            }
            EndpointKind::Mock if self.script.is_none() => {
                Err(LlmError::Config("mock endpoint requires script".into()))
            }
            _ => Ok(()),
        }
    }

    /// Script path resolved against `base_dir`.
    pub fn script_path(&self, base_dir: &Path) -> Option<PathBuf> {
        self.script.as_ref().map(|p| if p.is_absolute() { p.clone() } else { base_dir.join(p) })
    }

    /// Instantiates the client this config describes.
    pub fn connect(&self, base_dir: &Path) -> Result<Arc<dyn ChatClient>, LlmError> {
        self.validate()?;
        match self.kind {
            EndpointKind::Http => Ok(Arc::new(RemoteChatClient::new(self)?)),
            EndpointKind::Mock => {
                let path = self.script_path(base_dir).expect("validated");
                let file = std::fs::File::open(&path)
                    .map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
                let script = load_mock_script(std::io::BufReader::new(file))?;
                Ok(Arc::new(MockChatClient::new(script, self.on_miss)))
            }
        }
    }
}

/// Drops whole turns from the front of `turns` until `render` fits
/// `budget`; a turn is never split. Returns the rendering and how many
/// turns were dropped, or `OverBudget` when even the last turn alone is
/// too long.
pub fn fit_oldest_first<T>(
    turns: &[T],
    budget: &TokenBudget,
    render: impl Fn(&[T]) -> String,
) -> Result<(String, usize), LlmError> {
    let mut start = 0;
    loop {
        let text = render(&turns[start..]);
        let tokens = budget.count(&text);
        if tokens <= budget.limit() {
            return Ok((text, start));
        }
        if start + 1 >= turns.len() {
            return Err(LlmError::OverBudget {
                tokens,
                limit: budget.limit(),
            });
        }
        start += 1;
    }
}
