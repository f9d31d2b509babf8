use std::time::Instant;

use serde::Deserialize;

use super::{ChatClient, ChatPrompt, ChatResponse, EndpointConfig, FinishReason, LlmError, CHAT_TOKEN_ENV};
use crate::http::{self, RetryPolicy, Semaphore};

/// Client for an endpoint speaking the chat-completions JSON schema.
pub struct RemoteChatClient {
    url: String,
    model: String,
    token: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
    in_flight: Semaphore,
}

impl std::fmt::Debug for RemoteChatClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteChatClient")
            .field("url", &self.url)
            .field("model", &self.model)
            .field("has_token", &self.token.is_some())
            .finish()
    }
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

impl RemoteChatClient {
    pub fn new(config: &EndpointConfig) -> Result<Self, LlmError> {
        let (Some(url), Some(model)) = (config.url.clone(), config.model.clone()) else {
            return Err(LlmError::Config("http endpoint requires url and model".into()));
        };
        Ok(Self {
            url,
            model,
            token: std::env::var(CHAT_TOKEN_ENV).ok(),
            retry: config.retry,
            client: http::build_client(config.timeout_secs)?,
            in_flight: Semaphore::new(config.max_in_flight),
        })
    }

    fn body(&self, prompt: &ChatPrompt) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "messages": prompt.messages,
            "temperature": prompt.temperature,
            "max_tokens": prompt.max_tokens,
        })
    }
}

impl ChatClient for RemoteChatClient {
    fn complete(&self, prompt: &ChatPrompt) -> Result<ChatResponse, LlmError> {
        let body = self.body(prompt);
        let started = Instant::now();
        let value = {
            let _permit = self.in_flight.acquire();
            http::post_json(&self.client, &self.url, self.token.as_deref(), &body, self.retry)?
        };
        let latency_ms = started.elapsed().as_millis() as u64;
        let completion: Completion =
            serde_json::from_value(value).map_err(|e| LlmError::Response(e.to_string()))?;
        let choice = completion
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LlmError::Response("no choices".into()))?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            _ => FinishReason::Stop,
        };
        let content = choice
            .message
            .content
            .ok_or_else(|| LlmError::Response("choice without content".into()))?;
        Ok(ChatResponse {
            content,
            finish_reason,
            latency_ms,
        })
    }
}
