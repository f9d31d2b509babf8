//! Blocking JSON-over-HTTP with bounded retries, shared by the remote
//! embedding and chat backends.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Retry schedule: `attempts` tries in total, sleeping `base_delay_ms`,
/// then twice that, and so on between them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    #[serde(default = "default_attempts")]
    pub attempts: u32,
    #[serde(default = "default_base_delay_ms")]
    pub base_delay_ms: u64,
}

fn default_attempts() -> u32 {
    3
}

fn default_base_delay_ms() -> u64 {
    500
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: default_attempts(),
            base_delay_ms: default_base_delay_ms(),
        }
    }
}

impl RetryPolicy {
    pub fn delay_before(&self, attempt: u32) -> Duration {
        // attempt is 1-based; no delay before the first one
        if attempt <= 1 {
            return Duration::ZERO;
        }
        Duration::from_millis(self.base_delay_ms.saturating_mul(1 << (attempt - 2).min(16)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("request to {url} failed after {attempts} attempt(s) (last status: {}): {message}", status.map_or("none".to_string(), |s| s.to_string()))]
pub struct HttpError {
    pub url: String,
    pub status: Option<u16>,
    pub attempts: u32,
    pub message: String,
}

fn retryable(status: u16) -> bool {
    matches!(status, 408 | 409 | 429) || status >= 500
}

/// POSTs `body` and parses the JSON answer. Transport errors and
/// 408/409/429/5xx are retried; any other non-success status fails at once.
pub fn post_json(
    client: &reqwest::blocking::Client,
    url: &str,
    bearer: Option<&str>,
    body: &serde_json::Value,
    policy: RetryPolicy,
) -> Result<serde_json::Value, HttpError> {
    let attempts = policy.attempts.max(1);
    let mut last = HttpError {
        url: url.to_string(),
        status: None,
        attempts: 0,
        message: String::new(),
    };
    for attempt in 1..=attempts {
        thread::sleep(policy.delay_before(attempt));
        last.attempts = attempt;
        let mut request = client.post(url).json(body);
        if let Some(token) = bearer {
            request = request.bearer_auth(token);
        }
        match request.send() {
            Err(e) => {
                last.status = None;
                last.message = e.to_string();
            }
            Ok(response) => {
                let status = response.status().as_u16();
                let text = response.text().unwrap_or_default();
                if (200..300).contains(&status) {
                    return serde_json::from_str(&text).map_err(|e| HttpError {
                        url: url.to_string(),
                        status: Some(status),
                        attempts: attempt,
                        message: format!("invalid JSON body: {e}"),
                    });
                }
                last.status = Some(status);
                last.message = text.chars().take(200).collect();
                if !retryable(status) {
                    break;
                }
            }
        }
        log::warn!("attempt {attempt}/{attempts} to {url} failed: {}", last.message);
    }
    Err(last)
}

pub fn build_client(timeout_secs: u64) -> Result<reqwest::blocking::Client, HttpError> {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(timeout_secs))
        .build()
        .map_err(|e| HttpError {
            url: String::new(),
            status: None,
            attempts: 0,
            message: e.to_string(),
        })
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut free = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.freed.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.freed.notify_one();
    }
}
