use std::collections::{HashMap, VecDeque};
use std::io::BufRead;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatClient, ChatPrompt, ChatResponse, FinishReason, Fingerprint, LlmError};

/// Script key matching any prompt without a keyed entry.
pub const FALLBACK_KEY: &str = "*";

/// What the mock does with a prompt it has no answer for.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissPolicy {
    #[default]
    Fail,
    /// Answer with the prompt's last user message.
    Echo,
}

/// Canned answers. Lookup order: fingerprint entry, then the next queued
/// sequence entry, then the fallback.
#[derive(Debug, Default)]
pub struct MockScript {
    keyed: HashMap<Fingerprint, String>,
    sequence: Mutex<VecDeque<String>>,
    fallback: Option<String>,
}

impl Clone for MockScript {
    fn clone(&self) -> Self {
        Self {
            keyed: self.keyed.clone(),
            sequence: Mutex::new(self.sequence.lock().unwrap_or_else(|e| e.into_inner()).clone()),
            fallback: self.fallback.clone(),
        }
    }
}

impl MockScript {
    pub fn with_entry(mut self, fingerprint: Fingerprint, content: impl Into<String>) -> Self {
        self.keyed.insert(fingerprint, content.into());
        self
    }

    pub fn with_prompt(self, prompt: &ChatPrompt, content: impl Into<String>) -> Self {
        let fp = prompt.fingerprint();
        self.with_entry(fp, content)
    }

    pub fn with_fallback(mut self, content: impl Into<String>) -> Self {
        self.fallback = Some(content.into());
        self
    }

    /// Answers consumed in order by prompts that have no keyed entry.
    pub fn with_sequence<I, S>(self, contents: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.sequence
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .extend(contents.into_iter().map(Into::into));
        self
    }

    fn answer(&self, prompt: &ChatPrompt) -> Option<String> {
        if let Some(content) = self.keyed.get(&prompt.fingerprint()) {
            return Some(content.clone());
        }
        if let Some(next) = self.sequence.lock().unwrap_or_else(|e| e.into_inner()).pop_front() {
            return Some(next);
        }
        self.fallback.clone()
    }

    /// Script file lines, keyed entries sorted by fingerprint, fallback last.
    pub fn to_lines(&self) -> String {
        let mut keyed: Vec<_> = self.keyed.iter().collect();
        keyed.sort_by_key(|(fp, _)| fp.0);
        let mut records: Vec<ScriptLine> = keyed
            .into_iter()
            .map(|(fp, content)| ScriptLine {
                fingerprint: fp.to_string(),
                content: content.clone(),
            })
            .collect();
        if let Some(fallback) = &self.fallback {
            records.push(ScriptLine {
                fingerprint: FALLBACK_KEY.into(),
                content: fallback.clone(),
            });
        }
        crate::jsonl::to_lines(&records)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptLine {
    fingerprint: String,
    content: String,
}

/// Reads line-delimited `{fingerprint, content}` records; `"*"` is the
/// fallback. Duplicate keys are rejected.
pub fn load_mock_script<R: BufRead>(source: R) -> Result<MockScript, LlmError> {
    let mut script = MockScript::default();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| LlmError::Script {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| LlmError::Script { line: line_no, message };
        let record: ScriptLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if record.fingerprint == FALLBACK_KEY {
            if script.fallback.replace(record.content).is_some() {
                return Err(err("duplicate fallback".into()));
            }
            continue;
        }
        let fp = u64::from_str_radix(&record.fingerprint, 16)
            .map_err(|_| err(format!("bad fingerprint `{}`", record.fingerprint)))?;
        if script.keyed.insert(Fingerprint(fp), record.content).is_some() {
            return Err(err(format!("duplicate fingerprint {}", record.fingerprint)));
        }
    }
    Ok(script)
}

/// Deterministic scripted client.
#[derive(Debug)]
pub struct MockChatClient {
    script: MockScript,
    on_miss: MissPolicy,
    calls: AtomicUsize,
}

impl MockChatClient {
    pub fn new(script: MockScript, on_miss: MissPolicy) -> Self {
        Self {
            script,
            on_miss,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatClient for MockChatClient {
    fn complete(&self, prompt: &ChatPrompt) -> Result<ChatResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let content = match (self.script.answer(prompt), self.on_miss) {
            (Some(content), _) => content,
            (None, MissPolicy::Echo) => prompt.user_text().to_string(),
            (None, MissPolicy::Fail) => return Err(LlmError::Unscripted(prompt.fingerprint().to_string())),
        };
        Ok(ChatResponse {
            content,
            finish_reason: FinishReason::Stop,
            latency_ms: 0,
        })
    }
}

/// Client answering through a closure; `Err` text becomes a backend error.
pub struct FnChatClient<F> {
    respond: F,
}

impl<F> FnChatClient<F>
where
    F: Fn(&ChatPrompt) -> Result<String, String> + Send + Sync,
{
    pub fn new(respond: F) -> Self {
        Self { respond }
    }
}

impl<F> ChatClient for FnChatClient<F>
where
    F: Fn(&ChatPrompt) -> Result<String, String> + Send + Sync,
{
    fn complete(&self, prompt: &ChatPrompt) -> Result<ChatResponse, LlmError> {
        (self.respond)(prompt)
            .map(|content| ChatResponse {
                content,
                finish_reason: FinishReason::Stop,
                latency_ms: 0,
            })
            .map_err(LlmError::Backend)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyed_lookup() {
        let prompt = ChatPrompt::user("recommend something", 64);
        let client = MockChatClient::new(MockScript::default().with_prompt(&prompt, "Heat (1995)"), MissPolicy::Fail);
        let response = client.complete(&prompt).unwrap();
        assert_eq!(response.content, "Heat (1995)");
        assert_eq!(response.finish_reason, FinishReason::Stop);
    }

    #[test]
    fn miss_fails_with_fingerprint() {
        let client = MockChatClient::new(MockScript::default(), MissPolicy::Fail);
        let prompt = ChatPrompt::user("?", 8);
        let err = client.complete(&prompt).unwrap_err();
        assert!(err.to_string().contains(&prompt.fingerprint().to_string()));
    }

    #[test]
    fn miss_echoes() {
        let client = MockChatClient::new(MockScript::default(), MissPolicy::Echo);
        assert_eq!(client.complete(&ChatPrompt::user("same", 8)).unwrap().content, "same");
    }

    #[test]
    fn sequence_consumed_in_order() {
        let client = MockChatClient::new(MockScript::default().with_sequence(["first", "second"]), MissPolicy::Fail);
        let p = ChatPrompt::user("x", 8);
        assert_eq!(client.complete(&p).unwrap().content, "first");
        assert_eq!(client.complete(&p).unwrap().content, "second");
        assert!(client.complete(&p).is_err());
        assert_eq!(client.calls(), 3);
    }

    #[test]
    fn script_file_round_trip() {
        let p = ChatPrompt::user("a", 8);
        let script = MockScript::default().with_prompt(&p, "line one\nline two").with_fallback("dunno");
        let text = script.to_lines();
        let back = load_mock_script(text.as_bytes()).unwrap();
        let client = MockChatClient::new(back, MissPolicy::Fail);
        assert_eq!(client.complete(&p).unwrap().content, "line one\nline two");
        assert_eq!(client.complete(&ChatPrompt::user("b", 8)).unwrap().content, "dunno");
    }

    #[test]
    fn bad_script_lines() {
        assert!(matches!(
            load_mock_script("{\"fingerprint\":\"zz\",\"content\":\"x\"}".as_bytes()),
            Err(LlmError::Script { line: 1, .. })
        ));
        let dup = "{\"fingerprint\":\"*\",\"content\":\"a\"}\n{\"fingerprint\":\"*\",\"content\":\"b\"}";
        assert!(matches!(load_mock_script(dup.as_bytes()), Err(LlmError::Script { line: 2, .. })));
    }
}
