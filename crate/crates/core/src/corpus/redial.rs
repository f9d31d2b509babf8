//! ReDial conversation records.
//!
//! One JSON object per line with `conversationId`, `initiatorWorkerId`,
//! `respondentWorkerId`, `messages[{senderWorkerId, text}]`, `movieMentions`
//! (id -> "Title (Year)") and the per-movie `initiatorQuestions` /
//! `respondentQuestions` forms. The initiator is the seeker.

use std::collections::{HashMap, HashSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::Deserialize;
use serde_json::Value;

use super::{CorpusError, Dialogue, RecMention, Speaker, Turn};
use crate::jsonl::id_string;

static MENTION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"@(\d+)").unwrap());

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct RawMessage {
    #[serde(deserialize_with = "id_string")]
    sender_worker_id: String,
    text: String,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct RawConversation {
    #[serde(deserialize_with = "id_string")]
    conversation_id: String,
    #[serde(deserialize_with = "id_string")]
    initiator_worker_id: String,
    #[serde(deserialize_with = "id_string")]
    respondent_worker_id: String,
    messages: Vec<RawMessage>,
    #[serde(default)]
    movie_mentions: Value,
    #[serde(default)]
    initiator_questions: Value,
    #[serde(default)]
    respondent_questions: Value,
}

/// ReDial serializes empty maps as `[]`; both shapes are accepted.
fn string_map(value: &Value) -> HashMap<String, String> {
    match value {
        Value::Object(map) => map
            .iter()
            .filter_map(|(k, v)| v.as_str().map(|s| (k.clone(), s.to_string())))
            .collect(),
        _ => HashMap::new(),
    }
}

fn suggested(questions: &Value, movie: &str) -> Option<bool> {
    let flag = questions.get(movie)?.get("suggested")?;
    flag.as_i64().map(|v| v == 1).or_else(|| flag.as_bool())
}

pub(super) fn parse_line(line: &str, line_no: usize) -> Result<Dialogue, CorpusError> {
    let raw: RawConversation = serde_json::from_str(line).map_err(|e| CorpusError::Record {
        line: line_no,
        message: e.to_string(),
    })?;
    let mentions = string_map(&raw.movie_mentions);

    // consecutive messages from the same worker become one turn
    let mut turns: Vec<Turn> = Vec::new();
    let mut movies_per_turn: Vec<Vec<String>> = Vec::new();
    for msg in &raw.messages {
        let speaker = if msg.sender_worker_id == raw.initiator_worker_id {
            Speaker::Seeker
        } else if msg.sender_worker_id == raw.respondent_worker_id {
            Speaker::Recommender
        } else {
            return Err(CorpusError::UnknownSpeaker {
                line: line_no,
                speaker: msg.sender_worker_id.clone(),
            });
        };
        let movies: Vec<String> = MENTION
            .captures_iter(&msg.text)
            .map(|c| c[1].to_string())
            .collect();
        let text = MENTION
            .replace_all(&msg.text, |c: &regex::Captures| {
                mentions
                    .get(&c[1])
                    .map(|title| title.trim().to_string())
                    .unwrap_or_else(|| c[0].to_string())
            })
            .trim()
            .to_string();
        if text.is_empty() {
            continue;
        }
        match turns.last_mut() {
            Some(last) if last.speaker == speaker => {
                last.text.push(' ');
                last.text.push_str(&text);
                movies_per_turn.last_mut().unwrap().extend(movies);
            }
            _ => {
                turns.push(Turn {
                    speaker,
                    text,
                    turn_index: turns.len(),
                });
                movies_per_turn.push(movies);
            }
        }
    }

    let mut seen = HashSet::new();
    let mut recommendations = Vec::new();
    for (turn, movies) in turns.iter().zip(&movies_per_turn) {
        for movie in movies {
            if !seen.insert(movie.clone()) {
                continue;
            }
            if turn.speaker != Speaker::Recommender {
                continue;
            }
            let was_suggested = suggested(&raw.respondent_questions, movie)
                .or_else(|| suggested(&raw.initiator_questions, movie))
                .unwrap_or(true);
            if was_suggested {
                recommendations.push(RecMention {
                    turn_index: turn.turn_index,
                    item_id: movie.clone(),
                });
            }
        }
    }

    Ok(Dialogue {
        dialogue_id: raw.conversation_id,
        turns,
        recommendations,
    })
}
