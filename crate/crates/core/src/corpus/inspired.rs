//! INSPIRED dialogues in line-delimited form.
//!
//! One JSON object per line: `{"dialog_id", "dialog": [{"speaker":
//! "SEEKER"|"RECOMMENDER", "text", "movies": [title, ...]}]}`. Movies are
//! referenced by title and resolved against the catalog later.

use std::collections::HashSet;

use serde::Deserialize;

use super::{parse_speaker, CorpusError, Dialogue, RecMention, Turn};
use crate::jsonl::id_string;

#[derive(Deserialize)]
struct RawUtterance {
    speaker: String,
    text: String,
    #[serde(default)]
    movies: Vec<String>,
}

#[derive(Deserialize)]
struct RawDialog {
    #[serde(deserialize_with = "id_string")]
    dialog_id: String,
    dialog: Vec<RawUtterance>,
}

pub(super) fn parse_line(line: &str, line_no: usize) -> Result<Dialogue, CorpusError> {
    let raw: RawDialog = serde_json::from_str(line).map_err(|e| CorpusError::Record {
        line: line_no,
        message: e.to_string(),
    })?;

    let mut turns: Vec<Turn> = Vec::new();
    let mut movies_per_turn: Vec<Vec<String>> = Vec::new();
    for utt in raw.dialog {
        let speaker = parse_speaker(&utt.speaker, line_no)?;
        let text = utt.text.trim().to_string();
        if text.is_empty() {
            continue;
        }
        match turns.last_mut() {
            Some(last) if last.speaker == speaker => {
                last.text.push(' ');
                last.text.push_str(&text);
                movies_per_turn.last_mut().unwrap().extend(utt.movies);
            }
            _ => {
                turns.push(Turn {
                    speaker,
                    text,
                    turn_index: turns.len(),
                });
                movies_per_turn.push(utt.movies);
            }
        }
    }

    let mut seen = HashSet::new();
    let mut recommendations = Vec::new();
    for (turn, movies) in turns.iter().zip(movies_per_turn) {
        for movie in movies {
            let movie = movie.trim().to_string();
            if movie.is_empty() || !seen.insert(movie.clone()) {
                continue;
            }
            if turn.speaker == super::Speaker::Recommender {
                recommendations.push(RecMention {
                    turn_index: turn.turn_index,
                    item_id: movie,
                });
            }
        }
    }

    Ok(Dialogue {
        dialogue_id: raw.dialog_id,
        turns,
        recommendations,
    })
}
