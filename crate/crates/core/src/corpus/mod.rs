//! Dialogue datasets, item catalogs and recommendation-turn instances.

mod catalog;
mod inspired;
mod redial;
mod title;

use std::collections::HashSet;
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::jsonl::id_string;

pub use catalog::{load_catalog, Item, ItemCatalog};
pub use title::{normalize_title, normalize_title_with_year, strip_trailing_year};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("line {line}: unknown speaker `{speaker}`")]
    UnknownSpeaker { line: usize, speaker: String },
    #[error("duplicate item_id `{item_id}` on lines {first_line} and {second_line}")]
    DuplicateItem {
        item_id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Seeker,
    Recommender,
}

impl Speaker {
    pub fn label(self) -> &'static str {
        match self {
            Speaker::Seeker => "Seeker",
            Speaker::Recommender => "Recommender",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    pub turn_index: usize,
}

/// A recommendation made at `turn_index`. `item_id` is either a catalog id or
/// a title, resolved when instances are extracted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecMention {
    pub turn_index: usize,
    #[serde(deserialize_with = "id_string")]
    pub item_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub turns: Vec<Turn>,
    pub recommendations: Vec<RecMention>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "valid" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// One recommendation turn: the dialogue before it and the item recommended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecInstance {
    pub instance_id: String,
    pub history: Vec<Turn>,
    pub truth_item_id: String,
    pub split: Split,
}

impl RecInstance {
    /// `"Seeker: ..."` / `"Recommender: ..."` lines joined by newlines.
    pub fn render_history(&self) -> String {
        render_turns(&self.history)
    }
}

pub fn render_turns(turns: &[Turn]) -> String {
    turns
        .iter()
        .map(|t| format!("{}: {}", t.speaker.label(), t.text))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DialogueFormat {
    Redial,
    Inspired,
    Canonical,
}

impl FromStr for DialogueFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "redial" => Ok(Self::Redial),
            "inspired" => Ok(Self::Inspired),
            "canonical" => Ok(Self::Canonical),
            other => Err(format!("unknown dialogue format `{other}`")),
        }
    }
}

impl fmt::Display for DialogueFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Redial => "redial",
            Self::Inspired => "inspired",
            Self::Canonical => "canonical",
        })
    }
}

/// Parses line-delimited dialogue records. Each non-blank line yields either
/// a dialogue or an error carrying its line number; order is preserved.
pub fn parse_dialogues<R: BufRead>(
    source: R,
    format: DialogueFormat,
) -> Vec<Result<Dialogue, CorpusError>> {
    let mut out = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = match line {
            Ok(line) => line,
            Err(e) => {
                out.push(Err(CorpusError::Io(e.to_string())));
                break;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        let parsed = match format {
            DialogueFormat::Canonical => parse_canonical(&line, line_no),
            DialogueFormat::Redial => redial::parse_line(&line, line_no),
            DialogueFormat::Inspired => inspired::parse_line(&line, line_no),
        };
        out.push(parsed.and_then(|d| validate_dialogue(d, line_no)));
    }
    out
}

#[derive(Serialize, Deserialize)]
struct CanonicalTurn {
    speaker: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct CanonicalDialogue {
    #[serde(deserialize_with = "id_string")]
    dialogue_id: String,
    turns: Vec<CanonicalTurn>,
    #[serde(default)]
    recommendations: Vec<RecMention>,
}

pub(crate) fn parse_speaker(tag: &str, line: usize) -> Result<Speaker, CorpusError> {
    match tag.to_ascii_lowercase().as_str() {
        "seeker" | "user" => Ok(Speaker::Seeker),
        "recommender" | "system" => Ok(Speaker::Recommender),
        _ => Err(CorpusError::UnknownSpeaker {
            line,
            speaker: tag.to_string(),
        }),
    }
}

fn parse_canonical(line: &str, line_no: usize) -> Result<Dialogue, CorpusError> {
    let raw: CanonicalDialogue = serde_json::from_str(line).map_err(|e| CorpusError::Record {
        line: line_no,
        message: e.to_string(),
    })?;
    let turns = raw
        .turns
        .into_iter()
        .enumerate()
        .map(|(turn_index, t)| {
            Ok(Turn {
                speaker: parse_speaker(&t.speaker, line_no)?,
                text: t.text,
                turn_index,
            })
        })
        .collect::<Result<Vec<_>, CorpusError>>()?;
    Ok(Dialogue {
        dialogue_id: raw.dialogue_id,
        turns,
        recommendations: raw.recommendations,
    })
}

fn validate_dialogue(dialogue: Dialogue, line: usize) -> Result<Dialogue, CorpusError> {
    let record = |message: String| CorpusError::Record { line, message };
    let mut previous = None;
    for turn in &dialogue.turns {
        if turn.text.trim().is_empty() {
            return Err(record(format!("turn {} has empty text", turn.turn_index)));
        }
        if previous.is_some_and(|p| turn.turn_index <= p) {
            return Err(record(format!(
                "turn_index {} not increasing",
                turn.turn_index
            )));
        }
        previous = Some(turn.turn_index);
    }
    for rec in &dialogue.recommendations {
        match dialogue.turns.iter().find(|t| t.turn_index == rec.turn_index) {
            None => {
                return Err(record(format!(
                    "recommendation refers to missing turn {}",
                    rec.turn_index
                )))
            }
            Some(t) if t.speaker != Speaker::Recommender => {
                return Err(record(format!(
                    "recommendation at turn {} is not a recommender turn",
                    rec.turn_index
                )))
            }
            Some(_) => {}
        }
    }
    Ok(dialogue)
}

/// Serializes a dialogue back to the canonical line format.
pub fn to_canonical_line(dialogue: &Dialogue) -> String {
    let record = CanonicalDialogue {
        dialogue_id: dialogue.dialogue_id.clone(),
        turns: dialogue
            .turns
            .iter()
            .map(|t| CanonicalTurn {
                speaker: match t.speaker {
                    Speaker::Seeker => "seeker".into(),
                    Speaker::Recommender => "recommender".into(),
                },
                text: t.text.clone(),
            })
            .collect(),
        recommendations: dialogue.recommendations.clone(),
    };
    serde_json::to_string(&record).expect("dialogue serializes")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    UnresolvedItem,
    EmptyHistory,
    NoSeekerTurn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedEntry {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub item_id: String,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    pub entries: Vec<SkippedEntry>,
}

impl SkipReport {
    pub fn count(&self) -> usize {
        self.entries.len()
    }

    pub fn count_reason(&self, reason: SkipReason) -> usize {
        self.entries.iter().filter(|e| e.reason == reason).count()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Extraction {
    pub instances: Vec<RecInstance>,
    pub skipped: SkipReport,
}

/// One instance per resolvable recommendation entry; the history is every
/// turn strictly before the recommendation turn.
pub fn extract_instances(dialogues: &[Dialogue], catalog: &ItemCatalog, split: Split) -> Extraction {
    let mut out = Extraction::default();
    for dialogue in dialogues {
        let mut emitted = HashSet::new();
        for rec in &dialogue.recommendations {
            let skip = |reason| SkippedEntry {
                dialogue_id: dialogue.dialogue_id.clone(),
                turn_index: rec.turn_index,
                item_id: rec.item_id.clone(),
                reason,
            };
            let Some(item) = catalog.resolve(&rec.item_id) else {
                out.skipped.entries.push(skip(SkipReason::UnresolvedItem));
                continue;
            };
            let history: Vec<Turn> = dialogue
                .turns
                .iter()
                .take_while(|t| t.turn_index < rec.turn_index)
                .cloned()
                .collect();
            if history.is_empty() {
                out.skipped.entries.push(skip(SkipReason::EmptyHistory));
                continue;
            }
            if !history.iter().any(|t| t.speaker == Speaker::Seeker) {
                out.skipped.entries.push(skip(SkipReason::NoSeekerTurn));
                continue;
            }
            let instance_id = format!("{}:{}:{}", dialogue.dialogue_id, rec.turn_index, item.item_id);
            if !emitted.insert(instance_id.clone()) {
                continue;
            }
            out.instances.push(RecInstance {
                instance_id,
                history,
                truth_item_id: item.item_id.clone(),
                split,
            });
        }
    }
    out
}
