//! Query reformulation: ground-truth-guided pseudo-queries, the training
//! set for the reformulation model, and inference-time queries in three
//! modes.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_title, render_turns, ItemCatalog, RecInstance, Split};
use crate::llm::{self, fit_oldest_first, ChatClient, ChatPrompt, LlmError, TokenBudget, MAX_TOKENS_QUERY};
use crate::prompts;

#[derive(Debug, thiserror::Error)]
pub enum QueryError {
    #[error("instance {0}: empty history")]
    EmptyHistory(String),
    #[error("instance {instance_id}: truth item `{item_id}` not in catalog")]
    UnknownTruth { instance_id: String, item_id: String },
    #[error("instance {0} is not in the train split")]
    NotTrain(String),
    #[error("instance {0}: model returned an empty query")]
    EmptyQuery(String),
    #[error("{mode} query for {instance_id}: {source}")]
    Client {
        mode: QueryMode,
        instance_id: String,
        #[source]
        source: LlmError,
    },
    #[error("instance {instance_id}: {source}")]
    Prompt {
        instance_id: String,
        #[source]
        source: LlmError,
    },
    #[error("mode {0} needs a chat client")]
    NoClient(QueryMode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// The rendered conversation itself.
    Original,
    /// One-shot rewrite by an untuned model.
    DirectPrompt,
    /// Output of the fine-tuned reformulation model.
    TrainedQr,
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryMode::Original => "original",
            QueryMode::DirectPrompt => "direct",
            QueryMode::TrainedQr => "qr",
        })
    }
}

impl FromStr for QueryMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "original" => Ok(QueryMode::Original),
            "direct" | "direct_prompt" => Ok(QueryMode::DirectPrompt),
            "qr" | "trained_qr" => Ok(QueryMode::TrainedQr),
            other => Err(format!("unknown query mode `{other}` (original|direct|qr)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoQuery {
    pub instance_id: String,
    pub query_text: String,
    pub source_truth_item_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReformulatedQuery {
    pub instance_id: String,
    pub mode: QueryMode,
    pub query_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceFailure {
    pub instance_id: String,
    pub error: String,
}

static FENCE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*```").unwrap());
static LABEL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*(?:search\s+query|query)\s*:\s*").unwrap());

fn strip_quotes(s: &str) -> &str {
    const PAIRS: [(char, char); 5] = [('"', '"'), ('\'', '\''), ('\u{201c}', '\u{201d}'), ('`', '`'), ('\u{2018}', '\u{2019}')];
    let s = s.trim();
    for (open, close) in PAIRS {
        if s.len() >= open.len_utf8() + close.len_utf8() && s.starts_with(open) && s.ends_with(close) {
            return s[open.len_utf8()..s.len() - close.len_utf8()].trim();
        }
    }
    s
}

/// Cleans a model-produced query: code fences and `Query:` / `Search
/// query:` labels removed, surrounding quotes stripped, everything on one
/// line. `None` when nothing is left.
pub fn clean_query(raw: &str) -> Option<String> {
    let joined = raw
        .lines()
        .filter(|l| !FENCE.is_match(l))
        .collect::<Vec<_>>()
        .join(" ");
    let mut text = joined.split_whitespace().collect::<Vec<_>>().join(" ");
    loop {
        let unlabeled = LABEL.replace(&text, "").into_owned();
        let unquoted = strip_quotes(&unlabeled).to_string();
        if unquoted == text {
            break;
        }
        text = unquoted;
    }
    (!text.is_empty()).then_some(text)
}

fn history_prompt(
    instance: &RecInstance,
    template: &str,
    extra: &[(&str, &str)],
    budget: &TokenBudget,
) -> Result<String, QueryError> {
    if instance.history.is_empty() {
        return Err(QueryError::EmptyHistory(instance.instance_id.clone()));
    }
    let (text, dropped) = fit_oldest_first(&instance.history, budget, |turns| {
        let history = render_turns(turns);
        let mut values = vec![(prompts::HISTORY, history.as_str())];
        values.extend_from_slice(extra);
        prompts::fill(template, &values)
    })
    .map_err(|source| QueryError::Prompt {
        instance_id: instance.instance_id.clone(),
        source,
    })?;
    if dropped > 0 {
        log::debug!("{}: dropped {dropped} oldest turn(s) to fit the budget", instance.instance_id);
    }
    Ok(text)
}

/// Pseudo-query prompt: conversation plus the ground-truth item rendered
/// as `"TITLE (YEAR): ABSTRACT"`.
pub fn build_pseudo_query_prompt(
    instance: &RecInstance,
    catalog: &ItemCatalog,
    budget: &TokenBudget,
) -> Result<ChatPrompt, QueryError> {
    let truth = catalog
        .get(&instance.truth_item_id)
        .ok_or_else(|| QueryError::UnknownTruth {
            instance_id: instance.instance_id.clone(),
            item_id: instance.truth_item_id.clone(),
        })?;
    let described = truth.describe();
    let text = history_prompt(
        instance,
        prompts::QR_SUPERVISED,
        &[(prompts::GROUND_TRUTH, described.as_str())],
        budget,
    )?;
    Ok(ChatPrompt::user(text, MAX_TOKENS_QUERY))
}

/// Reformulation prompt without the ground truth, used both as the
/// training input and at inference.
pub fn build_qr_inference_prompt(instance: &RecInstance, budget: &TokenBudget) -> Result<ChatPrompt, QueryError> {
    let text = history_prompt(instance, prompts::QR_INFERENCE, &[], budget)?;
    Ok(ChatPrompt::user(text, MAX_TOKENS_QUERY))
}

pub fn build_direct_prompt(instance: &RecInstance, budget: &TokenBudget) -> Result<ChatPrompt, QueryError> {
    let text = history_prompt(instance, prompts::DIRECT_QUERY, &[], budget)?;
    Ok(ChatPrompt::user(text, MAX_TOKENS_QUERY))
}

#[derive(Debug, Clone, Default)]
pub struct PseudoQueryRun {
    pub queries: Vec<PseudoQuery>,
    pub failures: Vec<InstanceFailure>,
}

/// Asks the model for one pseudo-query per train instance. Failing
/// instances are reported and skipped; output is sorted by instance id.
pub fn generate_pseudo_queries(
    client: &dyn ChatClient,
    instances: &[RecInstance],
    catalog: &ItemCatalog,
    budget: &TokenBudget,
) -> Result<PseudoQueryRun, QueryError> {
    if let Some(bad) = instances.iter().find(|i| i.split != Split::Train) {
        return Err(QueryError::NotTrain(bad.instance_id.clone()));
    }
    let results: Vec<Result<PseudoQuery, InstanceFailure>> = instances
        .par_iter()
        .map(|instance| {
            pseudo_query(client, instance, catalog, budget).map_err(|e| InstanceFailure {
                instance_id: instance.instance_id.clone(),
                error: e.to_string(),
            })
        })
        .collect();
    let mut run = PseudoQueryRun::default();
    for result in results {
        match result {
            Ok(q) => run.queries.push(q),
            Err(f) => run.failures.push(f),
        }
    }
    run.queries.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    run.failures.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    Ok(run)
}

fn pseudo_query(
    client: &dyn ChatClient,
    instance: &RecInstance,
    catalog: &ItemCatalog,
    budget: &TokenBudget,
) -> Result<PseudoQuery, QueryError> {
    let prompt = build_pseudo_query_prompt(instance, catalog, budget)?;
    let response = llm::chat(client, &prompt, budget).map_err(|source| QueryError::Client {
        mode: QueryMode::TrainedQr,
        instance_id: instance.instance_id.clone(),
        source,
    })?;
    let query_text =
        clean_query(&response.content).ok_or_else(|| QueryError::EmptyQuery(instance.instance_id.clone()))?;
    Ok(PseudoQuery {
        instance_id: instance.instance_id.clone(),
        query_text,
        source_truth_item_id: instance.truth_item_id.clone(),
    })
}

/// One supervised example for the reformulation model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QrTrainingRecord {
    pub instance_id: String,
    pub prompt: String,
    pub completion: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRecord {
    pub instance_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct QrTrainingSet {
    pub records: Vec<QrTrainingRecord>,
    pub rejected: Vec<RejectedRecord>,
}

impl QrTrainingSet {
    /// The training file: one JSON record per line.
    pub fn to_jsonl(&self) -> String {
        crate::jsonl::to_lines(&self.records)
    }
}

/// True when the normalized title appears as a whole-word run inside the
/// normalized text.
pub fn mentions_title(text: &str, title: &str) -> bool {
    let needle = normalize_title(title);
    if needle.is_empty() {
        return false;
    }
    let hay = normalize_title(text);
    format!(" {hay} ").contains(&format!(" {needle} "))
}

/// Pairs each pseudo-query with the reformulation prompt of its instance.
///
/// The conversation is user data and may mention the truth title; the
/// instruction scaffold around it must not, and records whose scaffold
/// does are rejected.
pub fn build_qr_training_set(
    pseudo: &[PseudoQuery],
    instances: &[RecInstance],
    catalog: &ItemCatalog,
    budget: &TokenBudget,
) -> QrTrainingSet {
    let by_id: HashMap<&str, &RecInstance> = instances.iter().map(|i| (i.instance_id.as_str(), i)).collect();
    let scaffold = prompts::fill(prompts::QR_INFERENCE, &[(prompts::HISTORY, "")]);
    let mut set = QrTrainingSet::default();
    let mut sorted: Vec<&PseudoQuery> = pseudo.iter().collect();
    sorted.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    for q in sorted {
        let reject = |reason: String| RejectedRecord {
            instance_id: q.instance_id.clone(),
            reason,
        };
        let Some(instance) = by_id.get(q.instance_id.as_str()) else {
            set.rejected.push(reject("no matching instance".into()));
            continue;
        };
        if let Some(truth) = catalog.get(&instance.truth_item_id) {
            if mentions_title(&scaffold, &truth.title) {
                set.rejected.push(reject(format!("instruction leaks truth title `{}`", truth.title)));
                continue;
            }
        }
        match build_qr_inference_prompt(instance, budget) {
            Ok(prompt) => set.records.push(QrTrainingRecord {
                instance_id: q.instance_id.clone(),
                prompt: prompt.user_text().to_string(),
                completion: q.query_text.clone(),
            }),
            Err(e) => set.rejected.push(reject(e.to_string())),
        }
    }
    set
}

/// Produces the retrieval query for one instance in the given mode.
/// `original` needs no client.
pub fn reformulate(
    client: Option<&dyn ChatClient>,
    instance: &RecInstance,
    mode: QueryMode,
    budget: &TokenBudget,
) -> Result<ReformulatedQuery, QueryError> {
    let query_text = match mode {
        QueryMode::Original => {
            if instance.history.is_empty() {
                return Err(QueryError::EmptyHistory(instance.instance_id.clone()));
            }
            instance.render_history()
        }
        QueryMode::DirectPrompt | QueryMode::TrainedQr => {
            let client = client.ok_or(QueryError::NoClient(mode))?;
            let prompt = if mode == QueryMode::DirectPrompt {
                build_direct_prompt(instance, budget)?
            } else {
                build_qr_inference_prompt(instance, budget)?
            };
            let response = llm::chat(client, &prompt, budget).map_err(|source| QueryError::Client {
                mode,
                instance_id: instance.instance_id.clone(),
                source,
            })?;
            clean_query(&response.content).ok_or_else(|| QueryError::EmptyQuery(instance.instance_id.clone()))?
        }
    };
    Ok(ReformulatedQuery {
        instance_id: instance.instance_id.clone(),
        mode,
        query_text,
    })
}

/// [`reformulate`] over many instances; stops at the first failure.
/// Output is sorted by instance id.
pub fn reformulate_all(
    client: Option<&dyn ChatClient>,
    instances: &[RecInstance],
    mode: QueryMode,
    budget: &TokenBudget,
) -> Result<Vec<ReformulatedQuery>, QueryError> {
    let mut out = instances
        .par_iter()
        .map(|i| reformulate(client, i, mode, budget))
        .collect::<Result<Vec<_>, _>>()?;
    out.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    Ok(out)
}
