//! Resolving free-text model output to a catalog item.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use strsim::normalized_levenshtein;

use crate::corpus::{normalize_title, normalize_title_with_year, Item, ItemCatalog};

/// Minimum normalized edit similarity for a fuzzy match.
pub const FUZZY_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    ExactCandidate,
    ExactCatalog,
    FuzzyCandidate,
    FuzzyCatalog,
    None,
}

impl MatchKind {
    pub fn is_candidate(self) -> bool {
        matches!(self, MatchKind::ExactCandidate | MatchKind::FuzzyCandidate)
    }
}

static NUMBERING: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(?:[-*•]\s*|\d{1,3}\s*[.)]\s+)").unwrap());
static ANSWER_LABEL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*(?:final\s+)?(?:answer|recommendation|movie)\s*:\s*").unwrap());

/// Last non-empty line of a model output with list markers, answer labels,
/// emphasis and quotes removed.
pub fn parse_output(raw: &str) -> String {
    let line = raw.lines().rev().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let mut text = ANSWER_LABEL.replace(line, "").into_owned();
    text = NUMBERING.replace(&text, "").into_owned();
    let mut text = text.as_str();
    loop {
        let next = text
            .trim()
            .trim_end_matches('.')
            .trim_matches(|c| matches!(c, '*' | '_' | '"' | '\'' | '“' | '”' | '`'));
        if next == text {
            return text.to_string();
        }
        text = next;
    }
}

fn similarity(text: &str, item: &Item) -> f64 {
    let plain = normalized_levenshtein(&normalize_title(text), &normalize_title(&item.title));
    let dated = normalized_levenshtein(&normalize_title_with_year(text), &normalize_title_with_year(&item.display_title()));
    plain.max(dated)
}

fn exact<'a>(text: &str, pool: impl Iterator<Item = &'a Item>) -> Option<&'a Item> {
    let key = normalize_title(text);
    let dated = normalize_title_with_year(text);
    let mut hits: Vec<&Item> = pool.filter(|item| normalize_title(&item.title) == key).collect();
    if hits.len() > 1 {
        let narrowed: Vec<&Item> = hits
            .iter()
            .copied()
            .filter(|item| normalize_title_with_year(&item.display_title()) == dated)
            .collect();
        if !narrowed.is_empty() {
            hits = narrowed;
        }
    }
    hits.into_iter().min_by(|a, b| a.item_id.cmp(&b.item_id))
}

fn fuzzy<'a>(text: &str, pool: impl Iterator<Item = &'a Item>) -> Option<&'a Item> {
    pool.map(|item| (similarity(text, item), item))
        .filter(|(sim, _)| *sim >= FUZZY_THRESHOLD)
        .max_by(|(sa, a), (sb, b)| sa.total_cmp(sb).then_with(|| b.item_id.cmp(&a.item_id)))
        .map(|(_, item)| item)
}

fn cascade(text: &str, candidates: &[&Item], catalog: &ItemCatalog) -> Option<(String, MatchKind)> {
    if let Some(item) = exact(text, candidates.iter().copied()) {
        return Some((item.item_id.clone(), MatchKind::ExactCandidate));
    }
    if let Some(item) = catalog.find_by_title(text).into_iter().min_by(|a, b| a.item_id.cmp(&b.item_id)) {
        return Some((item.item_id.clone(), MatchKind::ExactCatalog));
    }
    if let Some(item) = fuzzy(text, candidates.iter().copied()) {
        return Some((item.item_id.clone(), MatchKind::FuzzyCandidate));
    }
    fuzzy(text, catalog.items().iter()).map(|item| (item.item_id.clone(), MatchKind::FuzzyCatalog))
}

/// Matches `text` against the candidate list, then the whole catalog:
/// exact normalized title in candidates, exact in catalog, fuzzy in
/// candidates, fuzzy in catalog. Ties go to the higher similarity, then the
/// smaller item id.
///
/// An output echoing a whole candidate line (`"Title (Year): abstract"`)
/// that matches nothing is retried with the part before the first `": "`.
pub fn match_output_to_item(text: &str, candidate_ids: &[String], catalog: &ItemCatalog) -> (Option<String>, MatchKind) {
    if normalize_title(text).is_empty() {
        return (None, MatchKind::None);
    }
    let candidates: Vec<&Item> = candidate_ids.iter().filter_map(|id| catalog.get(id)).collect();
    let attempt = cascade(text, &candidates, catalog).or_else(|| {
        text.split_once(": ")
            .and_then(|(head, _)| cascade(head, &candidates, catalog))
    });
    match attempt {
        Some((id, kind)) => (Some(id), kind),
        None => (None, MatchKind::None),
    }
}
