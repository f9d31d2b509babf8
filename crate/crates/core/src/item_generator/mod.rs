//! Candidate-grounded item generation: hard-negative candidate sets,
//! training records for the generator, and inference-time recommendation.

mod matching;

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{render_turns, Item, ItemCatalog, RecInstance, Turn};
use crate::embed::{EmbedError, Embedder, EmbeddingVector};
use crate::index::{IndexError, RankedList, VectorIndex};
use crate::llm::{
    self, fit_oldest_first, ChatClient, ChatPrompt, LlmError, TokenBudget, MAX_TOKENS_COT, MAX_TOKENS_ITEM,
};
use crate::prompts;
use crate::query_expert::ReformulatedQuery;

pub use matching::{match_output_to_item, parse_output, MatchKind, FUZZY_THRESHOLD};

/// Negatives per training list; with the truth this gives 50-item lists,
/// the same size as the default inference top-k.
pub const DEFAULT_K_TRAIN: usize = 49;

/// Upper bound on tokens spent on one candidate line.
pub const CANDIDATE_TOKEN_CAP: usize = 400;

/// Seed streams, so independent random choices never share a sequence.
pub const STREAM_TRUTH_POSITION: &str = "truth-position";
pub const STREAM_RANDOM_NEGATIVES: &str = "random-negatives";
pub const STREAM_FORCED_INSERTION: &str = "forced-insertion";

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("k_train must be >= 1")]
    ZeroKTrain,
    #[error("catalog has {have} items, need at least {needed}")]
    CatalogTooSmall { needed: usize, have: usize },
    #[error("item `{0}` not in catalog")]
    UnknownItem(String),
    #[error("instance {0}: truth item missing from candidate set")]
    TruthNotInCandidates(String),
    #[error("instance {0}: no candidates")]
    NoCandidates(String),
    #[error("instance {0}: empty history")]
    EmptyHistory(String),
    #[error("instance {0}: empty rationale")]
    EmptyRationale(String),
    #[error("instance {instance_id}: {source}")]
    Client {
        instance_id: String,
        #[source]
        source: LlmError,
    },
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// RNG for one instance and one purpose, independent of processing order.
pub fn instance_rng(seed: u64, stream: &str, instance_id: &str) -> ChaCha8Rng {
    let mut hasher = FnvHasher::default();
    hasher.write(stream.as_bytes());
    hasher.write(&[0]);
    hasher.write(instance_id.as_bytes());
    ChaCha8Rng::seed_from_u64(seed ^ hasher.finish())
}

/// Items shown to the generator for one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub instance_id: String,
    pub members: Vec<String>,
    #[serde(default)]
    pub truth_position: Option<usize>,
}

impl CandidateSet {
    /// Inference-time set: the retrieved items in rank order.
    pub fn from_ranked(instance_id: &str, ranked: &RankedList, truth_item_id: Option<&str>) -> Self {
        let members: Vec<String> = ranked.item_ids().map(str::to_string).collect();
        let truth_position = truth_item_id.and_then(|t| members.iter().position(|m| m == t));
        Self {
            instance_id: instance_id.to_string(),
            members,
            truth_position,
        }
    }
}

/// Places `truth` among `negatives` at a uniformly drawn position.
fn with_truth(instance: &RecInstance, mut negatives: Vec<String>, seed: u64) -> CandidateSet {
    let mut rng = instance_rng(seed, STREAM_TRUTH_POSITION, &instance.instance_id);
    let position = rng.random_range(0..=negatives.len());
    negatives.insert(position, instance.truth_item_id.clone());
    CandidateSet {
        instance_id: instance.instance_id.clone(),
        members: negatives,
        truth_position: Some(position),
    }
}

/// Training candidate set from a ranked list: the first `k_train` hits that
/// are not the truth, with the truth inserted at a seeded position.
pub fn hard_negative_set(ranked: &RankedList, instance: &RecInstance, k_train: usize, seed: u64) -> CandidateSet {
    let negatives = ranked
        .item_ids()
        .filter(|id| *id != instance.truth_item_id)
        .take(k_train)
        .map(str::to_string)
        .collect();
    with_truth(instance, negatives, seed)
}

/// Retrieves the top `k_train + 1` items for the reformulated query and
/// keeps the best `k_train` that are not the ground truth.
pub fn mine_hard_negatives(
    index: &VectorIndex,
    embedder: &Embedder,
    query: &ReformulatedQuery,
    instance: &RecInstance,
    k_train: usize,
    seed: u64,
) -> Result<CandidateSet, GenError> {
    let vector = embedder.embed_one(&query.query_text)?;
    mine_with_vector(index, &vector, instance, k_train, seed)
}

/// [`mine_hard_negatives`] with the query already embedded.
pub fn mine_with_vector(
    index: &VectorIndex,
    query: &EmbeddingVector,
    instance: &RecInstance,
    k_train: usize,
    seed: u64,
) -> Result<CandidateSet, GenError> {
    if k_train == 0 {
        return Err(GenError::ZeroKTrain);
    }
    if index.len() < k_train + 1 {
        return Err(GenError::CatalogTooSmall {
            needed: k_train + 1,
            have: index.len(),
        });
    }
    let ranked = index.retrieve(&instance.instance_id, query, k_train + 1)?;
    Ok(hard_negative_set(&ranked, instance, k_train, seed))
}

/// Baseline training set: `k_train` negatives drawn uniformly from the
/// catalog without the ground truth.
pub fn random_negatives(
    catalog: &ItemCatalog,
    instance: &RecInstance,
    k_train: usize,
    seed: u64,
) -> Result<CandidateSet, GenError> {
    if k_train == 0 {
        return Err(GenError::ZeroKTrain);
    }
    let pool: Vec<&Item> = catalog
        .items()
        .iter()
        .filter(|item| item.item_id != instance.truth_item_id)
        .collect();
    if pool.len() < k_train {
        return Err(GenError::CatalogTooSmall {
            needed: k_train + 1,
            have: catalog.len(),
        });
    }
    let mut rng = instance_rng(seed, STREAM_RANDOM_NEGATIVES, &instance.instance_id);
    let negatives = sample(&mut rng, pool.len(), k_train)
        .into_iter()
        .map(|i| pool[i].item_id.clone())
        .collect();
    Ok(with_truth(instance, negatives, seed))
}

/// Longest prefix of `text` (on a char boundary) for which `fits` holds.
fn longest_fitting_prefix<'a>(text: &'a str, fits: impl Fn(&str) -> bool) -> &'a str {
    let bounds: Vec<usize> = text.char_indices().map(|(i, _)| i).chain([text.len()]).collect();
    let (mut lo, mut hi) = (0usize, bounds.len() - 1);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if fits(&text[..bounds[mid]]) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    &text[..bounds[lo]]
}

/// `"N. TITLE (YEAR): ABSTRACT"`, abstract cut so the line stays within
/// `cap` tokens. The title is always kept.
fn candidate_line(rank: usize, item: &Item, cap: usize, budget: &TokenBudget) -> String {
    let head = format!("{rank}. {}", item.display_title());
    let abstract_text = item.abstract_text.trim();
    if abstract_text.is_empty() {
        return head;
    }
    let full = format!("{head}: {abstract_text}");
    if budget.count(&full) <= cap {
        return full;
    }
    let cut = longest_fitting_prefix(abstract_text, |prefix| budget.count(&format!("{head}: {prefix}")) <= cap);
    let cut = cut.trim_end();
    if cut.is_empty() {
        head
    } else {
        format!("{head}: {cut}")
    }
}

/// Item-generation prompt text for `history` and `items` (in display
/// order).
///
/// The history gets at most a quarter of the budget, oldest turns dropped
/// first; the remainder is shared evenly by the candidate lines, each
/// capped at [`CANDIDATE_TOKEN_CAP`].
pub fn build_generation_prompt(
    instance_id: &str,
    history: &[Turn],
    items: &[&Item],
    cot: bool,
    budget: &TokenBudget,
) -> Result<String, GenError> {
    if history.is_empty() {
        return Err(GenError::EmptyHistory(instance_id.to_string()));
    }
    if items.is_empty() {
        return Err(GenError::NoCandidates(instance_id.to_string()));
    }
    let template = prompts::item_generation_template(cot);
    let client_err = |source| GenError::Client {
        instance_id: instance_id.to_string(),
        source,
    };
    let (history_text, _) =
        fit_oldest_first(history, &budget.with_limit(budget.limit() / 4), render_turns).map_err(client_err)?;
    let render = |lines: &[String]| {
        let joined = lines.join("\n");
        prompts::fill(&template, &[(prompts::CANDIDATES, &joined), (prompts::HISTORY, &history_text)])
    };

    let fixed = budget.count(&render(&[]));
    let mut share = (budget.limit().saturating_sub(fixed) / items.len()).min(CANDIDATE_TOKEN_CAP);
    loop {
        let lines: Vec<String> = items
            .iter()
            .enumerate()
            .map(|(i, item)| candidate_line(i + 1, item, share.saturating_sub(1), budget))
            .collect();
        let text = render(&lines);
        let tokens = budget.count(&text);
        if tokens <= budget.limit() || share == 0 {
            if tokens > budget.limit() {
                return Err(client_err(LlmError::OverBudget {
                    tokens,
                    limit: budget.limit(),
                }));
            }
            return Ok(text);
        }
        share -= 1;
    }
}

/// One supervised example for the generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GTrainingRecord {
    pub instance_id: String,
    pub prompt: String,
    pub completion: String,
    pub label_item_id: String,
    pub candidate_ids: Vec<String>,
}

fn resolve_items<'a>(catalog: &'a ItemCatalog, ids: &[String]) -> Result<Vec<&'a Item>, GenError> {
    ids.iter()
        .map(|id| catalog.get(id).ok_or_else(|| GenError::UnknownItem(id.clone())))
        .collect()
}

/// Training record: the generation prompt over the candidate set and, as
/// target, the truth's catalog title, preceded by `rationale` and a newline
/// in the chain-of-thought variant.
pub fn build_g_training_record(
    instance: &RecInstance,
    candidates: &CandidateSet,
    catalog: &ItemCatalog,
    rationale: Option<&str>,
    budget: &TokenBudget,
) -> Result<GTrainingRecord, GenError> {
    if !candidates.members.contains(&instance.truth_item_id) {
        return Err(GenError::TruthNotInCandidates(instance.instance_id.clone()));
    }
    let items = resolve_items(catalog, &candidates.members)?;
    let truth = catalog
        .get(&instance.truth_item_id)
        .ok_or_else(|| GenError::UnknownItem(instance.truth_item_id.clone()))?;
    let prompt = build_generation_prompt(&instance.instance_id, &instance.history, &items, rationale.is_some(), budget)?;
    let completion = match rationale {
        Some(r) => format!("{}\n{}", r.trim(), truth.title),
        None => truth.title.clone(),
    };
    Ok(GTrainingRecord {
        instance_id: instance.instance_id.clone(),
        prompt,
        completion,
        label_item_id: instance.truth_item_id.clone(),
        candidate_ids: candidates.members.clone(),
    })
}

/// The prompt asking for a preference summary of `instance`.
pub fn cot_rationale_prompt(instance: &RecInstance, budget: &TokenBudget) -> Result<ChatPrompt, GenError> {
    if instance.history.is_empty() {
        return Err(GenError::EmptyHistory(instance.instance_id.clone()));
    }
    let (text, _) = fit_oldest_first(&instance.history, budget, |turns| {
        prompts::fill(prompts::COT_RATIONALE, &[(prompts::HISTORY, &render_turns(turns))])
    })
    .map_err(|source| GenError::Client {
        instance_id: instance.instance_id.clone(),
        source,
    })?;
    Ok(ChatPrompt::user(text, MAX_TOKENS_COT))
}

/// Preference summary used as the chain-of-thought prefix.
pub fn build_cot_rationale(
    client: &dyn ChatClient,
    instance: &RecInstance,
    budget: &TokenBudget,
) -> Result<String, GenError> {
    let prompt = cot_rationale_prompt(instance, budget)?;
    let response = llm::chat(client, &prompt, budget).map_err(|source| GenError::Client {
        instance_id: instance.instance_id.clone(),
        source,
    })?;
    let rationale = response
        .content
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("\n");
    if rationale.is_empty() {
        return Err(GenError::EmptyRationale(instance.instance_id.clone()));
    }
    Ok(rationale)
}

/// Generator output for one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recommendation {
    pub instance_id: String,
    pub raw_output: String,
    pub matched_item_id: Option<String>,
    pub match_kind: MatchKind,
}

/// A recommendation hits when it resolves to the truth through the
/// candidate list.
pub fn is_success(rec: &Recommendation, truth_item_id: &str) -> bool {
    rec.match_kind.is_candidate() && rec.matched_item_id.as_deref() == Some(truth_item_id)
}

/// The prompt [`recommend_from`] sends for these candidates.
pub fn inference_prompt(
    instance: &RecInstance,
    candidate_ids: &[String],
    catalog: &ItemCatalog,
    cot: bool,
    budget: &TokenBudget,
) -> Result<String, GenError> {
    let items = resolve_items(catalog, candidate_ids)?;
    build_generation_prompt(&instance.instance_id, &instance.history, &items, cot, budget)
}

/// Asks the generator to choose among `candidate_ids` (in the given order)
/// and resolves its answer.
pub fn recommend_from(
    client: &dyn ChatClient,
    instance: &RecInstance,
    candidate_ids: &[String],
    catalog: &ItemCatalog,
    cot: bool,
    budget: &TokenBudget,
) -> Result<Recommendation, GenError> {
    let text = inference_prompt(instance, candidate_ids, catalog, cot, budget)?;
    let max_tokens = if cot { MAX_TOKENS_COT } else { MAX_TOKENS_ITEM };
    let response = llm::chat(client, &ChatPrompt::user(text, max_tokens), budget).map_err(|source| {
        GenError::Client {
            instance_id: instance.instance_id.clone(),
            source,
        }
    })?;
    let answer = parse_output(&response.content);
    let (matched_item_id, match_kind) = match_output_to_item(&answer, candidate_ids, catalog);
    Ok(Recommendation {
        instance_id: instance.instance_id.clone(),
        raw_output: response.content,
        matched_item_id,
        match_kind,
    })
}

/// Recommendation over a retrieved list, candidates in rank order.
pub fn recommend(
    client: &dyn ChatClient,
    instance: &RecInstance,
    ranked: &RankedList,
    catalog: &ItemCatalog,
    cot: bool,
    budget: &TokenBudget,
) -> Result<Recommendation, GenError> {
    if ranked.hits.is_empty() {
        return Err(GenError::NoCandidates(instance.instance_id.clone()));
    }
    let ids: Vec<String> = ranked.item_ids().map(str::to_string).collect();
    recommend_from(client, instance, &ids, catalog, cot, budget)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Speaker, Split};
    use crate::index::Hit;
    use crate::llm::{MissPolicy, MockChatClient, MockScript};

    fn item(id: &str, title: &str, abstract_text: &str) -> Item {
        Item {
            item_id: id.into(),
            title: title.into(),
            year: None,
            abstract_text: abstract_text.into(),
        }
    }

    fn catalog() -> ItemCatalog {
        ItemCatalog::from_items(vec![
            item("heat", "Heat (1995)", "A detective hunts a crew of professional bank robbers in Los Angeles."),
            item("ronin", "Ronin (1998)", "Mercenaries chase a mysterious briefcase across France."),
            item("thief", "Thief (1981)", "A safecracker takes one last job."),
            item("alien", "Alien (1979)", "The crew of a space tug meets a deadly creature."),
            item("up", "Up (2009)", ""),
        ])
        .unwrap()
    }

    fn instance() -> RecInstance {
        RecInstance {
            instance_id: "d1:3:heat".into(),
            history: vec![
                Turn { speaker: Speaker::Seeker, text: "I want a tense heist film".into(), turn_index: 0 },
                Turn { speaker: Speaker::Recommender, text: "Any actors you like?".into(), turn_index: 1 },
                Turn { speaker: Speaker::Seeker, text: "Robert De Niro".into(), turn_index: 2 },
            ],
            truth_item_id: "heat".into(),
            split: Split::Train,
        }
    }

    fn ranked(ids: &[&str]) -> RankedList {
        RankedList {
            query_id: "q".into(),
            hits: ids
                .iter()
                .enumerate()
                .map(|(i, id)| Hit { item_id: id.to_string(), score: 1.0 - i as f64 * 0.1 })
                .collect(),
        }
    }

    #[test]
    fn truth_ranked_first_is_skipped() {
        let set = hard_negative_set(&ranked(&["heat", "ronin", "thief", "alien"]), &instance(), 3, 7);
        let mut negatives = set.members.clone();
        negatives.retain(|m| m != "heat");
        assert_eq!(negatives, ["ronin", "thief", "alien"]);
        assert_eq!(set.members.len(), 4);
        assert_eq!(set.members[set.truth_position.unwrap()], "heat");
    }

    #[test]
    fn truth_absent_takes_top_k() {
        let set = hard_negative_set(&ranked(&["ronin", "thief", "alien", "up"]), &instance(), 3, 7);
        let negatives: Vec<_> = set.members.iter().filter(|m| *m != "heat").cloned().collect();
        assert_eq!(negatives, ["ronin", "thief", "alien"]);
    }

    #[test]
    fn seeded_positions_repeat() {
        let a = hard_negative_set(&ranked(&["ronin", "thief", "alien"]), &instance(), 3, 11);
        let b = hard_negative_set(&ranked(&["ronin", "thief", "alien"]), &instance(), 3, 11);
        assert_eq!(a, b);
    }

    #[test]
    fn random_negatives_exclude_truth() {
        let set = random_negatives(&catalog(), &instance(), 4, 3).unwrap();
        assert_eq!(set.members.len(), 5);
        assert_eq!(set.members.iter().filter(|m| *m == "heat").count(), 1);
        assert!(matches!(random_negatives(&catalog(), &instance(), 5, 3), Err(GenError::CatalogTooSmall { .. })));
        assert!(matches!(random_negatives(&catalog(), &instance(), 0, 3), Err(GenError::ZeroKTrain)));
    }

    #[test]
    fn record_completion_forms() {
        let set = CandidateSet {
            instance_id: "d1:3:heat".into(),
            members: vec!["ronin".into(), "heat".into(), "thief".into()],
            truth_position: Some(1),
        };
        let budget = TokenBudget::default();
        let plain = build_g_training_record(&instance(), &set, &catalog(), None, &budget).unwrap();
        assert_eq!(plain.completion, "Heat (1995)");
        assert!(plain.prompt.contains(
            "A list of candidate abstracts: 1. Ronin (1998): Mercenaries chase a mysterious briefcase across France.\n2. Heat (1995): "
        ));
        assert!(plain.prompt.ends_with("The corresponding conversation history: Seeker: I want a tense heist film\nRecommender: Any actors you like?\nSeeker: Robert De Niro"));
        assert!(!plain.prompt.contains(prompts::COT_INSTRUCTION));

        let cot = build_g_training_record(&instance(), &set, &catalog(), Some("User likes heist films."), &budget).unwrap();
        assert_eq!(cot.completion, "User likes heist films.\nHeat (1995)");
        assert!(cot.prompt.contains("anything else. Think step by step."));
    }

    #[test]
    fn record_requires_truth_and_known_items() {
        let budget = TokenBudget::default();
        let missing = CandidateSet { instance_id: "x".into(), members: vec!["ronin".into()], truth_position: None };
        assert!(matches!(
            build_g_training_record(&instance(), &missing, &catalog(), None, &budget),
            Err(GenError::TruthNotInCandidates(_))
        ));
        let unknown = CandidateSet { instance_id: "x".into(), members: vec!["heat".into(), "nope".into()], truth_position: Some(0) };
        assert!(matches!(
            build_g_training_record(&instance(), &unknown, &catalog(), None, &budget),
            Err(GenError::UnknownItem(id)) if id == "nope"
        ));
    }

    #[test]
    fn long_abstracts_truncated_to_budget() {
        let long = "word ".repeat(3000);
        let items: Vec<Item> = (0..50).map(|i| item(&format!("m{i}"), &format!("Movie {i}"), &long)).collect();
        let refs: Vec<&Item> = items.iter().collect();
        let budget = TokenBudget::default();
        let text = build_generation_prompt("x", &instance().history, &refs, false, &budget).unwrap();
        assert!(budget.count(&text) <= 4096);
        for i in 0..50 {
            assert!(text.contains(&format!("{}. Movie {i}: word", i + 1)));
        }
    }

    #[test]
    fn rationale_from_mock() {
        let client = MockChatClient::new(MockScript::default().with_fallback("Likes heists.\nLikes De Niro."), MissPolicy::Fail);
        let r = build_cot_rationale(&client, &instance(), &TokenBudget::default()).unwrap();
        assert_eq!(r, "Likes heists.\nLikes De Niro.");
        let empty = MockChatClient::new(MockScript::default().with_fallback("  \n"), MissPolicy::Fail);
        let err = build_cot_rationale(&empty, &instance(), &TokenBudget::default()).unwrap_err();
        assert!(err.to_string().contains("empty rationale"));
    }

    #[test]
    fn recommend_matches_kinds() {
        let budget = TokenBudget::default();
        let list = ranked(&["ronin", "heat", "thief"]);
        let exact = MockChatClient::new(MockScript::default().with_fallback("Heat (1995)"), MissPolicy::Fail);
        let rec = recommend(&exact, &instance(), &list, &catalog(), false, &budget).unwrap();
        assert_eq!((rec.matched_item_id.as_deref(), rec.match_kind), (Some("heat"), MatchKind::ExactCandidate));
        assert!(is_success(&rec, "heat"));

        let outside = MockChatClient::new(MockScript::default().with_fallback("Alien"), MissPolicy::Fail);
        let rec = recommend(&outside, &instance(), &list, &catalog(), false, &budget).unwrap();
        assert_eq!(rec.match_kind, MatchKind::ExactCatalog);
        assert!(!is_success(&rec, "alien"));

        let fuzzy = MockChatClient::new(MockScript::default().with_fallback("Heat 1995"), MissPolicy::Fail);
        let rec = recommend(&fuzzy, &instance(), &list, &catalog(), false, &budget).unwrap();
        assert_eq!(rec.match_kind, MatchKind::FuzzyCandidate);

        let junk = MockChatClient::new(MockScript::default().with_fallback("Zzyzx Quest 9"), MissPolicy::Fail);
        let rec = recommend(&junk, &instance(), &list, &catalog(), false, &budget).unwrap();
        assert_eq!((rec.matched_item_id, rec.match_kind), (None, MatchKind::None));

        let empty = RankedList { query_id: "q".into(), hits: vec![] };
        assert!(matches!(recommend(&exact, &instance(), &empty, &catalog(), false, &budget), Err(GenError::NoCandidates(_))));
    }

    #[test]
    fn success_predicate() {
        let rec = |id: Option<&str>, kind| Recommendation {
            instance_id: "i".into(),
            raw_output: String::new(),
            matched_item_id: id.map(str::to_string),
            match_kind: kind,
        };
        assert!(is_success(&rec(Some("t"), MatchKind::ExactCandidate), "t"));
        assert!(is_success(&rec(Some("t"), MatchKind::FuzzyCandidate), "t"));
        assert!(!is_success(&rec(Some("t"), MatchKind::ExactCatalog), "t"));
        assert!(!is_success(&rec(Some("t"), MatchKind::FuzzyCatalog), "t"));
        assert!(!is_success(&rec(Some("u"), MatchKind::ExactCandidate), "t"));
        assert!(!is_success(&rec(None, MatchKind::None), "t"));
    }
}
