//! Recommendation, retrieval and text-overlap metrics, similarity
//! distributions and the forced-inclusion candidate-count study.

mod distribution;
mod report;
mod text;

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ItemCatalog, RecInstance};
use crate::embed::{EmbedError, Embedder};
use crate::index::{IndexError, RankedList, VectorIndex};
use crate::item_generator::{self, instance_rng, GenError, Recommendation, STREAM_FORCED_INSERTION};
use crate::llm::{ChatClient, TokenBudget};
use crate::query_expert::ReformulatedQuery;

pub use distribution::{
    distribution_divergence, energy_distance, histogram_bin, mean_cross_cosine, similarity_distribution,
    similarity_samples, DistributionSummary, HISTOGRAM_BINS,
};
pub use report::{EvalReport, EvalRow, Metric, SUMMARY_KEY};
pub use text::{bleu_n, bleu_tokens, rouge, rouge_tokens, tokenize, RougeVariant};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no recommendation for instance {0}")]
    MissingRecommendation(String),
    #[error("no ranked list for instance {0}")]
    MissingRankedList(String),
    #[error("no query for instance {0}")]
    MissingQuery(String),
    #[error("instance {0} is not in the evaluated set")]
    UnknownInstance(String),
    #[error("instance {0} appears more than once")]
    DuplicateInstance(String),
    #[error("item `{0}` not in catalog")]
    UnknownItem(String),
    #[error("k must be >= 1")]
    ZeroK,
    #[error("empty sample")]
    EmptySample,
    #[error("paired samples differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("metric {metric}: reported {reported}, rows give {recomputed}")]
    Inconsistent { metric: String, reported: f64, recomputed: f64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Gen(#[from] GenError),
}

/// Keys `items` by instance id, rejecting duplicates and ids outside
/// `instances`.
fn by_instance<'a, T>(
    items: &'a [T],
    id: impl Fn(&T) -> &str,
    instances: &[RecInstance],
) -> Result<HashMap<&'a str, &'a T>, EvalError> {
    let known: HashMap<&str, ()> = instances.iter().map(|i| (i.instance_id.as_str(), ())).collect();
    let mut out = HashMap::with_capacity(items.len());
    for item in items {
        let key = id(item);
        if !known.contains_key(key) {
            return Err(EvalError::UnknownInstance(key.to_string()));
        }
        if out.insert(key, item).is_some() {
            return Err(EvalError::DuplicateInstance(key.to_string()));
        }
    }
    Ok(out)
}

fn is_hallucinated(rec: &Recommendation, catalog: &ItemCatalog) -> bool {
    match &rec.matched_item_id {
        Some(id) => rec.match_kind == item_generator::MatchKind::None || !catalog.contains(id),
        None => true,
    }
}

/// Per-instance `success` and `hallucinated` rows for a set of
/// recommendations. Every instance needs exactly one recommendation.
pub fn recommendation_report(
    recs: &[Recommendation],
    instances: &[RecInstance],
    catalog: &ItemCatalog,
) -> Result<EvalReport, EvalError> {
    let keyed = by_instance(recs, |r| &r.instance_id, instances)?;
    let mut rows = Vec::with_capacity(instances.len());
    for instance in instances {
        let rec = keyed
            .get(instance.instance_id.as_str())
            .ok_or_else(|| EvalError::MissingRecommendation(instance.instance_id.clone()))?;
        rows.push(
            EvalRow::new(&instance.instance_id)
                .with("truth_item_id", instance.truth_item_id.clone())
                .with("matched_item_id", rec.matched_item_id.clone())
                .with("match_kind", serde_json::to_value(rec.match_kind).expect("enum serializes"))
                .with("success", item_generator::is_success(rec, &instance.truth_item_id))
                .with("hallucinated", is_hallucinated(rec, catalog)),
        );
    }
    Ok(EvalReport::from_rows(rows, &["success", "hallucinated"]))
}

/// Fraction of instances whose recommendation is the ground truth picked
/// from the candidate list.
pub fn rec_success_rate(recs: &[Recommendation], instances: &[RecInstance]) -> Result<f64, EvalError> {
    let keyed = by_instance(recs, |r| &r.instance_id, instances)?;
    if instances.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for instance in instances {
        let rec = keyed
            .get(instance.instance_id.as_str())
            .ok_or_else(|| EvalError::MissingRecommendation(instance.instance_id.clone()))?;
        hits += usize::from(item_generator::is_success(rec, &instance.truth_item_id));
    }
    Ok(hits as f64 / instances.len() as f64)
}

/// Fraction of recommendations that resolve to no catalog item.
pub fn hallucination_ratio(recs: &[Recommendation], catalog: &ItemCatalog) -> f64 {
    if recs.is_empty() {
        return 0.0;
    }
    recs.iter().filter(|r| is_hallucinated(r, catalog)).count() as f64 / recs.len() as f64
}

/// Metric name for recall at `k`.
pub fn recall_field(k: usize) -> String {
    format!("recall@{k}")
}

/// One row per instance with a `recall@k` flag for every `k` in `ks`.
/// Lists are matched to instances through `query_id`; `k` beyond a list's
/// length uses the whole list.
pub fn recall_report(lists: &[RankedList], instances: &[RecInstance], ks: &[usize]) -> Result<EvalReport, EvalError> {
    if ks.contains(&0) {
        return Err(EvalError::ZeroK);
    }
    let keyed = by_instance(lists, |l| &l.query_id, instances)?;
    let mut rows = Vec::with_capacity(instances.len());
    for instance in instances {
        let list = keyed
            .get(instance.instance_id.as_str())
            .ok_or_else(|| EvalError::MissingRankedList(instance.instance_id.clone()))?;
        let rank = list.position(&instance.truth_item_id);
        let mut row = EvalRow::new(&instance.instance_id).with("truth_rank", rank.map(|r| r + 1));
        for &k in ks {
            row = row.with(&recall_field(k), rank.is_some_and(|r| r < k));
        }
        rows.push(row);
    }
    let fields: Vec<String> = ks.iter().map(|&k| recall_field(k)).collect();
    let names: Vec<&str> = fields.iter().map(String::as_str).collect();
    Ok(EvalReport::from_rows(rows, &names))
}

pub fn recall_at_k(lists: &[RankedList], instances: &[RecInstance], k: usize) -> Result<f64, EvalError> {
    let report = recall_report(lists, instances, &[k])?;
    Ok(report.metric(&recall_field(k)).unwrap_or(0.0))
}

/// Human-written reference query for one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedQuery {
    #[serde(deserialize_with = "crate::jsonl::id_string")]
    pub instance_id: String,
    pub annotated_query: String,
}

pub const TEXT_METRICS: [&str; 6] = ["bleu1", "bleu2", "bleu3", "rouge1", "rouge2", "rougel"];

/// BLEU-1..3 and ROUGE-1/2/L of each generated query against its
/// annotation. Only annotated instances are scored.
pub fn text_overlap_report(queries: &[ReformulatedQuery], annotations: &[AnnotatedQuery]) -> Result<EvalReport, EvalError> {
    let mut by_id: BTreeMap<&str, &ReformulatedQuery> = BTreeMap::new();
    for q in queries {
        if by_id.insert(&q.instance_id, q).is_some() {
            return Err(EvalError::DuplicateInstance(q.instance_id.clone()));
        }
    }
    let mut rows = Vec::with_capacity(annotations.len());
    let mut seen = BTreeMap::new();
    for a in annotations {
        if seen.insert(a.instance_id.as_str(), ()).is_some() {
            return Err(EvalError::DuplicateInstance(a.instance_id.clone()));
        }
        let q = by_id
            .get(a.instance_id.as_str())
            .ok_or_else(|| EvalError::MissingQuery(a.instance_id.clone()))?;
        let cand = tokenize(&q.query_text);
        let reference = tokenize(&a.annotated_query);
        let refs = [reference.clone()];
        let mut row = EvalRow::new(&a.instance_id);
        for n in 1..=3 {
            row = row.with(&format!("bleu{n}"), bleu_tokens(&cand, &refs, n));
        }
        for v in RougeVariant::ALL {
            row = row.with(v.name(), rouge_tokens(&cand, &reference, v));
        }
        rows.push(row);
    }
    Ok(EvalReport::from_rows(rows, &TEXT_METRICS))
}

/// Everything needed to turn a candidate list into a recommendation.
pub struct Generator<'a> {
    pub client: &'a dyn ChatClient,
    pub catalog: &'a ItemCatalog,
    pub cot: bool,
    pub budget: &'a TokenBudget,
}

/// Embeds each query and retrieves its top `k`; lists carry the query's
/// instance id and follow query order.
pub fn retrieve_for_queries(
    index: &VectorIndex,
    embedder: &Embedder,
    queries: &[ReformulatedQuery],
    k: usize,
) -> Result<Vec<RankedList>, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let texts: Vec<&str> = queries.iter().map(|q| q.query_text.as_str()).collect();
    let vectors = if texts.is_empty() { Vec::new() } else { embedder.embed(&texts)? };
    let keyed: Vec<_> = queries.iter().map(|q| q.instance_id.clone()).zip(vectors).collect();
    Ok(index.retrieve_many(&keyed, k)?)
}

/// Candidate ids of size `min(k, len + 1)` that contain `truth` exactly
/// once. A list already holding the truth is cut to `k` and left in rank
/// order; otherwise the lowest-ranked hit beyond `k - 1` is dropped and the
/// truth inserted at a seeded position. Returns the list and the truth's
/// position when it had to be inserted.
pub fn forced_list(ranked: &RankedList, truth: &str, k: usize, seed: u64) -> (Vec<String>, Option<usize>) {
    let mut ids: Vec<String> = ranked.item_ids().take(k).map(str::to_string).collect();
    if ids.iter().any(|id| id == truth) {
        return (ids, None);
    }
    ids.truncate(k.saturating_sub(1));
    let mut rng = instance_rng(seed, STREAM_FORCED_INSERTION, &ranked.query_id);
    let position = rng.random_range(0..=ids.len());
    ids.insert(position, truth.to_string());
    (ids, Some(position))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForcedInclusion {
    pub k: usize,
    /// Success over the unmodified retrieval lists.
    pub overall_rate: f64,
    /// Success over lists with the truth forced in.
    pub item_generation_rate: f64,
    /// Retrieval coverage, i.e. recall at `k`.
    pub recall: f64,
    pub report: EvalReport,
}

/// Runs the generator over retrieval lists of size `k` and over the same
/// lists with the truth forced in. Instances whose list already holds the
/// truth share one generator call; the others cannot succeed on the
/// unmodified list, so only the forced list is sent.
pub fn forced_inclusion_eval(
    instances: &[RecInstance],
    lists: &[RankedList],
    generator: &Generator<'_>,
    k: usize,
    seed: u64,
) -> Result<ForcedInclusion, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let keyed = by_instance(lists, |l| &l.query_id, instances)?;
    let rows = instances
        .par_iter()
        .map(|instance| {
            let ranked = keyed
                .get(instance.instance_id.as_str())
                .ok_or_else(|| EvalError::MissingRankedList(instance.instance_id.clone()))?;
            let (ids, inserted_at) = forced_list(ranked, &instance.truth_item_id, k, seed);
            let rec = item_generator::recommend_from(
                generator.client,
                instance,
                &ids,
                generator.catalog,
                generator.cot,
                generator.budget,
            )?;
            let forced_success = item_generator::is_success(&rec, &instance.truth_item_id);
            let hit = inserted_at.is_none();
            Ok(EvalRow::new(&instance.instance_id)
                .with("retrieval_hit", hit)
                .with("overall_success", hit && forced_success)
                .with("item_generation_success", forced_success)
                .with("inserted_at", inserted_at)
                .with("matched_item_id", rec.matched_item_id))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let report = EvalReport::from_rows(rows, &["retrieval_hit", "overall_success", "item_generation_success"]);
    report.verify()?;
    Ok(ForcedInclusion {
        k,
        overall_rate: report.metric("overall_success").unwrap_or(0.0),
        item_generation_rate: report.metric("item_generation_success").unwrap_or(0.0),
        recall: report.metric("retrieval_hit").unwrap_or(0.0),
        report,
    })
}

/// Exact two-sided sign test over paired binary outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub a_wins: usize,
    pub b_wins: usize,
    pub ties: usize,
    pub p_value: f64,
}

pub fn sign_test(a: &[bool], b: &[bool]) -> Result<SignTest, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch { left: a.len(), right: b.len() });
    }
    let a_wins = a.iter().zip(b).filter(|(x, y)| **x && !**y).count();
    let b_wins = a.iter().zip(b).filter(|(x, y)| !**x && **y).count();
    let n = a_wins + b_wins;
    let tail = a_wins.min(b_wins);
    // P(X <= tail) for X ~ Bin(n, 1/2), summed in log space
    let mut log_pmf = n as f64 * 0.5f64.ln();
    let mut cdf = 0.0;
    for i in 0..=tail {
        cdf += log_pmf.exp();
        log_pmf += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
    }
    Ok(SignTest {
        a_wins,
        b_wins,
        ties: a.len() - n,
        p_value: (2.0 * cdf).min(1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Item, Speaker, Split, Turn};
    use crate::index::Hit;
    use crate::item_generator::MatchKind;
    use crate::llm::FnChatClient;
    use proptest::prelude::*;

    fn instance(id: &str, truth: &str) -> RecInstance {
        RecInstance {
            instance_id: id.into(),
            history: vec![Turn { speaker: Speaker::Seeker, text: format!("something like {truth}"), turn_index: 0 }],
            truth_item_id: truth.into(),
            split: Split::Test,
        }
    }

    fn rec(id: &str, matched: Option<&str>, kind: MatchKind) -> Recommendation {
        Recommendation {
            instance_id: id.into(),
            raw_output: String::new(),
            matched_item_id: matched.map(String::from),
            match_kind: kind,
        }
    }

    fn ranked(id: &str, items: &[&str]) -> RankedList {
        RankedList {
            query_id: id.into(),
            hits: items.iter().map(|i| Hit { item_id: i.to_string(), score: 0.5 }).collect(),
        }
    }

    fn catalog(n: usize) -> ItemCatalog {
        ItemCatalog::from_items(
            (0..n)
                .map(|i| Item {
                    item_id: format!("i{i:02}"),
                    title: format!("Film Number {i:02}"),
                    year: Some(1990 + i as i32),
                    abstract_text: format!("Plot {i}."),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn success_rate_counts() {
        let instances = [instance("a", "x"), instance("b", "y")];
        let recs = [rec("a", Some("x"), MatchKind::ExactCandidate), rec("b", Some("x"), MatchKind::ExactCandidate)];
        assert_eq!(rec_success_rate(&recs, &instances).unwrap(), 0.5);
        let none = [rec("a", None, MatchKind::None), rec("b", None, MatchKind::None)];
        assert_eq!(rec_success_rate(&none, &instances).unwrap(), 0.0);
        // a catalog-level match of the truth does not count
        let outside = [rec("a", Some("x"), MatchKind::ExactCatalog), rec("b", Some("y"), MatchKind::FuzzyCandidate)];
        assert_eq!(rec_success_rate(&outside, &instances).unwrap(), 0.5);
    }

    #[test]
    fn success_rate_rejects_misaligned() {
        let instances = [instance("a", "x")];
        assert!(matches!(
            rec_success_rate(&[rec("z", None, MatchKind::None)], &instances),
            Err(EvalError::UnknownInstance(_))
        ));
        assert!(matches!(rec_success_rate(&[], &instances), Err(EvalError::MissingRecommendation(_))));
    }

    #[test]
    fn hallucination_counts() {
        let cat = catalog(3);
        let recs = [
            rec("a", Some("i00"), MatchKind::ExactCandidate),
            rec("b", None, MatchKind::None),
            rec("c", Some("i01"), MatchKind::FuzzyCatalog),
            rec("d", Some("i02"), MatchKind::ExactCandidate),
        ];
        assert_eq!(hallucination_ratio(&recs, &cat), 0.25);
        assert_eq!(hallucination_ratio(&recs[..1], &cat), 0.0);
        let instances: Vec<_> = ["a", "b", "c", "d"].iter().map(|i| instance(i, "i00")).collect();
        let report = recommendation_report(&recs, &instances, &cat).unwrap();
        assert_eq!(report.metric("hallucinated"), Some(0.25));
        assert_eq!(report.metric("success"), Some(0.25));
        report.verify().unwrap();
    }

    #[test]
    fn recall_examples() {
        let instances: Vec<_> = ["a", "b", "c", "d"].iter().map(|i| instance(i, "t")).collect();
        let lists = [
            ranked("a", &["t", "u"]),
            ranked("b", &["t", "u"]),
            ranked("c", &["t"]),
            ranked("d", &["u", "t"]),
        ];
        assert_eq!(recall_at_k(&lists, &instances, 1).unwrap(), 0.75);
        assert_eq!(recall_at_k(&lists, &instances, 100).unwrap(), 1.0);
        assert!(matches!(recall_at_k(&lists[..3], &instances, 1), Err(EvalError::MissingRankedList(_))));
        assert!(matches!(recall_at_k(&lists, &instances, 0), Err(EvalError::ZeroK)));
    }

    #[test]
    fn text_overlap_rows() {
        let queries = [ReformulatedQuery {
            instance_id: "a".into(),
            mode: crate::query_expert::QueryMode::TrainedQr,
            query_text: "the cat".into(),
        }];
        let ann = [AnnotatedQuery { instance_id: "a".into(), annotated_query: "the cat sat".into() }];
        let report = text_overlap_report(&queries, &ann).unwrap();
        assert!((report.metric("rouge1").unwrap() - 0.8).abs() < 1e-12);
        let missing = [AnnotatedQuery { instance_id: "b".into(), annotated_query: "x".into() }];
        assert!(matches!(text_overlap_report(&queries, &missing), Err(EvalError::MissingQuery(_))));
    }

    #[test]
    fn forced_list_inserts_truth_once() {
        let list = ranked("q1", &["a", "b", "c", "d"]);
        let (ids, at) = forced_list(&list, "t", 3, 7);
        assert_eq!(ids.len(), 3);
        assert_eq!(ids.iter().filter(|i| *i == "t").count(), 1);
        assert!(!ids.contains(&"c".to_string()));
        assert_eq!(ids[at.unwrap()], "t");
        assert_eq!(forced_list(&list, "t", 3, 7), (ids, at));
        assert_eq!(forced_list(&list, "b", 3, 7), (vec!["a".into(), "b".into(), "c".into()], None));
    }

    #[test]
    fn forced_inclusion_with_oracle_generator() {
        let cat = catalog(12);
        // the generator names the truth, recovered from the history
        let client = FnChatClient::new(|p: &crate::llm::ChatPrompt| {
            let text = p.user_text();
            let id = text.split("something like i").nth(1).unwrap_or("").get(..2).unwrap_or("").to_string();
            Ok(format!("Film Number {id}"))
        });
        let budget = TokenBudget::default();
        let generator = Generator { client: &client, catalog: &cat, cot: false, budget: &budget };
        let instances = [instance("a", "i03"), instance("b", "i07")];
        let lists = [ranked("a", &["i03", "i01", "i02"]), ranked("b", &["i01", "i02", "i04"])];
        let result = forced_inclusion_eval(&instances, &lists, &generator, 3, 1).unwrap();
        assert_eq!(result.item_generation_rate, 1.0);
        assert_eq!(result.overall_rate, 0.5);
        assert_eq!(result.recall, 0.5);
    }

    #[test]
    fn sign_test_values() {
        let t = sign_test(&[true; 6], &[false; 6]).unwrap();
        assert_eq!((t.a_wins, t.b_wins, t.ties), (6, 0, 0));
        assert!((t.p_value - 2.0 / 64.0).abs() < 1e-12);
        let even = sign_test(&[true, false, true], &[false, true, true]).unwrap();
        assert_eq!(even.p_value, 1.0);
        assert_eq!(even.ties, 1);
        assert!(sign_test(&[true], &[]).is_err());
    }

    proptest! {
        #[test]
        fn recall_is_monotone_in_k(
            truth_ranks in prop::collection::vec(prop::option::of(0usize..20), 1..30),
            k in 1usize..20,
        ) {
            let mut instances = Vec::new();
            let mut lists = Vec::new();
            for (n, rank) in truth_ranks.iter().enumerate() {
                let id = format!("q{n}");
                let mut items: Vec<String> = (0..20).map(|i| format!("x{i}")).collect();
                if let Some(r) = rank {
                    items[*r] = "t".into();
                }
                let refs: Vec<&str> = items.iter().map(String::as_str).collect();
                lists.push(ranked(&id, &refs));
                instances.push(instance(&id, "t"));
            }
            let lo = recall_at_k(&lists, &instances, k).unwrap();
            let hi = recall_at_k(&lists, &instances, k + 1).unwrap();
            prop_assert!(lo <= hi);
        }

        #[test]
        fn hallucination_and_resolvable_sum_to_one(kinds in prop::collection::vec(0u8..5, 1..40)) {
            let cat = catalog(3);
            let recs: Vec<_> = kinds
                .iter()
                .enumerate()
                .map(|(i, k)| match k {
                    0 => rec(&i.to_string(), None, MatchKind::None),
                    1 => rec(&i.to_string(), Some("i00"), MatchKind::ExactCandidate),
                    2 => rec(&i.to_string(), Some("i01"), MatchKind::FuzzyCatalog),
                    3 => rec(&i.to_string(), Some("i02"), MatchKind::ExactCatalog),
                    _ => rec(&i.to_string(), Some("i01"), MatchKind::FuzzyCandidate),
                })
                .collect();
            let resolvable = recs.iter().filter(|r| r.matched_item_id.is_some()).count() as f64 / recs.len() as f64;
            prop_assert_eq!(hallucination_ratio(&recs, &cat) + resolvable, 1.0);
        }

        #[test]
        fn forced_list_shape(n in 0usize..30, k in 1usize..20, truth_at in prop::option::of(0usize..30), seed in any::<u64>()) {
            let mut items: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
            if let Some(at) = truth_at.filter(|a| *a < n) {
                items[at] = "t".into();
            }
            let refs: Vec<&str> = items.iter().map(String::as_str).collect();
            let (ids, _) = forced_list(&ranked("q", &refs), "t", k, seed);
            prop_assert_eq!(ids.iter().filter(|i| *i == "t").count(), 1);
            let present = truth_at.is_some_and(|a| a < n.min(k));
            let expected = if present { n.min(k) } else { n.min(k - 1) + 1 };
            prop_assert_eq!(ids.len(), expected);
        }
    }
}
