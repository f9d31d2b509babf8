//! BLEU and ROUGE over lowercase word tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Lowercased alphanumeric runs. Whitespace and punctuation both separate
/// tokens and are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for window in tokens.windows(n) {
        *counts.entry(window.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram matches and the candidate's n-gram total.
fn modified_precision<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let total = candidate.len().saturating_sub(n - 1);
    let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
    for reference in references {
        for (gram, count) in ngram_counts(reference, n) {
            let slot = max_ref.entry(gram).or_insert(0);
            *slot = (*slot).max(count);
        }
    }
    let clipped = cand
        .iter()
        .map(|(gram, count)| (*count).min(max_ref.get(gram).copied().unwrap_or(0)))
        .sum();
    (clipped, total)
}

/// Reference length closest to `c`, the shorter one on ties.
fn closest_ref_len<S>(c: usize, references: &[Vec<S>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Cumulative BLEU-n on token sequences: geometric mean of the modified
/// precisions for orders 1..=n times the brevity penalty. No smoothing, so
/// any order without a match scores 0.
///
/// Panics if `n == 0`.
pub fn bleu_tokens<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>], n: usize) -> f64 {
    assert!(n >= 1, "BLEU order must be >= 1");
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let (clipped, total) = modified_precision(candidate, references, order);
        if clipped == 0 || total == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let c = candidate.len();
    let r = closest_ref_len(c, references);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_sum / n as f64).exp()
}

/// [`bleu_tokens`] after [`tokenize`].
///
/// ```
/// let score = recgen::eval::bleu_n("the cat", &["the cat sat"], 1);
/// assert!((score - (-0.5f64).exp()).abs() < 1e-12);
/// ```
pub fn bleu_n(candidate: &str, references: &[&str], n: usize) -> f64 {
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    bleu_tokens(&tokenize(candidate), &refs, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RougeVariant {
    R1,
    R2,
    Rl,
}

impl RougeVariant {
    pub const ALL: [RougeVariant; 3] = [RougeVariant::R1, RougeVariant::R2, RougeVariant::Rl];

    pub fn name(self) -> &'static str {
        match self {
            RougeVariant::R1 => "rouge1",
            RougeVariant::R2 => "rouge2",
            RougeVariant::Rl => "rougel",
        }
    }
}

fn f1(overlap: usize, cand_total: usize, ref_total: usize) -> f64 {
    if overlap == 0 || cand_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand_total as f64;
    let r = overlap as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE F1 on token sequences.
pub fn rouge_tokens<S: AsRef<str>>(candidate: &[S], reference: &[S], variant: RougeVariant) -> f64 {
    match variant {
        RougeVariant::R1 | RougeVariant::R2 => {
            let n = if variant == RougeVariant::R1 { 1 } else { 2 };
            let cand = ngram_counts(candidate, n);
            let refs = ngram_counts(reference, n);
            let overlap = cand
                .iter()
                .map(|(gram, count)| (*count).min(refs.get(gram).copied().unwrap_or(0)))
                .sum();
            f1(
                overlap,
                candidate.len().saturating_sub(n - 1),
                reference.len().saturating_sub(n - 1),
            )
        }
        RougeVariant::Rl => f1(lcs_len(candidate, reference), candidate.len(), reference.len()),
    }
}

/// [`rouge_tokens`] after [`tokenize`].
pub fn rouge(candidate: &str, reference: &str, variant: RougeVariant) -> f64 {
    rouge_tokens(&tokenize(candidate), &tokenize(reference), variant)
}
