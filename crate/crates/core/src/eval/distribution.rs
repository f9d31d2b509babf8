//! Cosine-similarity distributions and the divergence between two sets of
//! embedded texts.

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::corpus::{ItemCatalog, RecInstance};
use crate::embed::{cosine, Embedder, EmbeddingVector};
use crate::query_expert::ReformulatedQuery;

pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Quantiles 0.0, 0.1, ..., 1.0 with linear interpolation.
    pub deciles: Vec<f64>,
    /// Counts over 50 equal bins covering [-1, 1]; 1.0 falls in the last.
    pub histogram: Vec<usize>,
}

/// Histogram bin of a value in [-1, 1]; out-of-range values are clamped.
pub fn histogram_bin(value: f64) -> usize {
    let scaled = ((value + 1.0) / 2.0 * HISTOGRAM_BINS as f64).floor();
    if scaled.is_nan() || scaled < 0.0 {
        0
    } else {
        (scaled as usize).min(HISTOGRAM_BINS - 1)
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl DistributionSummary {
    pub fn from_samples(samples: &[f64]) -> Result<Self, EvalError> {
        if samples.is_empty() {
            return Err(EvalError::EmptySample);
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let deciles = (0..=10).map(|d| quantile(&sorted, d as f64 / 10.0)).collect();
        let mut histogram = vec![0usize; HISTOGRAM_BINS];
        for &x in samples {
            histogram[histogram_bin(x)] += 1;
        }
        Ok(Self {
            count: samples.len(),
            mean,
            std: var.sqrt(),
            deciles,
            histogram,
        })
    }
}

/// Cosine between each query and its instance's ground-truth index text,
/// in query order.
pub fn similarity_samples(
    queries: &[ReformulatedQuery],
    instances: &[RecInstance],
    embedder: &Embedder,
    catalog: &ItemCatalog,
) -> Result<Vec<f64>, EvalError> {
    let mut truth_texts = Vec::with_capacity(queries.len());
    for q in queries {
        let instance = instances
            .iter()
            .find(|i| i.instance_id == q.instance_id)
            .ok_or_else(|| EvalError::UnknownInstance(q.instance_id.clone()))?;
        let item = catalog
            .get(&instance.truth_item_id)
            .ok_or_else(|| EvalError::UnknownItem(instance.truth_item_id.clone()))?;
        truth_texts.push(item.index_text());
    }
    let query_texts: Vec<&str> = queries.iter().map(|q| q.query_text.as_str()).collect();
    let qv = embedder.embed(&query_texts)?;
    let tv = embedder.embed(&truth_texts)?;
    qv.iter().zip(&tv).map(|(a, b)| Ok(cosine(a, b)?)).collect()
}

pub fn similarity_distribution(
    queries: &[ReformulatedQuery],
    instances: &[RecInstance],
    embedder: &Embedder,
    catalog: &ItemCatalog,
) -> Result<DistributionSummary, EvalError> {
    DistributionSummary::from_samples(&similarity_samples(queries, instances, embedder, catalog)?)
}

/// Chord distance between unit vectors, `sqrt(2 - 2 cos)`.
fn distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EvalError> {
    Ok((2.0 - 2.0 * cosine(a, b)?).max(0.0).sqrt())
}

fn mean_distance(xs: &[EmbeddingVector], ys: &[EmbeddingVector]) -> Result<f64, EvalError> {
    let mut sum = 0.0;
    for x in xs {
        for y in ys {
            sum += distance(x, y)?;
        }
    }
    Ok(sum / (xs.len() * ys.len()) as f64)
}

/// Energy distance `2 E|X-Y| - E|X-X'| - E|Y-Y'|` with chord distances,
/// all pairs included (V-statistic), so identical samples give exactly 0.
pub fn energy_distance(xs: &[EmbeddingVector], ys: &[EmbeddingVector]) -> Result<f64, EvalError> {
    if xs.is_empty() || ys.is_empty() {
        return Err(EvalError::EmptySample);
    }
    let cross = mean_distance(xs, ys)?;
    let within_x = mean_distance(xs, xs)?;
    let within_y = mean_distance(ys, ys)?;
    Ok((2.0 * cross - within_x - within_y).max(0.0))
}

pub fn distribution_divergence<S: AsRef<str> + Sync>(
    train_texts: &[S],
    inference_texts: &[S],
    embedder: &Embedder,
) -> Result<f64, EvalError> {
    if train_texts.is_empty() || inference_texts.is_empty() {
        return Err(EvalError::EmptySample);
    }
    energy_distance(&embedder.embed(train_texts)?, &embedder.embed(inference_texts)?)
}

/// Mean cosine over all pairs drawn one from each set.
pub fn mean_cross_cosine(xs: &[EmbeddingVector], ys: &[EmbeddingVector]) -> Result<f64, EvalError> {
    if xs.is_empty() || ys.is_empty() {
        return Err(EvalError::EmptySample);
    }
    let mut sum = 0.0;
    for x in xs {
        for y in ys {
            sum += cosine(x, y)?;
        }
    }
    Ok(sum / (xs.len() * ys.len()) as f64)
}
