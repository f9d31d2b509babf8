//! Sidecar files describing how a downstream trainer should consume a
//! training file. The training file itself holds only records.

use serde::{Deserialize, Serialize};

use super::manifest::FileDigest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierSettings {
    pub tier: String,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraSettings {
    pub rank: usize,
    pub alpha: usize,
    pub target_modules: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    /// `query_expert` or `item_generator`.
    pub target: String,
    pub training_file: FileDigest,
    pub records: usize,
    pub seed: u64,
    pub epochs: usize,
    pub optimizer: String,
    pub warmup_fraction: f64,
    pub max_sequence_tokens: usize,
    pub tiers: Vec<TierSettings>,
    pub lora: LoraSettings,
    /// Config values that shaped the records, e.g. negatives and k_train.
    pub options: serde_json::Value,
}

fn tier(name: &str, batch_size: usize, learning_rate: f64) -> TierSettings {
    TierSettings {
        tier: name.into(),
        batch_size,
        learning_rate,
    }
}

impl TrainingManifest {
    fn base(target: &str, training_file: FileDigest, records: usize, seed: u64, tiers: Vec<TierSettings>) -> Self {
        Self {
            target: target.into(),
            training_file,
            records,
            seed,
            epochs: 1,
            optimizer: "adamw".into(),
            warmup_fraction: 0.1,
            max_sequence_tokens: crate::llm::DEFAULT_TOKEN_BUDGET,
            tiers,
            lora: LoraSettings {
                rank: 8,
                alpha: 32,
                target_modules: vec!["q_proj".into(), "v_proj".into()],
            },
            options: serde_json::Value::Null,
        }
    }

    pub fn query_expert(training_file: FileDigest, records: usize, seed: u64) -> Self {
        Self::base(
            "query_expert",
            training_file,
            records,
            seed,
            vec![tier("2b", 2, 1e-4), tier("8b", 2, 1e-4), tier("27b", 1, 2e-5)],
        )
    }

    pub fn item_generator(training_file: FileDigest, records: usize, seed: u64) -> Self {
        Self::base(
            "item_generator",
            training_file,
            records,
            seed,
            vec![tier("2b", 2, 1e-4), tier("8b", 2, 1e-4), tier("27b", 1, 5e-5)],
        )
    }

    pub fn with_options(mut self, options: serde_json::Value) -> Self {
        self.options = options;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn digest() -> FileDigest {
        FileDigest {
            path: "train.jsonl".into(),
            sha256: String::new(),
            bytes: 0,
        }
    }

    #[test]
    fn protocol_values() {
        let qr = TrainingManifest::query_expert(digest(), 3, 1);
        let g = TrainingManifest::item_generator(digest(), 3, 1);
        assert_eq!(qr.tiers[2].learning_rate, 2e-5);
        assert_eq!(g.tiers[2].learning_rate, 5e-5);
        assert_eq!((qr.tiers[0].batch_size, qr.tiers[2].batch_size), (2, 1));
        assert_eq!((g.lora.rank, g.lora.alpha, g.epochs), (8, 32, 1));
        assert_eq!(g.warmup_fraction, 0.1);
    }
}
