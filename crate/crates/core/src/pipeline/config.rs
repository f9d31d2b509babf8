use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use strsim::levenshtein;

use crate::corpus::DialogueFormat;
use crate::embed::EmbedderConfig;
use crate::item_generator::DEFAULT_K_TRAIN;
use crate::llm::{EndpointConfig, DEFAULT_TEMPERATURE, DEFAULT_TOKEN_BUDGET};
use crate::query_expert::QueryMode;

pub const DEFAULT_K: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Syntax(String),
    #[error("unknown key `{key}`{}", suggestion.as_ref().map(|s| format!(", did you mean `{s}`?")).unwrap_or_default())]
    UnknownKey { key: String, suggestion: Option<String> },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Negatives {
    #[default]
    Hard,
    Random,
}

impl FromStr for Negatives {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hard" => Ok(Self::Hard),
            "random" => Ok(Self::Random),
            other => Err(format!("unknown negatives `{other}` (expected hard or random)")),
        }
    }
}

impl fmt::Display for Negatives {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Hard => "hard",
            Self::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub format: DialogueFormat,
    pub catalog: PathBuf,
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<PathBuf>,
    pub test: PathBuf,
    /// Line-delimited `{instance_id, annotated_query}` for the text-overlap
    /// study.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
}

/// Model endpoints: `pseudo` is the untuned model used for pseudo-queries,
/// chain-of-thought rationales and the direct-prompt baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    pub pseudo: EndpointConfig,
    pub qr: EndpointConfig,
    pub generator: EndpointConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Modes {
    #[serde(default = "default_query_mode", with = "query_mode_text")]
    pub query_mode: QueryMode,
    #[serde(default)]
    pub negatives: Negatives,
    #[serde(default)]
    pub cot: bool,
}

impl Default for Modes {
    fn default() -> Self {
        Self {
            query_mode: default_query_mode(),
            negatives: Negatives::Hard,
            cot: false,
        }
    }
}

fn default_query_mode() -> QueryMode {
    QueryMode::TrainedQr
}

mod query_mode_text {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::query_expert::QueryMode;

    pub fn serialize<S: Serializer>(mode: &QueryMode, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(mode)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<QueryMode, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything a run needs. Relative paths resolve against `base_dir`, the
/// config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_k_train")]
    pub k_train: usize,
    #[serde(default = "default_budget")]
    pub token_budget: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Index file; defaults to `index.rgix` in the output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<PathBuf>,
    pub data: DataConfig,
    pub embedder: EmbedderConfig,
    pub endpoints: Endpoints,
    #[serde(default)]
    pub modes: Modes,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_k() -> usize {
    DEFAULT_K
}
fn default_k_train() -> usize {
    DEFAULT_K_TRAIN
}
fn default_budget() -> usize {
    DEFAULT_TOKEN_BUDGET
}
fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Keys accepted in each table, used for unknown-key suggestions.
const TOP_KEYS: &[&str] = &[
    "seed", "k", "k_train", "token_budget", "temperature", "out_dir", "index", "data", "embedder", "endpoints", "modes",
];
const DATA_KEYS: &[&str] = &["format", "catalog", "train", "validation", "test", "annotations"];
const EMBEDDER_KEYS: &[&str] =
    &["backend", "endpoint", "model_name", "dim", "batch_size", "max_in_flight", "timeout_secs", "retry"];
const ENDPOINTS_KEYS: &[&str] = &["pseudo", "qr", "generator"];
const ENDPOINT_KEYS: &[&str] = &["kind", "url", "model", "script", "on_miss", "max_in_flight", "timeout_secs", "retry"];
const RETRY_KEYS: &[&str] = &["attempts", "base_delay_ms"];
const MODES_KEYS: &[&str] = &["query_mode", "negatives", "cot"];

/// Common names for keys that are spelled differently here.
const ALIASES: &[(&str, &str)] = &[
    ("retriever", "embedder"),
    ("retrieval", "embedder"),
    ("encoder", "embedder"),
    ("llm", "endpoints"),
    ("models", "endpoints"),
    ("generation", "generator"),
    ("topk", "k"),
    ("top_k", "k"),
    ("budget", "token_budget"),
    ("max_tokens", "token_budget"),
];

fn suggest(key: &str, known: &[&str]) -> Option<String> {
    let limit = (key.chars().count() / 3).max(2);
    let candidates = known
        .iter()
        .map(|k| (*k, *k))
        .chain(ALIASES.iter().filter(|(_, target)| known.contains(target)).copied());
    candidates
        .map(|(spelling, target)| (levenshtein(key, spelling), target))
        .filter(|(d, _)| *d <= limit)
        .min_by_key(|(d, target)| (*d, *target))
        .map(|(_, target)| target.to_string())
}

fn check_table(table: &toml::Table, known: &[&str], prefix: &str) -> Result<(), ConfigError> {
    let mut keys: Vec<&String> = table.keys().collect();
    keys.sort();
    for key in keys {
        if !known.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey {
                key: format!("{prefix}{key}"),
                suggestion: suggest(key, known).map(|s| format!("{prefix}{s}")),
            });
        }
    }
    Ok(())
}

fn sub<'a>(table: &'a toml::Table, key: &str) -> Option<&'a toml::Table> {
    table.get(key).and_then(toml::Value::as_table)
}

fn check_endpoint(table: &toml::Table, prefix: &str) -> Result<(), ConfigError> {
    check_table(table, ENDPOINT_KEYS, prefix)?;
    if let Some(retry) = sub(table, "retry") {
        check_table(retry, RETRY_KEYS, &format!("{prefix}retry."))?;
    }
    Ok(())
}

fn check_keys(root: &toml::Table) -> Result<(), ConfigError> {
    check_table(root, TOP_KEYS, "")?;
    if let Some(t) = sub(root, "data") {
        check_table(t, DATA_KEYS, "data.")?;
    }
    if let Some(t) = sub(root, "embedder") {
        check_table(t, EMBEDDER_KEYS, "embedder.")?;
        if let Some(retry) = sub(t, "retry") {
            check_table(retry, RETRY_KEYS, "embedder.retry.")?;
        }
    }
    if let Some(t) = sub(root, "endpoints") {
        check_table(t, ENDPOINTS_KEYS, "endpoints.")?;
        for name in ENDPOINTS_KEYS {
            if let Some(e) = sub(t, name) {
                check_endpoint(e, &format!("endpoints.{name}."))?;
            }
        }
    }
    if let Some(t) = sub(root, "modes") {
        check_table(t, MODES_KEYS, "modes.")?;
    }
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, rejecting unknown keys, and applies defaults.
    /// Invariants are not checked; see [`RunConfig::validate`].
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let root: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        check_keys(&root)?;
        let mut config: RunConfig =
            toml::from_str(text).map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        config.base_dir = base_dir.to_path_buf();
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.k < 1 {
            return Err(invalid("k", "k must be ≥ 1"));
        }
        if self.k_train < 1 {
            return Err(invalid("k_train", "k_train must be ≥ 1"));
        }
        if self.token_budget == 0 {
            return Err(invalid("token_budget", "token_budget must be ≥ 1"));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(invalid("temperature", "temperature must be in [0, 2]"));
        }
        self.embedder.validate().map_err(|e| invalid("embedder", e.to_string()))?;
        for (name, endpoint) in self.endpoint_list() {
            endpoint
                .validate()
                .map_err(|e| invalid(&format!("endpoints.{name}"), e.to_string()))?;
        }
        Ok(())
    }

    pub fn endpoint_list(&self) -> [(&'static str, &EndpointConfig); 3] {
        [
            ("pseudo", &self.endpoints.pseudo),
            ("qr", &self.endpoints.qr),
            ("generator", &self.endpoints.generator),
        ]
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.out_dir)
    }

    pub fn index_path(&self) -> PathBuf {
        match &self.index {
            Some(p) => self.resolve(p),
            None => self.out_dir().join(super::INDEX_FILE),
        }
    }

    /// The resolved config as TOML, the form echoed by `validate-config`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Reads, parses and checks a config file.
pub fn validate_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let config = RunConfig::from_toml(&text, &base_dir)?;
    config.validate()?;
    Ok(config)
}
