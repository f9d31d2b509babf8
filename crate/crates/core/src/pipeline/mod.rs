//! Config-driven runs: each stage reads the artifacts of the stages it
//! depends on from the output directory and writes its own, and every run
//! leaves a manifest of input and artifact digests.

mod config;
mod manifest;
mod training;

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{de::DeserializeOwned, Serialize};
use serde_json::{json, Value};

use crate::corpus::{self, load_catalog, CorpusError, ItemCatalog, RecInstance, Split};
use crate::embed::{EmbedError, Embedder};
use crate::eval::{self, AnnotatedQuery, EvalError, EvalReport, Generator};
use crate::index::{self, IndexError, RankedList, VectorIndex};
use crate::item_generator::{self as gen, CandidateSet, GTrainingRecord, GenError};
use crate::jsonl::{self, JsonlError};
use crate::llm::{ChatClient, ChatPrompt, ChatResponse, LlmError, TokenBudget};
use crate::query_expert::{self as qe, QueryError, QueryMode, ReformulatedQuery};

pub use config::{validate_config, ConfigError, DataConfig, Endpoints, Modes, Negatives, RunConfig, DEFAULT_K};
pub use manifest::{FileDigest, RunManifest, StageRecord, VerifyError, TOOL_VERSION};
pub use training::{LoraSettings, TierSettings, TrainingManifest};

pub const INSTANCES_FILE: &str = "instances.jsonl";
pub const INDEX_FILE: &str = "index.rgix";
pub const PSEUDO_QUERIES_FILE: &str = "pseudo_queries.jsonl";
pub const QR_TRAIN_FILE: &str = "qr_train.jsonl";
pub const QR_TRAIN_MANIFEST: &str = "qr_train.manifest.json";
pub const QR_REJECTED_FILE: &str = "qr_rejected.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const RETRIEVED_FILE: &str = "retrieved.jsonl";
pub const CANDIDATES_FILE: &str = "g_candidates.jsonl";
pub const G_TRAIN_FILE: &str = "g_train.jsonl";
pub const G_TRAIN_MANIFEST: &str = "g_train.manifest.json";
pub const RECOMMENDATIONS_FILE: &str = "recommendations.jsonl";
pub const INFERENCE_PROMPTS_FILE: &str = "inference_prompts.jsonl";
pub const EVAL_RECOMMEND_FILE: &str = "eval_recommend.jsonl";
pub const EVAL_RECALL_FILE: &str = "eval_recall.jsonl";
pub const EVAL_SIMILARITY_FILE: &str = "eval_similarity.json";
pub const EVAL_TEXT_FILE: &str = "eval_text.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Cut-offs reported by the recall evaluation, besides `k` itself.
pub const RECALL_CUTOFFS: [usize; 5] = [1, 5, 10, 20, 50];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    BuildIndex,
    GenQrData,
    Reformulate,
    Retrieve,
    GenGData,
    Recommend,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::BuildIndex,
        Stage::GenQrData,
        Stage::Reformulate,
        Stage::Retrieve,
        Stage::GenGData,
        Stage::Recommend,
        Stage::Evaluate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::BuildIndex => "build-index",
            Stage::GenQrData => "gen-qr-data",
            Stage::Reformulate => "reformulate",
            Stage::Retrieve => "retrieve",
            Stage::GenGData => "gen-g-data",
            Stage::Recommend => "recommend",
            Stage::Evaluate => "evaluate",
        }
    }

    /// The artifact whose presence shows the stage has run.
    pub fn primary_artifact(self) -> &'static str {
        match self {
            Stage::Ingest => INSTANCES_FILE,
            Stage::BuildIndex => INDEX_FILE,
            Stage::GenQrData => QR_TRAIN_FILE,
            Stage::Reformulate => QUERIES_FILE,
            Stage::Retrieve => RETRIEVED_FILE,
            Stage::GenGData => G_TRAIN_FILE,
            Stage::Recommend => RECOMMENDATIONS_FILE,
            Stage::Evaluate => EVAL_RECOMMEND_FILE,
        }
    }

    fn requires(self, config: &RunConfig) -> Vec<Stage> {
        match self {
            Stage::Ingest | Stage::BuildIndex => vec![],
            Stage::GenQrData | Stage::Reformulate => vec![Stage::Ingest],
            Stage::Retrieve => vec![Stage::BuildIndex, Stage::Reformulate],
            Stage::GenGData => match config.modes.negatives {
                Negatives::Hard => vec![Stage::Ingest, Stage::BuildIndex, Stage::Reformulate],
                Negatives::Random => vec![Stage::Ingest],
            },
            Stage::Recommend => vec![Stage::Ingest, Stage::Retrieve],
            Stage::Evaluate => vec![Stage::Ingest, Stage::Reformulate, Stage::Retrieve, Stage::Recommend],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|stage| stage.as_str() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{stage} requires {requires} (missing {})", path.display())]
    MissingPrerequisite { stage: Stage, requires: Stage, path: PathBuf },
    #[error("{}: input not found", .0.display())]
    MissingInput(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("{stage}: {message}")]
    Stage { stage: Stage, message: String },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Forwards to another client with the run's decoding temperature.
struct Tempered {
    inner: Arc<dyn ChatClient>,
    temperature: f64,
}

impl ChatClient for Tempered {
    fn complete(&self, prompt: &ChatPrompt) -> Result<ChatResponse, LlmError> {
        let mut prompt = prompt.clone();
        prompt.temperature = self.temperature;
        self.inner.complete(&prompt)
    }
}

/// Which studies the evaluate stage runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EvalKind {
    Success,
    Recall,
    Hallucination,
    BleuRouge,
    Distributions,
    Forced,
}

impl EvalKind {
    /// What a plain `evaluate` stage runs; the text-overlap study is
    /// skipped when no annotations are configured.
    pub const DEFAULT: [EvalKind; 5] = [
        EvalKind::Success,
        EvalKind::Recall,
        EvalKind::Hallucination,
        EvalKind::BleuRouge,
        EvalKind::Distributions,
    ];
}

impl FromStr for EvalKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "success" => Ok(Self::Success),
            "recall" => Ok(Self::Recall),
            "hallucination" => Ok(Self::Hallucination),
            "bleu-rouge" => Ok(Self::BleuRouge),
            "distributions" => Ok(Self::Distributions),
            "forced" => Ok(Self::Forced),
            other => Err(format!(
                "unknown evaluation `{other}` (success|recall|hallucination|bleu-rouge|distributions|forced)"
            )),
        }
    }
}

pub fn forced_report_file(k: usize) -> String {
    format!("eval_forced_k{k}.jsonl")
}

/// Shared state of one run.
pub struct Runner {
    config: RunConfig,
    out_dir: PathBuf,
    budget: TokenBudget,
    catalog: Option<Arc<ItemCatalog>>,
    embedder: Option<Arc<Embedder>>,
    eval_kinds: Vec<EvalKind>,
}

struct StageOutput {
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
    stats: Value,
}

impl Runner {
    pub fn new(config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Self {
            out_dir: config.out_dir(),
            budget: TokenBudget::approx(config.token_budget),
            config,
            catalog: None,
            embedder: None,
            eval_kinds: EvalKind::DEFAULT.to_vec(),
        })
    }

    /// Restricts the evaluate stage to `kinds`.
    pub fn with_eval_kinds(mut self, kinds: Vec<EvalKind>) -> Self {
        self.eval_kinds = kinds;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn artifact_path(&self, stage: Stage) -> PathBuf {
        if stage == Stage::BuildIndex {
            self.config.index_path()
        } else {
            self.out_path(stage.primary_artifact())
        }
    }

    /// Provenance line written at the top of every JSONL artifact. Output
    /// locations are left out so that runs into different directories
    /// produce identical files.
    fn header(&self, stage: Stage) -> Value {
        let mut snapshot = serde_json::to_value(&self.config).expect("config serializes");
        if let Some(map) = snapshot.as_object_mut() {
            map.remove("out_dir");
            map.remove("index");
        }
        json!({
            "stage": stage.as_str(),
            "seed": self.config.seed,
            "tool_version": TOOL_VERSION,
            "config": snapshot,
        })
    }

    fn catalog(&mut self) -> Result<Arc<ItemCatalog>, PipelineError> {
        if let Some(c) = &self.catalog {
            return Ok(c.clone());
        }
        let path = self.config.resolve(&self.config.data.catalog);
        let file = File::open(&path).map_err(io_err(&path))?;
        let catalog = Arc::new(load_catalog(BufReader::new(file))?);
        self.catalog = Some(catalog.clone());
        Ok(catalog)
    }

    fn embedder(&mut self) -> Result<Arc<Embedder>, PipelineError> {
        if let Some(e) = &self.embedder {
            return Ok(e.clone());
        }
        let embedder = Arc::new(Embedder::new(self.config.embedder.clone())?);
        self.embedder = Some(embedder.clone());
        Ok(embedder)
    }

    fn client(&self, name: &str) -> Result<Tempered, PipelineError> {
        let endpoint = match name {
            "pseudo" => &self.config.endpoints.pseudo,
            "qr" => &self.config.endpoints.qr,
            _ => &self.config.endpoints.generator,
        };
        Ok(Tempered {
            inner: endpoint.connect(&self.config.base_dir)?,
            temperature: self.config.temperature,
        })
    }

    fn read_records<T: DeserializeOwned>(&self, name: &str) -> Result<Vec<T>, PipelineError> {
        Ok(jsonl::read_file(&self.out_path(name))?.records)
    }

    fn instances(&self, split: Option<Split>) -> Result<Vec<RecInstance>, PipelineError> {
        let all: Vec<RecInstance> = self.read_records(INSTANCES_FILE)?;
        Ok(all.into_iter().filter(|i| split.is_none_or(|s| i.split == s)).collect())
    }

    fn write_jsonl<T: Serialize>(&self, stage: Stage, name: &str, records: &[T]) -> Result<PathBuf, PipelineError> {
        let path = self.out_path(name);
        jsonl::write_file(&path, Some(&self.header(stage)), records)?;
        Ok(path)
    }

    fn write_text(&self, name: &str, text: &str) -> Result<PathBuf, PipelineError> {
        let path = self.out_path(name);
        std::fs::create_dir_all(&self.out_dir).map_err(io_err(&self.out_dir))?;
        std::fs::write(&path, text).map_err(io_err(&path))?;
        Ok(path)
    }

    fn write_report(&self, stage: Stage, name: &str, report: &EvalReport) -> Result<PathBuf, PipelineError> {
        let header = json!({ jsonl::HEADER_KEY: self.header(stage) });
        self.write_text(name, &format!("{header}\n{}", report.to_jsonl()?))
    }

    fn check_inputs(&self, stage: Stage) -> Result<(), PipelineError> {
        let mut needed = vec![self.config.resolve(&self.config.data.catalog)];
        if stage == Stage::Ingest {
            let data = &self.config.data;
            needed.extend([&data.train, &data.test].into_iter().chain(&data.validation).map(|p| self.config.resolve(p)));
        }
        if stage == Stage::Evaluate && self.eval_kinds.contains(&EvalKind::BleuRouge) {
            needed.extend(self.config.data.annotations.iter().map(|p| self.config.resolve(p)));
        }
        match needed.into_iter().find(|p| !p.exists()) {
            Some(missing) => Err(PipelineError::MissingInput(missing)),
            None => Ok(()),
        }
    }

    fn check_prerequisites(&self, stage: Stage) -> Result<(), PipelineError> {
        for requires in stage.requires(&self.config) {
            let path = self.artifact_path(requires);
            if !path.exists() {
                return Err(PipelineError::MissingPrerequisite { stage, requires, path });
            }
        }
        Ok(())
    }

    /// Runs one stage and records what it read and wrote.
    pub fn run_stage(&mut self, stage: Stage) -> Result<StageRecord, PipelineError> {
        self.check_inputs(stage)?;
        self.check_prerequisites(stage)?;
        let started = Instant::now();
        log::info!("stage {stage}");
        let output = match stage {
            Stage::Ingest => self.ingest()?,
            Stage::BuildIndex => self.build_index()?,
            Stage::GenQrData => self.gen_qr_data()?,
            Stage::Reformulate => self.reformulate()?,
            Stage::Retrieve => self.retrieve()?,
            Stage::GenGData => self.gen_g_data()?,
            Stage::Recommend => self.recommend()?,
            Stage::Evaluate => self.evaluate()?,
        };
        let digest = |p: &PathBuf| FileDigest::of(p).map_err(io_err(p));
        Ok(StageRecord {
            stage: stage.as_str().to_string(),
            inputs: output.inputs.iter().map(digest).collect::<Result<_, _>>()?,
            artifacts: output.artifacts.iter().map(digest).collect::<Result<_, _>>()?,
            elapsed_ms: started.elapsed().as_millis() as u64,
            stats: output.stats,
        })
    }

    fn ingest(&mut self) -> Result<StageOutput, PipelineError> {
        let catalog = self.catalog()?;
        let data = self.config.data.clone();
        let mut splits = vec![(Split::Train, &data.train)];
        splits.extend(data.validation.iter().map(|p| (Split::Validation, p)));
        splits.push((Split::Test, &data.test));
        let mut inputs = vec![self.config.resolve(&data.catalog)];
        let mut instances = Vec::new();
        let mut split_stats = serde_json::Map::new();
        for (split, rel) in splits {
            let path = self.config.resolve(rel);
            let file = File::open(&path).map_err(io_err(&path))?;
            let mut dialogues = Vec::new();
            let mut errors = Vec::new();
            for parsed in corpus::parse_dialogues(BufReader::new(file), data.format) {
                match parsed {
                    Ok(d) => dialogues.push(d),
                    Err(e) => {
                        log::warn!("{}: {e}", path.display());
                        errors.push(e.to_string());
                    }
                }
            }
            let extraction = corpus::extract_instances(&dialogues, &catalog, split);
            split_stats.insert(
                format!("{split:?}").to_lowercase(),
                json!({
                    "dialogues": dialogues.len(),
                    "parse_errors": errors,
                    "instances": extraction.instances.len(),
                    "skipped": extraction.skipped.entries,
                }),
            );
            instances.extend(extraction.instances);
            inputs.push(path);
        }
        let artifact = self.write_jsonl(Stage::Ingest, INSTANCES_FILE, &instances)?;
        Ok(StageOutput {
            inputs,
            artifacts: vec![artifact],
            stats: json!({ "format": data.format.to_string(), "catalog_items": catalog.len(), "splits": split_stats }),
        })
    }

    fn build_index(&mut self) -> Result<StageOutput, PipelineError> {
        let catalog = self.catalog()?;
        let embedder = self.embedder()?;
        let index = index::build_index(&catalog, &embedder)?;
        let path = self.config.index_path();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        index::save_index(&index, &path)?;
        Ok(StageOutput {
            inputs: vec![self.config.resolve(&self.config.data.catalog)],
            artifacts: vec![path],
            stats: json!({ "items": index.len(), "dim": index.dim() }),
        })
    }

    fn gen_qr_data(&mut self) -> Result<StageOutput, PipelineError> {
        let catalog = self.catalog()?;
        let train = self.instances(Some(Split::Train))?;
        let client = self.client("pseudo")?;
        let run = qe::generate_pseudo_queries(&client, &train, &catalog, &self.budget)?;
        let set = qe::build_qr_training_set(&run.queries, &train, &catalog, &self.budget);
        let pseudo = self.write_jsonl(Stage::GenQrData, PSEUDO_QUERIES_FILE, &run.queries)?;
        let train_path = self.write_text(QR_TRAIN_FILE, &set.to_jsonl())?;
        let rejected: Vec<Value> = run
            .failures
            .iter()
            .map(|f| json!({ "instance_id": f.instance_id, "reason": f.error }))
            .chain(set.rejected.iter().map(|r| json!({ "instance_id": r.instance_id, "reason": r.reason })))
            .collect();
        let rejected_path = self.write_jsonl(Stage::GenQrData, QR_REJECTED_FILE, &rejected)?;
        let digest = sidecar_digest(&train_path)?;
        let sidecar = TrainingManifest::query_expert(digest, set.records.len(), self.config.seed)
            .with_options(json!({ "token_budget": self.config.token_budget }));
        let sidecar_path = self.write_text(QR_TRAIN_MANIFEST, &to_pretty(&sidecar))?;
        Ok(StageOutput {
            inputs: vec![self.out_path(INSTANCES_FILE)],
            artifacts: vec![train_path, sidecar_path, pseudo, rejected_path],
            stats: json!({
                "train_instances": train.len(),
                "pseudo_queries": run.queries.len(),
                "failures": run.failures.len(),
                "records": set.records.len(),
                "rejected": set.rejected.len(),
            }),
        })
    }

    fn reformulate(&mut self) -> Result<StageOutput, PipelineError> {
        let instances = self.instances(None)?;
        let mode = self.config.modes.query_mode;
        let client = match mode {
            QueryMode::Original => None,
            QueryMode::DirectPrompt => Some(self.client("pseudo")?),
            QueryMode::TrainedQr => Some(self.client("qr")?),
        };
        let queries =
            qe::reformulate_all(client.as_ref().map(|c| c as &dyn ChatClient), &instances, mode, &self.budget)?;
        let artifact = self.write_jsonl(Stage::Reformulate, QUERIES_FILE, &queries)?;
        Ok(StageOutput {
            inputs: vec![self.out_path(INSTANCES_FILE)],
            artifacts: vec![artifact],
            stats: json!({ "mode": mode.to_string(), "queries": queries.len() }),
        })
    }

    fn load_index(&self) -> Result<VectorIndex, PipelineError> {
        Ok(index::load_index(&self.config.index_path())?)
    }

    fn retrieve(&mut self) -> Result<StageOutput, PipelineError> {
        let index = self.load_index()?;
        let embedder = self.embedder()?;
        let queries: Vec<ReformulatedQuery> = self.read_records(QUERIES_FILE)?;
        let lists = eval::retrieve_for_queries(&index, &embedder, &queries, self.config.k)?;
        let artifact = self.write_jsonl(Stage::Retrieve, RETRIEVED_FILE, &lists)?;
        Ok(StageOutput {
            inputs: vec![self.config.index_path(), self.out_path(QUERIES_FILE)],
            artifacts: vec![artifact],
            stats: json!({ "lists": lists.len(), "k": self.config.k }),
        })
    }

    fn gen_g_data(&mut self) -> Result<StageOutput, PipelineError> {
        let catalog = self.catalog()?;
        let train = self.instances(Some(Split::Train))?;
        let (k_train, seed) = (self.config.k_train, self.config.seed);
        let mut inputs = vec![self.out_path(INSTANCES_FILE)];
        let sets: Vec<CandidateSet> = match self.config.modes.negatives {
            Negatives::Random => train
                .iter()
                .map(|i| gen::random_negatives(&catalog, i, k_train, seed))
                .collect::<Result<_, _>>()?,
            Negatives::Hard => {
                let index = self.load_index()?;
                let embedder = self.embedder()?;
                let queries: Vec<ReformulatedQuery> = self.read_records(QUERIES_FILE)?;
                inputs.extend([self.config.index_path(), self.out_path(QUERIES_FILE)]);
                let by_id: std::collections::HashMap<&str, &ReformulatedQuery> =
                    queries.iter().map(|q| (q.instance_id.as_str(), q)).collect();
                let texts = train
                    .iter()
                    .map(|i| {
                        by_id.get(i.instance_id.as_str()).map(|q| q.query_text.as_str()).ok_or_else(|| {
                            PipelineError::Stage {
                                stage: Stage::GenGData,
                                message: format!("no query for instance {}", i.instance_id),
                            }
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let vectors = if texts.is_empty() { Vec::new() } else { embedder.embed(&texts)? };
                train
                    .par_iter()
                    .zip(&vectors)
                    .map(|(i, v)| gen::mine_with_vector(&index, v, i, k_train, seed))
                    .collect::<Result<_, _>>()?
            }
        };
        let cot = self.config.modes.cot;
        let pseudo = if cot { Some(self.client("pseudo")?) } else { None };
        let budget = &self.budget;
        let mut records: Vec<GTrainingRecord> = train
            .par_iter()
            .zip(&sets)
            .map(|(instance, set)| {
                let rationale = match &pseudo {
                    Some(client) => Some(gen::build_cot_rationale(client, instance, budget)?),
                    None => None,
                };
                gen::build_g_training_record(instance, set, &catalog, rationale.as_deref(), budget)
            })
            .collect::<Result<_, _>>()?;
        records.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        let mut sets = sets;
        sets.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        let candidates = self.write_jsonl(Stage::GenGData, CANDIDATES_FILE, &sets)?;
        let train_path = self.write_text(G_TRAIN_FILE, &jsonl::to_lines(&records))?;
        let digest = sidecar_digest(&train_path)?;
        let sidecar = TrainingManifest::item_generator(digest, records.len(), seed).with_options(json!({
            "negatives": self.config.modes.negatives.to_string(),
            "k_train": k_train,
            "cot": cot,
            "token_budget": self.config.token_budget,
        }));
        let sidecar_path = self.write_text(G_TRAIN_MANIFEST, &to_pretty(&sidecar))?;
        Ok(StageOutput {
            inputs,
            artifacts: vec![train_path, sidecar_path, candidates],
            stats: json!({ "records": records.len(), "negatives": self.config.modes.negatives.to_string() }),
        })
    }

    fn test_lists(&self) -> Result<(Vec<RecInstance>, Vec<RankedList>), PipelineError> {
        let test = self.instances(Some(Split::Test))?;
        let lists: Vec<RankedList> = self.read_records(RETRIEVED_FILE)?;
        let mut by_id: std::collections::HashMap<String, RankedList> =
            lists.into_iter().map(|l| (l.query_id.clone(), l)).collect();
        let lists = test
            .iter()
            .map(|i| {
                by_id
                    .remove(&i.instance_id)
                    .ok_or_else(|| EvalError::MissingRankedList(i.instance_id.clone()).into())
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        Ok((test, lists))
    }

    fn recommend(&mut self) -> Result<StageOutput, PipelineError> {
        let catalog = self.catalog()?;
        let (test, lists) = self.test_lists()?;
        let client = self.client("generator")?;
        let cot = self.config.modes.cot;
        let budget = &self.budget;
        let results: Vec<(gen::Recommendation, Value)> = test
            .par_iter()
            .zip(&lists)
            .map(|(instance, ranked)| {
                let ids: Vec<String> = ranked.item_ids().map(str::to_string).collect();
                let prompt = gen::inference_prompt(instance, &ids, &catalog, cot, budget)?;
                let rec = gen::recommend(&client, instance, ranked, &catalog, cot, budget)?;
                Ok((rec, json!({ "instance_id": instance.instance_id, "prompt": prompt })))
            })
            .collect::<Result<_, GenError>>()?;
        let (mut recs, mut prompts): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        recs.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        prompts.sort_by(|a, b| a["instance_id"].as_str().cmp(&b["instance_id"].as_str()));
        let artifact = self.write_jsonl(Stage::Recommend, RECOMMENDATIONS_FILE, &recs)?;
        let prompt_path = self.write_jsonl(Stage::Recommend, INFERENCE_PROMPTS_FILE, &prompts)?;
        Ok(StageOutput {
            inputs: vec![self.out_path(INSTANCES_FILE), self.out_path(RETRIEVED_FILE)],
            artifacts: vec![artifact, prompt_path],
            stats: json!({ "recommendations": recs.len() }),
        })
    }

    fn evaluate(&mut self) -> Result<StageOutput, PipelineError> {
        let kinds = self.eval_kinds.clone();
        let catalog = self.catalog()?;
        let (test, lists) = self.test_lists()?;
        let mut inputs = vec![self.out_path(INSTANCES_FILE), self.out_path(RETRIEVED_FILE)];
        let mut artifacts = Vec::new();
        let mut stats = serde_json::Map::new();
        let wants = |k: EvalKind| kinds.contains(&k);

        if wants(EvalKind::Success) || wants(EvalKind::Hallucination) {
            let recs: Vec<gen::Recommendation> = self.read_records(RECOMMENDATIONS_FILE)?;
            inputs.push(self.out_path(RECOMMENDATIONS_FILE));
            let report = eval::recommendation_report(&recs, &test, &catalog)?;
            stats.insert("recommend".into(), metrics_json(&report));
            artifacts.push(self.write_report(Stage::Evaluate, EVAL_RECOMMEND_FILE, &report)?);
        }
        if wants(EvalKind::Recall) {
            let mut ks: Vec<usize> = RECALL_CUTOFFS.iter().copied().filter(|&c| c < self.config.k).collect();
            ks.push(self.config.k);
            let report = eval::recall_report(&lists, &test, &ks)?;
            stats.insert("recall".into(), metrics_json(&report));
            artifacts.push(self.write_report(Stage::Evaluate, EVAL_RECALL_FILE, &report)?);
        }
        let needs_queries = wants(EvalKind::Distributions) || wants(EvalKind::BleuRouge);
        let queries: Vec<ReformulatedQuery> = if needs_queries {
            inputs.push(self.out_path(QUERIES_FILE));
            let test_ids: std::collections::HashSet<&str> = test.iter().map(|i| i.instance_id.as_str()).collect();
            self.read_records::<ReformulatedQuery>(QUERIES_FILE)?
                .into_iter()
                .filter(|q| test_ids.contains(q.instance_id.as_str()))
                .collect()
        } else {
            Vec::new()
        };
        if wants(EvalKind::Distributions) && !queries.is_empty() {
            let embedder = self.embedder()?;
            let summary = eval::similarity_distribution(&queries, &test, &embedder, &catalog)?;
            stats.insert("similarity_mean".into(), json!(summary.mean));
            let doc = json!({ jsonl::HEADER_KEY: self.header(Stage::Evaluate), "summary": summary });
            artifacts.push(self.write_text(EVAL_SIMILARITY_FILE, &to_pretty(&doc))?);
        }
        if wants(EvalKind::BleuRouge) {
            if let Some(rel) = self.config.data.annotations.clone() {
                let path = self.config.resolve(&rel);
                let annotations: Vec<AnnotatedQuery> = jsonl::read_file(&path)?.records;
                inputs.push(path);
                let report = eval::text_overlap_report(&queries, &annotations)?;
                stats.insert("text".into(), metrics_json(&report));
                artifacts.push(self.write_report(Stage::Evaluate, EVAL_TEXT_FILE, &report)?);
            }
        }
        if wants(EvalKind::Forced) {
            let client = self.client("generator")?;
            let generator = Generator {
                client: &client,
                catalog: &catalog,
                cot: self.config.modes.cot,
                budget: &self.budget,
            };
            let result = eval::forced_inclusion_eval(&test, &lists, &generator, self.config.k, self.config.seed)?;
            stats.insert("forced".into(), metrics_json(&result.report));
            let name = forced_report_file(self.config.k);
            artifacts.push(self.write_report(Stage::Evaluate, &name, &result.report)?);
        }
        Ok(StageOutput {
            inputs,
            artifacts,
            stats: Value::Object(stats),
        })
    }
}

/// Digest naming the training file relative to its sidecar, so sidecars
/// do not depend on the output location.
fn sidecar_digest(path: &Path) -> Result<FileDigest, PipelineError> {
    let mut digest = FileDigest::of(path).map_err(io_err(path))?;
    if let Some(name) = path.file_name() {
        digest.path = PathBuf::from(name);
    }
    Ok(digest)
}

fn metrics_json(report: &EvalReport) -> Value {
    report.metrics.iter().map(|m| (m.name.clone(), json!({ "value": m.value, "n": m.n }))).collect::<serde_json::Map<_, _>>().into()
}

fn to_pretty<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    text
}

/// Runs `stages` in pipeline order and writes `manifest.json` to the
/// output directory. The first failing stage stops the run.
pub fn run_pipeline(config: RunConfig, stages: &[Stage]) -> Result<RunManifest, PipelineError> {
    run_with(Runner::new(config)?, stages)
}

/// [`run_pipeline`] with a prepared runner.
pub fn run_with(mut runner: Runner, stages: &[Stage]) -> Result<RunManifest, PipelineError> {
    let started = Instant::now();
    let mut ordered = stages.to_vec();
    ordered.sort();
    ordered.dedup();
    let mut records = Vec::with_capacity(ordered.len());
    for stage in ordered {
        records.push(runner.run_stage(stage)?);
    }
    let mut config = serde_json::to_value(runner.config()).expect("config serializes");
    if let Some(map) = config.as_object_mut() {
        map.insert("base_dir".into(), json!(runner.config().base_dir));
    }
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        seed: runner.config().seed,
        config,
        stages: records,
        elapsed_ms: started.elapsed().as_millis() as u64,
    };
    runner.write_text(MANIFEST_FILE, &to_pretty(&manifest))?;
    Ok(manifest)
}

/// Reads a manifest written by [`run_pipeline`].
pub fn read_manifest(path: &Path) -> Result<RunManifest, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Texts for a distribution comparison. JSON lines contribute their
/// `prompt`, `query_text` or `text` field; a header line is skipped and
/// any other line is taken verbatim.
pub fn read_texts(path: &Path) -> Result<Vec<String>, PipelineError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Value>(&line) {
            Ok(Value::Object(map)) => {
                if map.contains_key(jsonl::HEADER_KEY) {
                    continue;
                }
                let text = ["prompt", "query_text", "text"]
                    .iter()
                    .find_map(|k| map.get(*k).and_then(Value::as_str))
                    .ok_or_else(|| PipelineError::Format {
                        path: path.display().to_string(),
                        message: "record without prompt, query_text or text".into(),
                    })?;
                out.push(text.to_string());
            }
            _ => out.push(line),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for stage in Stage::ALL {
            assert_eq!(stage.as_str().parse::<Stage>().unwrap(), stage);
        }
        assert!("index".parse::<Stage>().is_err());
        assert!(Stage::Ingest < Stage::Evaluate);
    }

    #[test]
    fn texts_from_mixed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        std::fs::write(&path, "{\"header\":{}}\n{\"prompt\":\"a\"}\n{\"query_text\":\"b\"}\nplain c\n\n").unwrap();
        assert_eq!(read_texts(&path).unwrap(), ["a", "b", "plain c"]);
        std::fs::write(&path, "{\"other\":1}\n").unwrap();
        assert!(read_texts(&path).is_err());
    }
}
