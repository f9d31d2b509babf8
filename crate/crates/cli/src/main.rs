use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use recgen::corpus::DialogueFormat;
use recgen::embed::Embedder;
use recgen::eval::{distribution_divergence, EvalReport};
use recgen::pipeline::{
    read_texts, run_with, validate_config, EvalKind, Negatives, RunConfig, RunManifest, Runner, Stage,
    G_TRAIN_FILE, INFERENCE_PROMPTS_FILE,
};
use recgen::query_expert::QueryMode;

#[derive(Parser)]
#[command(name = "recgen", version, about = "Retrieval-augmented conversational recommendation pipeline")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "recgen.toml")]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        matches!(s, Switch::On)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse the dialogue splits into recommendation instances.
    Ingest {
        #[arg(long)]
        format: Option<DialogueFormat>,
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Embed the catalog into a vector index.
    BuildIndex {
        #[arg(long)]
        catalog: Option<PathBuf>,
        /// Index file to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate pseudo-queries and the reformulation training file.
    GenQrData,
    /// Produce a retrieval query for every instance.
    Reformulate {
        #[arg(long)]
        mode: Option<QueryMode>,
    },
    /// Retrieve the top-k items for every query.
    Retrieve {
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Build the generator training file.
    GenGData {
        #[arg(long)]
        negatives: Option<Negatives>,
        #[arg(long)]
        k_train: Option<usize>,
        #[arg(long, value_enum)]
        cot: Option<Switch>,
    },
    /// Ask the generator for one item per test instance.
    Recommend {
        #[arg(long, value_enum)]
        cot: Option<Switch>,
    },
    /// Score the run and print one table per report.
    Evaluate {
        /// success, recall, hallucination, bleu-rouge, distributions or forced.
        #[arg(long, value_delimiter = ',')]
        what: Vec<EvalKind>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Offline analyses.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Run several stages in pipeline order.
    Run {
        /// Stages to run; all of them when omitted.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<Stage>,
        #[command(flatten)]
        modes: ModeFlags,
    },
    /// Check a config file and print it with defaults applied.
    ValidateConfig,
}

#[derive(Subcommand)]
enum Analyze {
    /// Energy distance between training and inference prompts.
    Distributions {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        infer: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModeFlags {
    #[arg(long)]
    mode: Option<QueryMode>,
    #[arg(long)]
    negatives: Option<Negatives>,
    #[arg(long, value_enum)]
    cot: Option<Switch>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    k_train: Option<usize>,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = validate_config(&cli.config).with_context(|| format!("config {}", cli.config.display()))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        config.out_dir = absolute(dir)?;
    }
    Ok(config)
}

/// Command-line paths are relative to the working directory, not the
/// config file.
fn absolute(path: &Path) -> Result<PathBuf> {
    Ok(if path.is_absolute() {
        path.to_path_buf()
    } else {
        std::env::current_dir()?.join(path)
    })
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run_stages(config: RunConfig, stages: &[Stage], kinds: Option<Vec<EvalKind>>) -> Result<RunManifest> {
    config.validate()?;
    let mut runner = Runner::new(config)?;
    if let Some(kinds) = kinds {
        runner = runner.with_eval_kinds(kinds);
    }
    Ok(run_with(runner, stages)?)
}

fn print_summary(manifest: &RunManifest) {
    for stage in &manifest.stages {
        println!("{}: {} ({} ms)", stage.stage, stage.stats, stage.elapsed_ms);
        for artifact in &stage.artifacts {
            println!("  {}", artifact.path.display());
        }
    }
}

fn print_reports(manifest: &RunManifest) -> Result<()> {
    for artifact in manifest.artifacts() {
        if artifact.path.extension().is_some_and(|e| e == "jsonl") {
            let file = std::fs::File::open(&artifact.path)?;
            let report = EvalReport::read_jsonl(std::io::BufReader::new(file))
                .with_context(|| artifact.path.display().to_string())?;
            println!("{}", artifact.path.display());
            print!("{}", report.to_table());
        } else {
            println!("{}", artifact.path.display());
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    if let Command::ValidateConfig = cli.command {
        let config = load_config(&cli)?;
        print!("{}", config.to_toml());
        return Ok(());
    }
    let mut config = load_config(&cli)?;
    let cwd_path = |p: PathBuf| absolute(&p);
    let (stages, kinds): (Vec<Stage>, Option<Vec<EvalKind>>) = match cli.command {
        Command::Ingest { format, catalog } => {
            set(&mut config.data.format, format);
            set(&mut config.data.catalog, catalog.map(cwd_path).transpose()?);
            (vec![Stage::Ingest], None)
        }
        Command::BuildIndex { catalog, out } => {
            set(&mut config.data.catalog, catalog.map(cwd_path).transpose()?);
            if let Some(out) = out {
                config.index = Some(absolute(&out)?);
            }
            (vec![Stage::BuildIndex], None)
        }
        Command::GenQrData => (vec![Stage::GenQrData], None),
        Command::Reformulate { mode } => {
            set(&mut config.modes.query_mode, mode);
            (vec![Stage::Reformulate], None)
        }
        Command::Retrieve { index, k } => {
            if let Some(index) = index {
                config.index = Some(absolute(&index)?);
            }
            set(&mut config.k, k);
            (vec![Stage::Retrieve], None)
        }
        Command::GenGData { negatives, k_train, cot } => {
            set(&mut config.modes.negatives, negatives);
            set(&mut config.k_train, k_train);
            set(&mut config.modes.cot, cot.map(bool::from));
            (vec![Stage::GenGData], None)
        }
        Command::Recommend { cot } => {
            set(&mut config.modes.cot, cot.map(bool::from));
            (vec![Stage::Recommend], None)
        }
        Command::Evaluate { what, k } => {
            set(&mut config.k, k);
            let kinds = if what.is_empty() { EvalKind::DEFAULT.to_vec() } else { what };
            let manifest = run_stages(config, &[Stage::Evaluate], Some(kinds))?;
            return print_reports(&manifest);
        }
        Command::Analyze(Analyze::Distributions { train, infer }) => {
            let out = config.out_dir();
            let train = train.map(cwd_path).transpose()?.unwrap_or_else(|| out.join(G_TRAIN_FILE));
            let infer = infer.map(cwd_path).transpose()?.unwrap_or_else(|| out.join(INFERENCE_PROMPTS_FILE));
            for path in [&train, &infer] {
                if !path.exists() {
                    bail!("{} not found", path.display());
                }
            }
            let train_texts = read_texts(&train)?;
            let infer_texts = read_texts(&infer)?;
            let embedder = Embedder::new(config.embedder.clone())?;
            let divergence = distribution_divergence(&train_texts, &infer_texts, &embedder)?;
            let result = serde_json::json!({
                "train": train,
                "infer": infer,
                "train_texts": train_texts.len(),
                "infer_texts": infer_texts.len(),
                "energy_distance": divergence,
            });
            println!("{}", serde_json::to_string_pretty(&result)?);
            return Ok(());
        }
        Command::Run { stages, modes } => {
            set(&mut config.modes.query_mode, modes.mode);
            set(&mut config.modes.negatives, modes.negatives);
            set(&mut config.modes.cot, modes.cot.map(bool::from));
            set(&mut config.k, modes.k);
            set(&mut config.k_train, modes.k_train);
            let stages = if stages.is_empty() { Stage::ALL.to_vec() } else { stages };
            (stages, None)
        }
        Command::ValidateConfig => unreachable!("handled above"),
    };
    let manifest = run_stages(config, &stages, kinds)?;
    print_summary(&manifest);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
