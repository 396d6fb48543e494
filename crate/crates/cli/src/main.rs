mod analysis;
mod backend;
mod config;
mod dataset;
mod dialogue;
mod group;
mod output;

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use emosim::emotion::LabelPool;
use emosim::templates::TemplateRegistry;
use emosim::{Engine, GenerationSettings};

use backend::BackendFlags;
use config::Loaded;
use output::RunDir;

/// Emotion-aware dialogue and group discussion simulator.
#[derive(Parser)]
#[command(name = "emosim", version)]
struct Cli {
    /// Upper bound on concurrent model requests.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Answer every request from this cassette instead of the configured backend.
    #[arg(long, global = true, conflicts_with = "record")]
    cassette: Option<PathBuf>,
    /// Write every exchange to this new cassette.
    #[arg(long, global = true)]
    record: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `<output_dir>/<timestamp>-<hash>`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Continue fixed-context conversations under each self-emotion mode.
    SimulateDialogue(RunArgs),
    /// Run baseline and self-emotion group discussions.
    SimulateGroup(RunArgs),
    /// Score dialogue results against annotated cases.
    Evaluate {
        /// transcripts.jsonl from simulate-dialogue.
        #[arg(long)]
        results: PathBuf,
        /// Cases JSONL with annotated strategies.
        #[arg(long)]
        annotations: PathBuf,
        /// Also write report.txt and report.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decision change rates and discussion statistics.
    AnalyzeChanges {
        /// paired_runs.jsonl from simulate-group.
        #[arg(long)]
        paired_runs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Ask the model configured here whether decisions that differ only in
        /// wording are the same.
        #[arg(long)]
        judge: Option<PathBuf>,
    },
    /// Build seq2seq training files from EmpatheticDialogues-style CSV.
    ExportDataset(RunArgs),
}

/// A loaded config, its engine and the run directory outputs go to.
pub struct Session {
    pub loaded: Loaded,
    pub engine: Engine,
    pub run: RunDir,
    pub jobs: usize,
}

impl Session {
    fn open(args: &RunArgs, flags: &BackendFlags) -> Result<Session> {
        let loaded = config::load(&args.config)?;
        let engine = build_engine(&loaded, flags)?;
        let c = &loaded.config;
        let root = loaded.resolve(&c.output_dir);
        let run = RunDir::create(args.run_dir.as_deref(), &root, &loaded.hash, c.seed)?;
        run.write_snapshot(&loaded.snapshot)?;
        tracing::info!(dir = %run.path.display(), hash = %loaded.hash, "run started");
        Ok(Session {
            loaded,
            engine,
            run,
            jobs: flags.jobs.max(1),
        })
    }
}

/// The engine a config describes: backend, generation settings, labels and templates.
pub fn build_engine(loaded: &Loaded, flags: &BackendFlags) -> Result<Engine> {
    let c = &loaded.config;
    let backend_cfg = backend::resolve_paths(&c.backend, &loaded.base_dir);
    let backend = backend::build(&backend_cfg, flags)?;
    let mut engine = Engine::new(backend).with_settings(GenerationSettings {
        model: c.backend.model_name.clone(),
        temperature: c.generation.temperature as f32,
        judge_temperature: c.generation.judge_temperature as f32,
        max_tokens: c.generation.max_tokens,
    });
    if let Some(p) = &c.label_pool_path {
        engine = engine.with_labels(LabelPool::load(&loaded.resolve(p)).context("label pool")?);
    }
    if let Some(p) = &c.template_dir {
        engine = engine.with_templates(TemplateRegistry::load_dir(&loaded.resolve(p)).context("templates")?);
    }
    Ok(engine)
}

fn run(cli: Cli) -> Result<()> {
    let flags = BackendFlags {
        cassette: cli.cassette,
        record: cli.record,
        jobs: cli.jobs,
    };
    match cli.command {
        Command::SimulateDialogue(a) => dialogue::run(&Session::open(&a, &flags)?),
        Command::SimulateGroup(a) => group::run(&Session::open(&a, &flags)?),
        Command::ExportDataset(a) => dataset::run(&Session::open(&a, &flags)?),
        Command::Evaluate {
            results,
            annotations,
            out,
        } => analysis::evaluate(&results, &annotations, out.as_deref()),
        Command::AnalyzeChanges {
            paired_runs,
            out,
            judge,
        } => {
            let engine = match judge {
                Some(path) => Some(build_engine(&config::load(&path)?, &flags)?),
                None => None,
            };
            analysis::analyze_changes(&paired_runs, out.as_deref(), engine.as_ref())
        }
    }
}

fn report_error(err: &anyhow::Error) {
    let chain: Vec<String> = err.chain().map(|e| e.to_string()).collect();
    let body = serde_json::json!({ "error": err.to_string(), "causes": &chain[1..] });
    eprintln!("{body}");
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("EMOSIM_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::from(1)
        }
    }
}
