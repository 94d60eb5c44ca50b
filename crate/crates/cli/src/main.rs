//! `ueidg`: retrieval, labeling, training, generation, and evaluation
//! for the evidence-grounded dialogue pipeline. One JSON config file
//! drives everything; subcommand flags override individual fields.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 internal
//! failure (I/O, corrupted artifacts, transport).

mod config;
mod manifest;
mod stages;

use std::collections::BTreeSet;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use ueidg_core::aeg::LlmBackend;
use ueidg_core::corpus::ingest::{export_corpus, ingest_corpus, read_jsonl, write_jsonl};
use ueidg_core::corpus::{EvidenceKind, GenerationRow};
use ueidg_core::error::{CoreError, Result};
use ueidg_core::generator::{EvidenceSource, GeneratorModel};
use ueidg_core::indicator::IndicatorModel;
use ueidg_core::metrics::evaluate_run;
use ueidg_core::pipeline::{build_generator_examples, predict_evidence};

use config::RunConfig;
use stages::Artifacts;

#[derive(Parser)]
#[command(
    name = "ueidg",
    version,
    about = "Desk-scale evidence-grounded dialogue pipeline"
)]
struct Cli {
    /// Run configuration (JSON). Required by every subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Override the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic document and dialogue corpus.
    Synthesize,
    /// Validate external corpus files and import them into the run directory.
    Ingest {
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        dialogues: PathBuf,
    },
    /// Chunk documents into passages and export gold evidence labels.
    Chunk,
    /// Build the BM25-compatible passage list and the initial dense index.
    Index,
    /// Mine hard negatives and train the dense retriever.
    TrainRetriever,
    /// Automatic evidence generation.
    #[command(subcommand)]
    Aeg(AegCommand),
    /// Train the evidence indicator on gold plus mined labels.
    TrainIndicator {
        /// Label file to train on (default: labels.jsonl from `aeg run`).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Train on gold labels only (the ablation run).
        #[arg(long)]
        no_aeg: bool,
    },
    /// Write indicator span predictions for every agent turn.
    PredictEvidence {
        /// Indicator checkpoint (default: indicator.ckpt in the run directory).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the evidence-aware generator.
    TrainGenerator {
        /// Evidence source: none, predicted, aeg, or gold.
        #[arg(long)]
        evidence_source: Option<String>,
        /// Retrieved passages per turn.
        #[arg(short, long)]
        k: Option<usize>,
    },
    /// Decode responses for the held-out dialogues, or one turn with --dial.
    Generate {
        /// Decode a single dialogue instead of the held-out split.
        #[arg(long)]
        dial: Option<String>,
        /// Agent turn index within --dial.
        #[arg(long)]
        turn: Option<usize>,
        /// Evidence source: none, predicted, aeg, or gold.
        #[arg(long)]
        evidence_source: Option<String>,
    },
    /// Score generated responses against the gold agent turns.
    Evaluate {
        /// Predictions file (default: predictions.responses.jsonl).
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Directory holding documents.jsonl and dialogues.jsonl
        /// (default: the run directory).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Report destination (default: report.json in the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage in order, recording a manifest.
    Pipeline {
        /// Skip stages whose recorded outputs are unchanged.
        #[arg(long)]
        resume: bool,
    },
    /// Print corpus and label counts for the run directory.
    Stats,
}

#[derive(Subcommand)]
enum AegCommand {
    /// Label evidence for every agent turn via the configured LLM backend.
    Run {
        /// LLM backend: mock or http.
        #[arg(long)]
        backend: Option<String>,
        /// Candidate passages retrieved per turn.
        #[arg(long)]
        k: Option<usize>,
    },
}

fn parse_source(text: &str) -> Result<EvidenceSource> {
    text.parse::<EvidenceSource>()
}

fn parse_backend(text: &str) -> Result<LlmBackend> {
    match text {
        "mock" => Ok(LlmBackend::Mock),
        "http" => Ok(LlmBackend::Http),
        other => Err(CoreError::InvalidInput(format!(
            "unknown backend '{other}' (expected 'mock' or 'http')"
        ))),
    }
}

/// Fold subcommand flags into the run configuration; flags win.
fn apply_overrides(cfg: &mut RunConfig, command: &Command) -> Result<()> {
    match command {
        Command::Aeg(AegCommand::Run { backend, k }) => {
            if let Some(b) = backend {
                cfg.aeg.client.backend = parse_backend(b)?;
            }
            if let Some(k) = k {
                cfg.aeg.run.k = *k;
            }
        }
        Command::TrainIndicator { labels, no_aeg } => {
            if labels.is_some() {
                cfg.labels_file.clone_from(labels);
            }
            if *no_aeg {
                cfg.indicator.train.use_aeg_labels = false;
            }
        }
        Command::TrainGenerator {
            evidence_source,
            k,
        } => {
            if let Some(s) = evidence_source {
                cfg.generator.evidence_source = parse_source(s)?;
            }
            if let Some(k) = k {
                cfg.retrieval.k = *k;
            }
        }
        Command::Generate {
            evidence_source, ..
        } => {
            if let Some(s) = evidence_source {
                cfg.generator.evidence_source = parse_source(s)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn dispatch(cfg: &RunConfig, arts: &Artifacts, command: &Command) -> Result<()> {
    match command {
        Command::Synthesize => {
            let outputs = stages::stage_synthesize(cfg, arts)?;
            print_outputs(&outputs);
        }
        Command::Ingest { docs, dialogues } => {
            let store = ingest_corpus(docs, dialogues, &cfg.synth.chunk)?;
            std::fs::create_dir_all(&arts.root)?;
            export_corpus(&store, &arts.documents(), &arts.dialogues())?;
            println!(
                "ingested {} documents, {} dialogues ({} passages) into {}",
                store.n_documents(),
                store.n_dialogues(),
                store.n_passages(),
                arts.root.display()
            );
        }
        Command::Chunk => {
            let outputs = stages::stage_chunk(cfg, arts)?;
            print_outputs(&outputs);
        }
        Command::Index => {
            let outputs = stages::stage_index(cfg, arts)?;
            print_outputs(&outputs);
        }
        Command::TrainRetriever => {
            let outputs = stages::stage_train_retriever(cfg, arts)?;
            print_outputs(&outputs);
        }
        Command::Aeg(AegCommand::Run { .. }) => {
            let outputs = stages::stage_aeg(cfg, arts)?;
            print_outputs(&outputs);
        }
        Command::TrainIndicator { .. } => {
            let outputs = stages::stage_train_indicator(cfg, arts)?;
            print_outputs(&outputs);
        }
        Command::PredictEvidence { checkpoint } => {
            cmd_predict_evidence(cfg, arts, checkpoint.as_deref())?;
        }
        Command::TrainGenerator { .. } => {
            let outputs = stages::stage_train_generator(cfg, arts)?;
            print_outputs(&outputs);
        }
        Command::Generate { dial, turn, .. } => match (dial, turn) {
            (Some(dial), Some(turn)) => cmd_generate_one(cfg, arts, dial, *turn)?,
            (Some(_), None) => {
                return Err(CoreError::InvalidInput(
                    "--dial requires --turn <AGENT_TURN_INDEX>".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(CoreError::InvalidInput(
                    "--turn requires --dial <DIAL_ID>".into(),
                ))
            }
            (None, None) => {
                let outputs = stages::stage_generate(cfg, arts)?;
                print_outputs(&outputs);
            }
        },
        Command::Evaluate { pred, corpus, out } => {
            cmd_evaluate(cfg, arts, pred.as_deref(), corpus.as_deref(), out.as_deref())?;
        }
        Command::Pipeline { resume } => {
            stages::run_pipeline(cfg, arts, *resume)?;
            println!("pipeline complete; manifest at {}", arts.manifest().display());
        }
        Command::Stats => cmd_stats(cfg, arts)?,
    }
    Ok(())
}

fn print_outputs(outputs: &[PathBuf]) {
    for path in outputs {
        println!("wrote {}", path.display());
    }
}

fn cmd_predict_evidence(
    cfg: &RunConfig,
    arts: &Artifacts,
    checkpoint: Option<&std::path::Path>,
) -> Result<()> {
    let store = stages::load_store(cfg, arts)?;
    let vocab = stages::load_vocab(arts)?;
    let path = checkpoint
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| arts.indicator());
    if !path.exists() {
        return Err(CoreError::InvalidInput(format!(
            "missing indicator checkpoint {}; run `ueidg train-indicator` first",
            path.display()
        )));
    }
    let model = IndicatorModel::load(&path, vocab)?;
    let topk = stages::trained_topk(cfg, arts, &store)?;
    let rows = predict_evidence(&store, &model, &topk, cfg.context_window)?;
    write_jsonl(&arts.evidence_predictions(), &rows)?;
    println!(
        "wrote {} span predictions to {}",
        rows.len(),
        arts.evidence_predictions().display()
    );
    Ok(())
}

fn cmd_generate_one(cfg: &RunConfig, arts: &Artifacts, dial: &str, turn: usize) -> Result<()> {
    let store = stages::load_store(cfg, arts)?;
    let vocab = stages::load_vocab(arts)?;
    let topk = stages::trained_topk(cfg, arts, &store)?;
    let source = cfg.generator.evidence_source;
    let spans = stages::evidence_spans(cfg, arts, &store, &topk, source)?;
    let model = GeneratorModel::load(&arts.generator(), vocab.clone())?;
    let only: BTreeSet<String> = std::iter::once(dial.to_string()).collect();
    let examples = build_generator_examples(
        &store,
        &topk,
        spans.as_ref(),
        &vocab,
        model.config.model.max_seq_len,
        cfg.context_window,
        Some(&only),
    )?;
    let ex = examples
        .iter()
        .find(|e| e.turn_index == turn)
        .ok_or_else(|| {
            CoreError::InvalidInput(format!("no agent turn {turn} in dialogue '{dial}'"))
        })?;
    println!("{}", model.generate(&ex.inputs)?);
    Ok(())
}

fn cmd_evaluate(
    cfg: &RunConfig,
    arts: &Artifacts,
    pred: Option<&std::path::Path>,
    corpus: Option<&std::path::Path>,
    out: Option<&std::path::Path>,
) -> Result<()> {
    let store = match corpus {
        Some(dir) => ingest_corpus(
            &dir.join("documents.jsonl"),
            &dir.join("dialogues.jsonl"),
            &cfg.synth.chunk,
        )?,
        None => stages::load_store(cfg, arts)?,
    };
    let pred_path = pred
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| arts.responses());
    let rows: Vec<GenerationRow> = read_jsonl(&pred_path)?;
    let report = evaluate_run(&rows, &store)?;
    let out_path = out.map(|p| p.to_path_buf()).unwrap_or_else(|| arts.report());
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(&out_path, text)?;
    println!(
        "token_f1 {:.4}  bleu {:.2}  rouge_l {:.4}  ({} responses) -> {}",
        report.token_f1,
        report.sacre_bleu,
        report.rouge_l,
        report.n_examples,
        out_path.display()
    );
    Ok(())
}

fn cmd_stats(cfg: &RunConfig, arts: &Artifacts) -> Result<()> {
    let store = stages::load_store(cfg, arts)?;
    println!("documents:   {}", store.n_documents());
    println!("passages:    {}", store.n_passages());
    println!("dialogues:   {}", store.n_dialogues());
    println!("agent turns: {}", store.agent_turns().len());
    for (label, path) in [
        ("gold labels", arts.labels_gold()),
        ("aeg labels", arts.labels()),
    ] {
        if !path.exists() {
            continue;
        }
        let labels = ueidg_core::corpus::ingest::read_labels(&path)?;
        let count = |k: EvidenceKind| labels.iter().filter(|l| l.kind == k).count();
        println!(
            "{label}: {} (gold {}, current {}, historical {})",
            labels.len(),
            count(EvidenceKind::Gold),
            count(EvidenceKind::CurrentRelated),
            count(EvidenceKind::HistoricalRelated),
        );
    }
    Ok(())
}

fn exit_code(e: &CoreError) -> i32 {
    match e {
        CoreError::InvalidInput(_) | CoreError::Parse { .. } | CoreError::Schema(_) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    let Some(config_path) = cli.config else {
        return Err(CoreError::InvalidInput(
            "missing required flag --config <FILE>".into(),
        ));
    };
    let mut cfg = RunConfig::load(&config_path)?;
    if let Some(dir) = cli.out_dir {
        cfg.out_dir = dir;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    apply_overrides(&mut cfg, &cli.command)?;
    let cfg = cfg.with_derived_seeds();
    let arts = Artifacts::new(&cfg.out_dir);
    dispatch(&cfg, &arts, &cli.command)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let kind = e.kind();
            let _ = e.print();
            let code = match kind {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            std::process::exit(code);
        }
    };
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    std::process::exit(code);
}
