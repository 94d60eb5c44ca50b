//! Pipeline stages. Every stage reads artifacts written by earlier
//! stages from the run directory and writes its own; the orchestrator
//! in `run_pipeline` records digests so `--resume` can skip stages
//! whose outputs are unchanged.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Serialize;
use ueidg_core::aeg::{make_client, run_aeg, write_aeg_outputs};
use ueidg_core::corpus::ingest::{ingest_corpus, read_jsonl, read_labels, write_jsonl};
use ueidg_core::corpus::synth::synthesize_corpus;
use ueidg_core::corpus::tokenize::Vocab;
use ueidg_core::corpus::{
    query_for_agent_turn, CorpusStore, EvidenceKind, EvidenceLabel, GenerationRow, Passage,
    PredictionRow,
};
use ueidg_core::error::{CoreError, Result};
use ueidg_core::generator::{
    train_generator, EvidenceSource, GeneratorConfig, GeneratorModel,
};
use ueidg_core::indicator::{train_indicator, IndicatorConfig, IndicatorModel};
use ueidg_core::metrics::{evaluate_run, span_exact_match, SpanKey};
use ueidg_core::pipeline::{
    build_generator_examples, build_indicator_examples, predict_evidence,
    resolve_evidence_spans, retrieve_topk_for_turns, split_dialogue_ids, SpanLookup, TopkMap,
};
use ueidg_core::retrieval::bm25::build_bm25_index;
use ueidg_core::retrieval::dense::{build_dense_index, dense_topk, BiEncoder, DenseIndex};
use ueidg_core::retrieval::mining::mine_negatives;
use ueidg_core::retrieval::train::train_retriever;

use crate::config::{resolve_vocab_size, RunConfig};
use crate::manifest::{digest_outputs, outputs_match, RunManifest, StageRecord, StageStatus};

/// Well-known artifact paths inside the run directory.
pub struct Artifacts {
    pub root: PathBuf,
}

impl Artifacts {
    pub fn new(root: &Path) -> Artifacts {
        Artifacts {
            root: root.to_path_buf(),
        }
    }

    pub fn documents(&self) -> PathBuf {
        self.root.join("documents.jsonl")
    }
    pub fn dialogues(&self) -> PathBuf {
        self.root.join("dialogues.jsonl")
    }
    pub fn passages(&self) -> PathBuf {
        self.root.join("passages.jsonl")
    }
    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }
    pub fn labels_gold(&self) -> PathBuf {
        self.root.join("labels.gold.jsonl")
    }
    pub fn labels(&self) -> PathBuf {
        self.root.join("labels.jsonl")
    }
    pub fn aeg_manifest(&self) -> PathBuf {
        self.root.join("aeg_manifest.json")
    }
    pub fn prompts(&self) -> PathBuf {
        self.root.join("prompts.jsonl")
    }
    pub fn retriever_init(&self) -> PathBuf {
        self.root.join("retriever.init.ckpt")
    }
    pub fn dense_init(&self) -> PathBuf {
        self.root.join("dense.init.idx")
    }
    pub fn retriever(&self) -> PathBuf {
        self.root.join("retriever.ckpt")
    }
    pub fn dense(&self) -> PathBuf {
        self.root.join("dense.idx")
    }
    pub fn indicator(&self) -> PathBuf {
        self.root.join("indicator.ckpt")
    }
    pub fn generator(&self) -> PathBuf {
        self.root.join("generator.ckpt")
    }
    pub fn evidence_predictions(&self) -> PathBuf {
        self.root.join("predictions.evidence.jsonl")
    }
    pub fn responses(&self) -> PathBuf {
        self.root.join("predictions.responses.jsonl")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

pub fn load_store(cfg: &RunConfig, arts: &Artifacts) -> Result<CorpusStore> {
    ingest_corpus(&arts.documents(), &arts.dialogues(), &cfg.synth.chunk)
}

pub fn load_vocab(arts: &Artifacts) -> Result<Vocab> {
    if !arts.vocab().exists() {
        return Err(CoreError::InvalidInput(format!(
            "missing {}; run `ueidg chunk` first",
            arts.vocab().display()
        )));
    }
    Vocab::load(&arts.vocab())
}

fn passage_pairs(store: &CorpusStore) -> Result<Vec<(String, String)>> {
    store
        .passages()
        .map(|p| {
            let text = store.passage_text(&p.passage_id).ok_or_else(|| {
                CoreError::Integrity(format!("no text for passage {}", p.passage_id))
            })?;
            Ok((p.passage_id.clone(), text.to_string()))
        })
        .collect()
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CoreError::InvalidInput(format!(
            "missing {}; run `ueidg {produced_by}` first",
            path.display()
        )))
    }
}

/// Refuse to serve queries from an index built by different encoder
/// weights.
fn check_index_fresh(encoder: &BiEncoder, index: &DenseIndex, path: &Path) -> Result<()> {
    if index.encoder_hash != encoder.version_hash() {
        return Err(CoreError::Integrity(format!(
            "dense index {} was built by a different encoder version; rebuild it",
            path.display()
        )));
    }
    Ok(())
}

fn load_trained_retriever(arts: &Artifacts, vocab: &Vocab) -> Result<(BiEncoder, DenseIndex)> {
    require(&arts.retriever(), "train-retriever")?;
    require(&arts.dense(), "train-retriever")?;
    let encoder = BiEncoder::load(&arts.retriever(), vocab.clone())?;
    let index = DenseIndex::load(&arts.dense())?;
    check_index_fresh(&encoder, &index, &arts.dense())?;
    Ok((encoder, index))
}

/// Top-k passages per agent turn from the trained dense retriever.
pub fn trained_topk(cfg: &RunConfig, arts: &Artifacts, store: &CorpusStore) -> Result<TopkMap> {
    let vocab = load_vocab(arts)?;
    let (encoder, index) = load_trained_retriever(arts, &vocab)?;
    let k = cfg.retrieval.k.min(store.n_passages()).max(1);
    let retrieve = |q: &str| -> Result<Vec<String>> {
        Ok(dense_topk(&index, &encoder, q, k)?
            .into_iter()
            .map(|r| r.passage_id)
            .collect())
    };
    retrieve_topk_for_turns(store, &retrieve, k, cfg.context_window)
}

fn train_dialogue_ids(cfg: &RunConfig, store: &CorpusStore) -> Result<BTreeSet<String>> {
    Ok(split_dialogue_ids(store, cfg.n_dev_dialogues, cfg.split_seed())?.0)
}

fn dev_dialogue_ids(cfg: &RunConfig, store: &CorpusStore) -> Result<BTreeSet<String>> {
    Ok(split_dialogue_ids(store, cfg.n_dev_dialogues, cfg.split_seed())?.1)
}

/// Pick the label file for an evidence source: explicit override, else
/// the AEG output, else the gold export. `aeg` refuses the gold-only
/// fallback so a missing AEG run fails loudly instead of silently
/// training on gold.
fn load_labels_for_source(
    cfg: &RunConfig,
    arts: &Artifacts,
    source: EvidenceSource,
) -> Result<Option<Vec<EvidenceLabel>>> {
    let path = match &cfg.labels_file {
        Some(p) => p.clone(),
        None => {
            if arts.labels().exists() {
                arts.labels()
            } else {
                arts.labels_gold()
            }
        }
    };
    if source == EvidenceSource::Aeg && cfg.labels_file.is_none() && !arts.labels().exists() {
        return Err(CoreError::InvalidInput(
            "evidence source 'aeg' needs labels.jsonl; run `ueidg aeg run` first".into(),
        ));
    }
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(read_labels(&path)?))
}

/// Load the indicator model when the evidence source needs one.
fn load_indicator_for_source(
    arts: &Artifacts,
    vocab: &Vocab,
    source: EvidenceSource,
) -> Result<Option<IndicatorModel>> {
    if source != EvidenceSource::Predicted {
        return Ok(None);
    }
    require(&arts.indicator(), "train-indicator")?;
    Ok(Some(IndicatorModel::load(&arts.indicator(), vocab.clone())?))
}

pub fn evidence_spans(
    cfg: &RunConfig,
    arts: &Artifacts,
    store: &CorpusStore,
    topk: &TopkMap,
    source: EvidenceSource,
) -> Result<Option<SpanLookup>> {
    let vocab = load_vocab(arts)?;
    let labels = load_labels_for_source(cfg, arts, source)?;
    let indicator = load_indicator_for_source(arts, &vocab, source)?;
    resolve_evidence_spans(
        store,
        source,
        labels.as_deref(),
        indicator.as_ref(),
        topk,
        cfg.context_window,
    )
}

#[derive(Serialize)]
struct PassageRow<'a> {
    #[serde(flatten)]
    meta: &'a Passage,
    text: &'a str,
}

// ---------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------

pub fn stage_synthesize(cfg: &RunConfig, arts: &Artifacts) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(&arts.root)?;
    synthesize_corpus(&cfg.synth, &arts.documents(), &arts.dialogues())?;
    let store = load_store(cfg, arts)?;
    log::info!(
        "synthesize: {} documents, {} dialogues",
        store.n_documents(),
        store.n_dialogues()
    );
    Ok(vec![arts.documents(), arts.dialogues()])
}

pub fn stage_chunk(cfg: &RunConfig, arts: &Artifacts) -> Result<Vec<PathBuf>> {
    require(&arts.documents(), "synthesize")?;
    let store = load_store(cfg, arts)?;
    let rows: Vec<PassageRow> = store
        .passages()
        .map(|p| {
            let text = store.passage_text(&p.passage_id).ok_or_else(|| {
                CoreError::Integrity(format!("no text for passage {}", p.passage_id))
            })?;
            Ok(PassageRow { meta: p, text })
        })
        .collect::<Result<_>>()?;
    write_jsonl(&arts.passages(), &rows)?;
    write_jsonl(&arts.labels_gold(), &ueidg_core::aeg::gold_labels(&store))?;
    store.build_vocab().save(&arts.vocab())?;
    log::info!(
        "chunk: {} passages from {} documents, vocab {} tokens",
        store.n_passages(),
        store.n_documents(),
        store.build_vocab().len()
    );
    Ok(vec![arts.passages(), arts.labels_gold(), arts.vocab()])
}

pub fn stage_index(cfg: &RunConfig, arts: &Artifacts) -> Result<Vec<PathBuf>> {
    let store = load_store(cfg, arts)?;
    let vocab = load_vocab(arts)?;
    let model = resolve_vocab_size(cfg.retrieval.model.clone(), &vocab);
    let encoder = BiEncoder::new(vocab, model)?;
    encoder.save(&arts.retriever_init())?;
    let index = build_dense_index(&encoder, passage_pairs(&store)?)?;
    index.save(&arts.dense_init())?;
    log::info!(
        "index: embedded {} passages at dim {}",
        index.passage_ids.len(),
        index.dim
    );
    Ok(vec![arts.retriever_init(), arts.dense_init()])
}

pub fn stage_train_retriever(cfg: &RunConfig, arts: &Artifacts) -> Result<Vec<PathBuf>> {
    require(&arts.retriever_init(), "index")?;
    require(&arts.dense_init(), "index")?;
    let store = load_store(cfg, arts)?;
    let vocab = load_vocab(arts)?;
    let encoder = BiEncoder::load(&arts.retriever_init(), vocab)?;
    let dense0 = DenseIndex::load(&arts.dense_init())?;
    check_index_fresh(&encoder, &dense0, &arts.dense_init())?;
    let pairs = passage_pairs(&store)?;
    let bm25 = build_bm25_index(pairs.clone(), cfg.retrieval.k1, cfg.retrieval.b)?;

    let mut examples = Vec::new();
    for (dlg, turn_idx) in store.agent_turns() {
        if dlg.turns[turn_idx].gold_evidence.is_empty() {
            continue;
        }
        let query = query_for_agent_turn(dlg, turn_idx, cfg.context_window)?;
        examples.push(mine_negatives(
            dlg,
            turn_idx,
            &query,
            &encoder,
            &dense0,
            &bm25,
            &cfg.retrieval.mining,
        )?);
    }
    log::info!("train-retriever: {} mined examples", examples.len());
    let texts: BTreeMap<String, String> = pairs.into_iter().collect();
    let losses = train_retriever(&encoder, &examples, &texts, &cfg.retrieval.train)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        log::info!("train-retriever: loss {first:.4} -> {last:.4}");
    }
    encoder.save(&arts.retriever())?;
    let index = build_dense_index(&encoder, passage_pairs(&store)?)?;
    index.save(&arts.dense())?;
    Ok(vec![arts.retriever(), arts.dense()])
}

pub fn stage_aeg(cfg: &RunConfig, arts: &Artifacts) -> Result<Vec<PathBuf>> {
    let store = load_store(cfg, arts)?;
    let vocab = load_vocab(arts)?;
    let (encoder, index) = load_trained_retriever(arts, &vocab)?;
    let k = cfg.aeg.run.k.min(store.n_passages()).max(1);
    let retrieve = |q: &str| -> Result<Vec<String>> {
        Ok(dense_topk(&index, &encoder, q, k)?
            .into_iter()
            .map(|r| r.passage_id)
            .collect())
    };
    let client = make_client(&cfg.aeg.client, cfg.aeg.run.seed)?;
    let outcome = run_aeg(&store, &retrieve, client.as_ref(), &cfg.aeg.run)?;
    write_aeg_outputs(
        &outcome,
        &arts.labels(),
        &arts.aeg_manifest(),
        &arts.prompts(),
    )?;
    log::info!(
        "aeg: {} labels via backend '{}'",
        outcome.labels.len(),
        client.name()
    );
    Ok(vec![arts.labels(), arts.aeg_manifest(), arts.prompts()])
}

pub fn stage_train_indicator(cfg: &RunConfig, arts: &Artifacts) -> Result<Vec<PathBuf>> {
    let store = load_store(cfg, arts)?;
    let vocab = load_vocab(arts)?;
    let labels_path = match &cfg.labels_file {
        Some(p) => p.clone(),
        None if arts.labels().exists() => arts.labels(),
        None => arts.labels_gold(),
    };
    require(&labels_path, "aeg run")?;
    let labels = read_labels(&labels_path)?;
    let topk = trained_topk(cfg, arts, &store)?;
    let train_ids = train_dialogue_ids(cfg, &store)?;
    let examples =
        build_indicator_examples(&store, &labels, &topk, cfg.context_window, Some(&train_ids))?;
    log::info!(
        "train-indicator: {} examples from {} labels ({} training dialogues)",
        examples.len(),
        labels.len(),
        train_ids.len()
    );
    let config = IndicatorConfig {
        model: resolve_vocab_size(cfg.indicator.config.model.clone(), &vocab),
        ..cfg.indicator.config.clone()
    };
    let model = IndicatorModel::new(vocab, config)?;
    train_indicator(&model, &examples, &cfg.indicator.train)?;
    model.save(&arts.indicator())?;
    Ok(vec![arts.indicator()])
}

pub fn stage_train_generator(cfg: &RunConfig, arts: &Artifacts) -> Result<Vec<PathBuf>> {
    let store = load_store(cfg, arts)?;
    let vocab = load_vocab(arts)?;
    let topk = trained_topk(cfg, arts, &store)?;
    let source = cfg.generator.evidence_source;
    let spans = evidence_spans(cfg, arts, &store, &topk, source)?;
    let train_ids = train_dialogue_ids(cfg, &store)?;
    let config = GeneratorConfig {
        model: resolve_vocab_size(cfg.generator.config.model.clone(), &vocab),
        ..cfg.generator.config.clone()
    };
    let examples = build_generator_examples(
        &store,
        &topk,
        spans.as_ref(),
        &vocab,
        config.model.max_seq_len,
        cfg.context_window,
        Some(&train_ids),
    )?;
    log::info!(
        "train-generator: {} examples, evidence source '{source}'",
        examples.len()
    );
    let model = GeneratorModel::new(vocab, config)?;
    train_generator(&model, &examples, &cfg.generator.train)?;
    model.save(&arts.generator())?;
    Ok(vec![arts.generator()])
}

pub fn stage_generate(cfg: &RunConfig, arts: &Artifacts) -> Result<Vec<PathBuf>> {
    require(&arts.generator(), "train-generator")?;
    let store = load_store(cfg, arts)?;
    let vocab = load_vocab(arts)?;
    let topk = trained_topk(cfg, arts, &store)?;
    let source = cfg.generator.evidence_source;
    let dev_ids = dev_dialogue_ids(cfg, &store)?;
    let mut outputs = vec![arts.responses()];

    // With predicted evidence, persist the span predictions for the
    // generated turns so evaluation can score span exact match.
    let spans = if source == EvidenceSource::Predicted {
        let indicator = load_indicator_for_source(arts, &vocab, source)?
            .expect("predicted source loads an indicator");
        let mut rows = predict_evidence(&store, &indicator, &topk, cfg.context_window)?;
        rows.retain(|r| dev_ids.contains(&r.dial_id));
        write_jsonl(&arts.evidence_predictions(), &rows)?;
        outputs.push(arts.evidence_predictions());
        Some(ueidg_core::pipeline::spans_from_predictions(&rows))
    } else {
        evidence_spans(cfg, arts, &store, &topk, source)?
    };

    let model = GeneratorModel::load(&arts.generator(), vocab.clone())?;
    let examples = build_generator_examples(
        &store,
        &topk,
        spans.as_ref(),
        &vocab,
        model.config.model.max_seq_len,
        cfg.context_window,
        Some(&dev_ids),
    )?;
    let mut rows = Vec::with_capacity(examples.len());
    for ex in &examples {
        rows.push(GenerationRow {
            dial_id: ex.dial_id.clone(),
            turn_index: ex.turn_index,
            response: model.generate(&ex.inputs)?,
        });
    }
    write_jsonl(&arts.responses(), &rows)?;
    log::info!(
        "generate: {} responses over {} held-out dialogues (evidence source '{source}')",
        rows.len(),
        dev_ids.len()
    );
    Ok(outputs)
}

pub fn stage_evaluate(cfg: &RunConfig, arts: &Artifacts) -> Result<Vec<PathBuf>> {
    require(&arts.responses(), "generate")?;
    let store = load_store(cfg, arts)?;
    let rows: Vec<GenerationRow> = read_jsonl(&arts.responses())?;
    let mut report = evaluate_run(&rows, &store)?;
    if arts.evidence_predictions().exists() {
        let preds: Vec<PredictionRow> = read_jsonl(&arts.evidence_predictions())?;
        report.span_exact_match = Some(evidence_em(&rows, &preds, arts)?);
    }
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(arts.report(), text)?;
    log::info!(
        "evaluate: token_f1 {:.4}, bleu {:.2}, rouge_l {:.4} over {} responses",
        report.token_f1,
        report.sacre_bleu,
        report.rouge_l,
        report.n_examples
    );
    Ok(vec![arts.report()])
}

/// Span exact match over the generated turns: predicted span set vs the
/// gold span set per turn.
fn evidence_em(
    rows: &[GenerationRow],
    preds: &[PredictionRow],
    arts: &Artifacts,
) -> Result<f64> {
    require(&arts.labels_gold(), "chunk")?;
    let gold = read_labels(&arts.labels_gold())?;
    let mut pred_sets: BTreeMap<(String, usize), BTreeSet<SpanKey>> = BTreeMap::new();
    for p in preds {
        pred_sets
            .entry((p.dial_id.clone(), p.turn_index))
            .or_default()
            .insert((p.passage_id.clone(), p.span_start, p.span_end));
    }
    let mut gold_sets: BTreeMap<(String, usize), BTreeSet<SpanKey>> = BTreeMap::new();
    for g in &gold {
        if g.kind != EvidenceKind::Gold {
            continue;
        }
        gold_sets
            .entry((g.dial_id.clone(), g.turn_index))
            .or_default()
            .insert((g.passage_id.clone(), g.span_start, g.span_end));
    }
    let turns: Vec<(BTreeSet<SpanKey>, BTreeSet<SpanKey>)> = rows
        .iter()
        .map(|r| {
            let key = (r.dial_id.clone(), r.turn_index);
            (
                pred_sets.get(&key).cloned().unwrap_or_default(),
                gold_sets.get(&key).cloned().unwrap_or_default(),
            )
        })
        .collect();
    Ok(span_exact_match(&turns))
}

// ---------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------

type StageFn = fn(&RunConfig, &Artifacts) -> Result<Vec<PathBuf>>;

pub const STAGES: [(&str, StageFn); 9] = [
    ("synthesize", stage_synthesize),
    ("chunk", stage_chunk),
    ("index", stage_index),
    ("train-retriever", stage_train_retriever),
    ("aeg", stage_aeg),
    ("train-indicator", stage_train_indicator),
    ("train-generator", stage_train_generator),
    ("generate", stage_generate),
    ("evaluate", stage_evaluate),
];

/// Run every stage in order, recording one manifest entry per stage.
/// With `resume`, a stage is skipped while no earlier stage has re-run
/// and its recorded outputs still match on disk; the first re-run
/// invalidates everything downstream. A failing stage is recorded in
/// the manifest before the error propagates.
pub fn run_pipeline(cfg: &RunConfig, arts: &Artifacts, resume: bool) -> Result<()> {
    std::fs::create_dir_all(&arts.root)?;
    let prior = if resume {
        RunManifest::load(&arts.manifest())
    } else {
        None
    };
    let mut manifest = RunManifest::new(cfg);
    let mut upstream_rerun = false;
    for (name, stage) in STAGES {
        if !upstream_rerun {
            if let Some(rec) = prior.as_ref().and_then(|m| m.stage(name)) {
                if rec.status != StageStatus::Failed && outputs_match(rec, &arts.root) {
                    log::info!("stage {name}: skipped (outputs unchanged)");
                    manifest.stages.push(StageRecord {
                        name: name.into(),
                        status: StageStatus::Skipped,
                        duration_ms: 0,
                        outputs: rec.outputs.clone(),
                        error: None,
                    });
                    manifest.write(&arts.manifest())?;
                    continue;
                }
            }
        }
        upstream_rerun = true;
        log::info!("stage {name}: running");
        let t0 = std::time::Instant::now();
        match stage(cfg, arts) {
            Ok(outputs) => {
                let duration_ms = t0.elapsed().as_millis() as u64;
                let outputs = digest_outputs(&arts.root, &outputs)?;
                manifest.stages.push(StageRecord {
                    name: name.into(),
                    status: StageStatus::Completed,
                    duration_ms,
                    outputs,
                    error: None,
                });
                manifest.write(&arts.manifest())?;
                log::info!("stage {name}: completed in {duration_ms} ms");
            }
            Err(e) => {
                manifest.stages.push(StageRecord {
                    name: name.into(),
                    status: StageStatus::Failed,
                    duration_ms: t0.elapsed().as_millis() as u64,
                    outputs: BTreeMap::new(),
                    error: Some(e.to_string()),
                });
                manifest.write(&arts.manifest())?;
                return Err(e);
            }
        }
    }
    Ok(())
}
