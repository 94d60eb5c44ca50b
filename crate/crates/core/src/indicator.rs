//! Evidence indicator: a bidirectional encoder with start/end span scoring
//! over `{passage positions} ∪ {[CLS]}`, where [CLS] is the no-evidence
//! class. Each retrieved passage is scored independently.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use ueidg_nn::{
    backward, load_checkpoint_config, load_checkpoint_into, no_grad, save_checkpoint, Adam,
    AdamConfig, ModelConfig, ParamBuilder, ParamSet, Real, Tensor, TransformerEncoder,
};

use crate::corpus::tokenize::{tokenize_with_offsets, Vocab};
use crate::corpus::EvidenceKind;
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IndicatorConfig {
    pub model: ModelConfig,
    /// Maximum evidence span length in tokens (`end - start < max_span_tokens`).
    pub max_span_tokens: usize,
    /// No-evidence margin: predict NO_EVIDENCE when the [CLS] score beats
    /// the best span score by at least this much.
    pub null_threshold: f64,
}

impl Default for IndicatorConfig {
    fn default() -> Self {
        IndicatorConfig {
            model: ModelConfig::default(),
            max_span_tokens: 64,
            null_threshold: 0.0,
        }
    }
}

/// Encoded `[CLS] context ⊕ query [SEP] passage [SEP]` sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedIndicatorInput {
    pub ids: Vec<usize>,
    /// Sequence positions holding passage tokens, ascending.
    pub passage_positions: Vec<usize>,
    /// [CLS] position (always 0; kept explicit for clarity).
    pub cls_pos: usize,
    /// Char offsets into the passage text, aligned with `passage_positions`.
    pub token_chars: Vec<(usize, usize)>,
}

/// Start/end probabilities over passage-local token indices, plus the
/// [CLS] (no-evidence) mass. Context and query positions carry exactly
/// zero probability by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanDistribution {
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
    pub p_start_cls: f64,
    pub p_end_cls: f64,
}

/// A chosen token span with resolved char offsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokSpan {
    pub start_tok: usize,
    pub end_tok: usize,
    pub char_start: usize,
    pub char_end: usize,
}

/// Per-passage prediction; `span: None` means NO_EVIDENCE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub passage_id: String,
    pub span: Option<TokSpan>,
    pub score: f64,
}

/// Training target for one (turn, passage) pair: a passage-local token
/// span, or no evidence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpanTarget {
    Span { start_tok: usize, end_tok: usize },
    NoEvidence,
}

/// Encode one indicator input. Context (oldest turns first) is truncated
/// from the front so the layout always fits `max_seq_len`.
pub fn encode_indicator_input(
    context: &str,
    query: &str,
    passage: &str,
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<EncodedIndicatorInput> {
    let psg_tokens = tokenize_with_offsets(passage);
    // [CLS] + cq + [SEP] + passage + [SEP]
    let overhead = 3;
    if psg_tokens.len() + overhead > max_seq_len {
        return Err(CoreError::InvalidInput(format!(
            "passage of {} tokens cannot fit max_seq_len {} (chunk smaller upstream)",
            psg_tokens.len(),
            max_seq_len
        )));
    }
    let mut cq: Vec<usize> = Vec::new();
    for part in [context, query] {
        if !part.is_empty() {
            cq.extend(vocab.encode(part));
        }
    }
    let budget = max_seq_len - overhead - psg_tokens.len();
    if cq.len() > budget {
        cq.drain(..cq.len() - budget);
    }

    let mut ids = Vec::with_capacity(overhead + cq.len() + psg_tokens.len());
    ids.push(vocab.cls_id());
    ids.extend(&cq);
    ids.push(vocab.sep_id());
    let first_psg = ids.len();
    let mut token_chars = Vec::with_capacity(psg_tokens.len());
    for t in &psg_tokens {
        ids.push(vocab.id(&t.text));
        token_chars.push((t.start, t.end));
    }
    ids.push(vocab.sep_id());
    Ok(EncodedIndicatorInput {
        ids,
        passage_positions: (first_psg..first_psg + psg_tokens.len()).collect(),
        cls_pos: 0,
        token_chars,
    })
}

/// Start/end logit rows (`1 x (m+1)`, [CLS] last) from hidden states.
/// Shared by the f32 model and the f64 gradient-check path.
pub fn span_logit_rows_from_hidden<T: Real>(
    hidden: &Tensor<T>,
    start_vec: &Tensor<T>,
    end_vec: &Tensor<T>,
    passage_positions: &[usize],
    cls_pos: usize,
) -> (Tensor<T>, Tensor<T>) {
    let mut allowed: Vec<usize> = passage_positions.to_vec();
    allowed.push(cls_pos);
    let rows = hidden.gather_rows(&allowed); // (m+1) x d
    let s = rows.matmul(start_vec).transpose(); // 1 x (m+1)
    let e = rows.matmul(end_vec).transpose();
    (s, e)
}

/// Span NLL: `-0.5 (ln p_start[i] + ln p_end[j])`; NO_EVIDENCE targets the
/// [CLS] slot (last column) for both ends.
pub fn indicator_loss<T: Real>(
    logits_start: &Tensor<T>,
    logits_end: &Tensor<T>,
    target: SpanTarget,
) -> Result<Tensor<T>> {
    let cols = logits_start.cols();
    debug_assert_eq!(cols, logits_end.cols());
    let m = cols - 1; // passage positions (CLS occupies the last slot)
    let (ti, tj) = match target {
        SpanTarget::Span { start_tok, end_tok } => {
            if start_tok > end_tok || end_tok >= m {
                return Err(CoreError::InvalidInput(format!(
                    "span target {start_tok}..={end_tok} outside passage region of {m} tokens"
                )));
            }
            (start_tok, end_tok)
        }
        SpanTarget::NoEvidence => (m, m),
    };
    let ls = logits_start.cross_entropy_rows(&[ti], None);
    let le = logits_end.cross_entropy_rows(&[tj], None);
    Ok(ls.add(&le).scale(T::from_f64(0.5)))
}

/// Best span under the product score with SQuAD-2-style null handling.
/// Ties break toward the smallest start then smallest end.
pub fn predict_span(
    dist: &SpanDistribution,
    max_span_tokens: usize,
    null_threshold: f64,
) -> (Option<(usize, usize)>, f64) {
    let m = dist.p_start.len();
    let mut best: Option<(usize, usize)> = None;
    let mut best_score = f64::NEG_INFINITY;
    for i in 0..m {
        let hi = (i + max_span_tokens).min(m);
        for j in i..hi {
            let s = dist.p_start[i] * dist.p_end[j];
            if s > best_score {
                best_score = s;
                best = Some((i, j));
            }
        }
    }
    let null_score = dist.p_start_cls * dist.p_end_cls;
    match best {
        Some(span) if null_score < best_score + null_threshold => (Some(span), best_score),
        _ => (None, null_score),
    }
}

pub struct IndicatorModel {
    pub vocab: Vocab,
    pub config: IndicatorConfig,
    pub params: ParamSet<f32>,
    encoder: TransformerEncoder<f32>,
    start_vec: Tensor<f32>,
    end_vec: Tensor<f32>,
}

impl IndicatorModel {
    pub fn new(vocab: Vocab, config: IndicatorConfig) -> Result<IndicatorModel> {
        config.model.validate().map_err(CoreError::Nn)?;
        if config.model.vocab_size < vocab.len() {
            return Err(CoreError::InvalidInput(format!(
                "indicator vocab_size {} smaller than vocabulary ({} tokens)",
                config.model.vocab_size,
                vocab.len()
            )));
        }
        if config.max_span_tokens == 0 {
            return Err(CoreError::InvalidInput("max_span_tokens must be >= 1".into()));
        }
        let mut pb = ParamBuilder::new(config.model.seed);
        let encoder = TransformerEncoder::new(&mut pb, "ind", &config.model);
        let start_vec = pb.xavier("ind.span.start", config.model.d_model, 1);
        let end_vec = pb.xavier("ind.span.end", config.model.d_model, 1);
        Ok(IndicatorModel {
            vocab,
            config,
            params: pb.finish(),
            encoder,
            start_vec,
            end_vec,
        })
    }

    pub fn encode(&self, context: &str, query: &str, passage: &str) -> Result<EncodedIndicatorInput> {
        encode_indicator_input(context, query, passage, &self.vocab, self.config.model.max_seq_len)
    }

    /// Tracked start/end logit rows (`1 x (m+1)`, [CLS] last).
    pub fn span_logit_rows(&self, enc: &EncodedIndicatorInput) -> (Tensor<f32>, Tensor<f32>) {
        let hidden = self.encoder.forward(&enc.ids);
        span_logit_rows_from_hidden(
            &hidden,
            &self.start_vec,
            &self.end_vec,
            &enc.passage_positions,
            enc.cls_pos,
        )
    }

    /// Untracked probabilities over passage positions + [CLS].
    pub fn span_distribution(&self, enc: &EncodedIndicatorInput) -> SpanDistribution {
        let _guard = no_grad();
        let (ls, le) = self.span_logit_rows(enc);
        let ps: Vec<f64> = ls.softmax_rows().to_vec().iter().map(|&v| v as f64).collect();
        let pe: Vec<f64> = le.softmax_rows().to_vec().iter().map(|&v| v as f64).collect();
        let m = ps.len() - 1;
        SpanDistribution {
            p_start: ps[..m].to_vec(),
            p_end: pe[..m].to_vec(),
            p_start_cls: ps[m],
            p_end_cls: pe[m],
        }
    }

    /// Predict one span (or NO_EVIDENCE) for a single passage.
    pub fn predict_passage(
        &self,
        context: &str,
        query: &str,
        passage_id: &str,
        passage: &str,
    ) -> Result<SpanPrediction> {
        let enc = self.encode(context, query, passage)?;
        let dist = self.span_distribution(&enc);
        let (span, score) = predict_span(&dist, self.config.max_span_tokens, self.config.null_threshold);
        Ok(SpanPrediction {
            passage_id: passage_id.to_string(),
            span: span.map(|(i, j)| TokSpan {
                start_tok: i,
                end_tok: j,
                char_start: enc.token_chars[i].0,
                char_end: enc.token_chars[j].1,
            }),
            score,
        })
    }

    /// Independent per-passage predictions; NO_EVIDENCE entries are
    /// excluded from the returned evidence set E.
    pub fn predict_evidence_set(
        &self,
        context: &str,
        query: &str,
        passages: &[(String, String)],
    ) -> Result<Vec<SpanPrediction>> {
        let mut out = Vec::new();
        for (pid, text) in passages {
            let pred = self.predict_passage(context, query, pid, text)?;
            if pred.span.is_some() {
                out.push(pred);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.config, &self.params).map_err(CoreError::Nn)
    }

    pub fn load(path: &Path, vocab: Vocab) -> Result<IndicatorModel> {
        let config: IndicatorConfig = load_checkpoint_config(path).map_err(CoreError::Nn)?;
        let model = IndicatorModel::new(vocab, config)?;
        load_checkpoint_into::<f32, IndicatorConfig>(path, &model.params).map_err(CoreError::Nn)?;
        Ok(model)
    }
}

/// One training example, already resolved to a token-level target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndicatorExample {
    pub dial_id: String,
    pub turn_index: usize,
    pub context: String,
    pub query: String,
    pub passage_id: String,
    pub passage_text: String,
    pub target: SpanTarget,
    /// Label kind behind a span target; `None` for NO_EVIDENCE examples.
    pub kind: Option<EvidenceKind>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct IndicatorTrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Loss weight for NO_EVIDENCE examples.
    pub null_weight: f64,
    /// Train on AEG-mined span examples too; turning this off removes
    /// exactly the current/historical-kind examples (the ablation run).
    pub use_aeg_labels: bool,
    /// Shuffling seed (model init comes from the model config seed).
    pub seed: u64,
    pub log_every: usize,
    /// Evaluate exact-span accuracy every this many steps and stop early
    /// once `target_accuracy` is reached (0 disables).
    pub eval_every: usize,
    pub target_accuracy: f64,
}

impl Default for IndicatorTrainConfig {
    fn default() -> Self {
        IndicatorTrainConfig {
            steps: 2000,
            lr: 1e-3,
            null_weight: 0.5,
            use_aeg_labels: true,
            seed: 0,
            log_every: 100,
            eval_every: 250,
            target_accuracy: 1.0,
        }
    }
}

/// Exact-span accuracy over the non-null examples (predicted token span
/// equals the target span).
pub fn indicator_accuracy(model: &IndicatorModel, examples: &[IndicatorExample]) -> Result<f64> {
    let mut total = 0usize;
    let mut hits = 0usize;
    for ex in examples {
        let SpanTarget::Span { start_tok, end_tok } = ex.target else {
            continue;
        };
        total += 1;
        let pred = model.predict_passage(&ex.context, &ex.query, &ex.passage_id, &ex.passage_text)?;
        if let Some(span) = pred.span {
            if span.start_tok == start_tok && span.end_tok == end_tok {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(hits as f64 / total as f64)
}

/// Single-example Adam steps over a seeded shuffle of `examples`, cycling
/// (and reshuffling) each epoch. Returns per-step losses.
pub fn train_indicator(
    model: &IndicatorModel,
    examples: &[IndicatorExample],
    cfg: &IndicatorTrainConfig,
) -> Result<Vec<f32>> {
    let examples: Vec<IndicatorExample> = examples
        .iter()
        .filter(|ex| {
            cfg.use_aeg_labels
                || !matches!(
                    ex.kind,
                    Some(EvidenceKind::CurrentRelated | EvidenceKind::HistoricalRelated)
                )
        })
        .cloned()
        .collect();
    let examples = examples.as_slice();
    if examples.is_empty() {
        return Err(CoreError::InvalidInput("no indicator examples".into()));
    }
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor == order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let ex = &examples[order[cursor]];
        cursor += 1;
        let enc = model.encode(&ex.context, &ex.query, &ex.passage_text)?;
        let (ls, le) = model.span_logit_rows(&enc);
        let mut loss = indicator_loss(&ls, &le, ex.target)?;
        if ex.target == SpanTarget::NoEvidence {
            loss = loss.scale(cfg.null_weight as f32);
        }
        let value = loss.value();
        if !value.is_finite() {
            return Err(CoreError::Integrity(format!(
                "indicator loss diverged at step {step}: {value}"
            )));
        }
        backward(&loss).map_err(CoreError::Nn)?;
        opt.step(&model.params).map_err(|e| {
            CoreError::Integrity(format!("indicator optimizer aborted at step {step}: {e}"))
        })?;
        losses.push(value);
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("indicator step {step}: loss {value:.4}");
        }
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            let acc = indicator_accuracy(model, examples)?;
            log::info!("indicator step {step}: exact-span accuracy {acc:.3}");
            if acc >= cfg.target_accuracy {
                break;
            }
        }
    }
    Ok(losses)
}
