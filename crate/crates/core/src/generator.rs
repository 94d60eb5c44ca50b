//! Evidence-augmented generator: FiD-style encoder-decoder. Each retrieved
//! passage is encoded independently with additive binary evidence
//! embeddings, the encodings are row-concatenated, a single-head evidence
//! attention layer lets every position attend to the evidence rows, and
//! the decoder cross-attends to the result. Token embeddings are shared
//! between encoder, decoder, and the output projection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ueidg_nn::{
    backward, load_checkpoint_config, load_checkpoint_into, no_grad, save_checkpoint, Adam,
    AdamConfig, Embedding, LayerNorm, ModelConfig, ParamBuilder, ParamSet, Real, Tensor,
    TransformerDecoder, TransformerEncoder,
};

use crate::corpus::tokenize::{tokenize_with_offsets, Vocab};
use crate::error::{CoreError, Result};

/// Where evidence masks come from at train/inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvidenceSource {
    None,
    Predicted,
    Aeg,
    Gold,
}

impl std::str::FromStr for EvidenceSource {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(EvidenceSource::None),
            "predicted" => Ok(EvidenceSource::Predicted),
            "aeg" => Ok(EvidenceSource::Aeg),
            "gold" => Ok(EvidenceSource::Gold),
            other => Err(CoreError::InvalidInput(format!(
                "unknown evidence source `{other}` (expected none|predicted|aeg|gold)"
            ))),
        }
    }
}

impl std::fmt::Display for EvidenceSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EvidenceSource::None => "none",
            EvidenceSource::Predicted => "predicted",
            EvidenceSource::Aeg => "aeg",
            EvidenceSource::Gold => "gold",
        };
        f.write_str(s)
    }
}

/// One per-passage generator input:
/// `<ctx> context⊕query <psg> passage` plus a token-aligned binary
/// evidence mask (true ⇔ token overlaps an evidence span).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorInput {
    pub passage_id: String,
    pub ids: Vec<usize>,
    pub evidence_mask: Vec<bool>,
    /// Sequence positions of passage tokens, ascending.
    pub passage_positions: Vec<usize>,
}

/// A char-offset evidence span restricted to one passage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpan {
    pub passage_id: String,
    pub span_start: usize,
    pub span_end: usize,
}

/// Encode one passage with its evidence spans. Context truncates from the
/// oldest turn first; spans naming another passage are an error.
pub fn encode_generator_input(
    context: &str,
    query: &str,
    passage_id: &str,
    passage: &str,
    evidence_spans: &[MaskSpan],
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<GeneratorInput> {
    for s in evidence_spans {
        if s.passage_id != passage_id {
            return Err(CoreError::InvalidInput(format!(
                "evidence span for passage `{}` handed to passage `{passage_id}`",
                s.passage_id
            )));
        }
    }
    let psg_tokens = tokenize_with_offsets(passage);
    let overhead = 2; // <ctx> and <psg>
    if psg_tokens.len() + overhead > max_seq_len {
        return Err(CoreError::InvalidInput(format!(
            "passage of {} tokens cannot fit max_seq_len {max_seq_len}",
            psg_tokens.len()
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
    let mut mask = Vec::with_capacity(overhead + cq.len() + psg_tokens.len());
    ids.push(vocab.ctx_id());
    ids.extend(&cq);
    ids.push(vocab.psg_id());
    mask.resize(ids.len(), false);
    let first_psg = ids.len();
    for t in &psg_tokens {
        ids.push(vocab.id(&t.text));
        let inside = evidence_spans
            .iter()
            .any(|s| t.start < s.span_end && s.span_start < t.end);
        mask.push(inside);
    }
    Ok(GeneratorInput {
        passage_id: passage_id.to_string(),
        ids,
        evidence_mask: mask,
        passage_positions: (first_psg..first_psg + psg_tokens.len()).collect(),
    })
}

/// Add the binary evidence embedding on top of token + position
/// embeddings: row 0 of `table` (e_out) where mask is false, row 1 (e_in)
/// where true.
pub fn evidence_embed<T: Real>(x: &Tensor<T>, table: &Tensor<T>, mask: &[bool]) -> Tensor<T> {
    assert_eq!(table.rows(), 2, "evidence table has rows e_out, e_in");
    assert_eq!(x.rows(), mask.len(), "mask must align with the sequence");
    let idx: Vec<usize> = mask.iter().map(|&b| usize::from(b)).collect();
    x.add(&table.gather_rows(&idx))
}

/// Row-concatenate per-passage encodings in retrieval-rank order. Returns
/// the fused matrix and each passage's starting row (global position =
/// `offsets[k] + local position`).
pub fn fuse_encodings<T: Real>(parts: &[Tensor<T>]) -> (Tensor<T>, Vec<usize>) {
    assert!(!parts.is_empty(), "fusion needs at least one encoding");
    let mut offsets = Vec::with_capacity(parts.len());
    let mut acc = 0;
    for p in parts {
        offsets.push(acc);
        acc += p.rows();
    }
    (Tensor::concat_rows(parts), offsets)
}

/// Single-head attention from every position onto the evidence rows
/// (Q from all of H; K and V from H's rows at the evidence positions),
/// followed by a residual add and layer norm.
pub struct EvidenceAttentionLayer<T: Real> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln: LayerNorm<T>,
    d_model: usize,
}

impl<T: Real> EvidenceAttentionLayer<T> {
    pub fn new(pb: &mut ParamBuilder<T>, prefix: &str, d_model: usize) -> Self {
        EvidenceAttentionLayer {
            wq: pb.xavier(&format!("{prefix}.wq"), d_model, d_model),
            wk: pb.xavier(&format!("{prefix}.wk"), d_model, d_model),
            wv: pb.xavier(&format!("{prefix}.wv"), d_model, d_model),
            wo: pb.xavier(&format!("{prefix}.wo"), d_model, d_model),
            ln: LayerNorm::new(pb, &format!("{prefix}.ln"), d_model),
            d_model,
        }
    }

    /// Deduplicated, sorted evidence positions (set semantics).
    fn normalize_positions(&self, h: &Tensor<T>, e_pos: &[usize]) -> Vec<usize> {
        let mut pos: Vec<usize> = e_pos.to_vec();
        pos.sort_unstable();
        pos.dedup();
        assert!(
            pos.last().is_none_or(|&p| p < h.rows()),
            "evidence position out of range"
        );
        pos
    }

    /// The attention update `H_a = softmax(Q K^T / √d) (H_e W_V) W_O`,
    /// or `None` when there are no evidence positions.
    pub fn attend(&self, h: &Tensor<T>, e_pos: &[usize]) -> Option<Tensor<T>> {
        let pos = self.normalize_positions(h, e_pos);
        if pos.is_empty() {
            return None;
        }
        let he = h.gather_rows(&pos);
        let q = h.matmul(&self.wq);
        let k = he.matmul(&self.wk);
        let v = he.matmul(&self.wv);
        let scale = T::from_f64(1.0 / (self.d_model as f64).sqrt());
        let a = q.matmul_nt(&k).scale(scale).softmax_rows();
        Some(a.matmul(&v).matmul(&self.wo))
    }

    /// `H' = layer_norm(H + H_a)`; `H' = H` exactly when `e_pos` is empty.
    pub fn forward(&self, h: &Tensor<T>, e_pos: &[usize]) -> Tensor<T> {
        match self.attend(h, e_pos) {
            Some(ha) => self.ln.forward(&h.add(&ha)),
            None => h.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub model: ModelConfig,
    pub max_new_tokens: usize,
    /// Beam width for decoding; 1 = greedy. At most 4.
    pub beam_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            model: ModelConfig::default(),
            max_new_tokens: 64,
            beam_size: 1,
        }
    }
}

/// Generator over any scalar type; `GeneratorModel` is the f32 alias used
/// at train/inference time, while gradient checks instantiate f64.
pub struct GeneratorCore<T: Real> {
    pub vocab: Vocab,
    pub config: GeneratorConfig,
    pub params: ParamSet<T>,
    embedding_table: Tensor<T>,
    encoder: TransformerEncoder<T>,
    decoder: TransformerDecoder<T>,
    evidence_table: Tensor<T>,
    evidence_attention: EvidenceAttentionLayer<T>,
}

pub type GeneratorModel = GeneratorCore<f32>;

impl<T: Real> GeneratorCore<T> {
    pub fn new(vocab: Vocab, config: GeneratorConfig) -> Result<GeneratorCore<T>> {
        config.model.validate().map_err(CoreError::Nn)?;
        if config.model.vocab_size < vocab.len() {
            return Err(CoreError::InvalidInput(format!(
                "generator vocab_size {} smaller than vocabulary ({} tokens)",
                config.model.vocab_size,
                vocab.len()
            )));
        }
        if config.beam_size == 0 || config.beam_size > 4 {
            return Err(CoreError::InvalidInput(
                "beam_size must be between 1 and 4".into(),
            ));
        }
        if config.max_new_tokens + 1 > config.model.max_seq_len {
            return Err(CoreError::InvalidInput(format!(
                "max_new_tokens {} + BOS exceeds max_seq_len {}",
                config.max_new_tokens, config.model.max_seq_len
            )));
        }
        let mut pb = ParamBuilder::new(config.model.seed);
        let table = pb.xavier("gen.embed", config.model.vocab_size, config.model.d_model);
        let encoder = TransformerEncoder::with_embedding(
            &mut pb,
            "gen.enc",
            Embedding::with_table(table.clone(), &config.model),
            &config.model,
        );
        let decoder = TransformerDecoder::with_embedding(
            &mut pb,
            "gen.dec",
            Embedding::with_table(table.clone(), &config.model),
            &config.model,
        );
        let evidence_table = pb.xavier("gen.evidence", 2, config.model.d_model);
        let evidence_attention =
            EvidenceAttentionLayer::new(&mut pb, "gen.evattn", config.model.d_model);
        Ok(GeneratorCore {
            vocab,
            config,
            params: pb.finish(),
            embedding_table: table,
            encoder,
            decoder,
            evidence_table,
            evidence_attention,
        })
    }

    pub fn encode_input(
        &self,
        context: &str,
        query: &str,
        passage_id: &str,
        passage: &str,
        spans: &[MaskSpan],
    ) -> Result<GeneratorInput> {
        encode_generator_input(
            context,
            query,
            passage_id,
            passage,
            spans,
            &self.vocab,
            self.config.model.max_seq_len,
        )
    }

    /// Encode all passages, fuse, and apply evidence attention over the
    /// union of evidence positions. Returns `H'`.
    pub fn encode_fused(&self, inputs: &[GeneratorInput]) -> Result<Tensor<T>> {
        if inputs.is_empty() {
            return Err(CoreError::InvalidInput("generator needs >= 1 passage".into()));
        }
        let mut parts = Vec::with_capacity(inputs.len());
        for input in inputs {
            let x = self.encoder.embedding.forward(&input.ids);
            let x = evidence_embed(&x, &self.evidence_table, &input.evidence_mask);
            parts.push(self.encoder.forward_embedded(&x));
        }
        let (h, offsets) = fuse_encodings(&parts);
        let mut e_pos = Vec::new();
        for (input, off) in inputs.iter().zip(&offsets) {
            for (i, &m) in input.evidence_mask.iter().enumerate() {
                if m {
                    e_pos.push(off + i);
                }
            }
        }
        Ok(self.evidence_attention.forward(&h, &e_pos))
    }

    /// Teacher-forced mean-token cross-entropy. `target_ids` excludes
    /// BOS/EOS; both are added here.
    pub fn forward_loss(&self, inputs: &[GeneratorInput], target_ids: &[usize]) -> Result<Tensor<T>> {
        if target_ids.is_empty() {
            return Err(CoreError::InvalidInput("empty generation target".into()));
        }
        if target_ids.len() + 1 > self.config.model.max_seq_len {
            return Err(CoreError::InvalidInput(format!(
                "target of {} tokens exceeds max_seq_len {}",
                target_ids.len(),
                self.config.model.max_seq_len
            )));
        }
        let h = self.encode_fused(inputs)?;
        let mut dec_in = Vec::with_capacity(target_ids.len() + 1);
        dec_in.push(self.vocab.bos_id());
        dec_in.extend_from_slice(target_ids);
        let mut labels = target_ids.to_vec();
        labels.push(self.vocab.eos_id());
        let dec_out = self.decoder.forward(&dec_in, &h);
        let logits = dec_out.matmul_nt(&self.embedding_table);
        Ok(logits.cross_entropy_rows(&labels, None))
    }

    fn next_logprobs(&self, seq: &[usize], h: &Tensor<T>) -> Vec<f64> {
        let dec_out = self.decoder.forward(seq, h);
        let logits = dec_out.matmul_nt(&self.embedding_table);
        let last = logits.gather_rows(&[logits.rows() - 1]);
        let probs = last.softmax_rows().to_vec();
        probs.iter().map(|&p| p.as_f64().max(1e-300).ln()).collect()
    }

    /// Decode token ids (without BOS/EOS) for pre-encoded inputs.
    pub fn generate_ids(&self, inputs: &[GeneratorInput]) -> Result<Vec<usize>> {
        let _guard = no_grad();
        let h = self.encode_fused(inputs)?;
        let eos = self.vocab.eos_id();
        let max_len = self
            .config
            .max_new_tokens
            .min(self.config.model.max_seq_len - 1);

        // Beam search; beam_size 1 is greedy. Ties break toward the
        // smaller token id via max_by ordering below.
        struct Beam {
            seq: Vec<usize>,
            logprob: f64,
            done: bool,
        }
        let mut beams = vec![Beam {
            seq: vec![self.vocab.bos_id()],
            logprob: 0.0,
            done: false,
        }];
        for _ in 0..max_len {
            if beams.iter().all(|b| b.done) {
                break;
            }
            let mut candidates: Vec<Beam> = Vec::new();
            for b in &beams {
                if b.done {
                    candidates.push(Beam {
                        seq: b.seq.clone(),
                        logprob: b.logprob,
                        done: true,
                    });
                    continue;
                }
                let lps = self.next_logprobs(&b.seq, &h);
                // Top beam_size continuations of this beam suffice.
                let mut idx: Vec<usize> = (0..lps.len()).collect();
                idx.sort_by(|&a, &c| {
                    lps[c].partial_cmp(&lps[a]).expect("finite logprobs").then(a.cmp(&c))
                });
                for &tok in idx.iter().take(self.config.beam_size) {
                    let mut seq = b.seq.clone();
                    let done = tok == eos;
                    if !done {
                        seq.push(tok);
                    }
                    candidates.push(Beam {
                        seq,
                        logprob: b.logprob + lps[tok],
                        done,
                    });
                }
            }
            candidates.sort_by(|a, b| {
                b.logprob
                    .partial_cmp(&a.logprob)
                    .expect("finite logprobs")
                    .then(a.seq.cmp(&b.seq))
            });
            candidates.truncate(self.config.beam_size);
            beams = candidates;
        }
        let best = beams
            .into_iter()
            .max_by(|a, b| {
                a.logprob
                    .partial_cmp(&b.logprob)
                    .expect("finite logprobs")
                    .then(b.seq.cmp(&a.seq))
            })
            .expect("at least one beam");
        Ok(best.seq[1..].to_vec()) // drop BOS
    }

    /// Decode to text (specials dropped, tokens space-joined).
    pub fn generate(&self, inputs: &[GeneratorInput]) -> Result<String> {
        let ids = self.generate_ids(inputs)?;
        Ok(self.vocab.decode(&ids))
    }
}

impl GeneratorModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.config, &self.params).map_err(CoreError::Nn)
    }

    pub fn load(path: &Path, vocab: Vocab) -> Result<GeneratorModel> {
        let config: GeneratorConfig = load_checkpoint_config(path).map_err(CoreError::Nn)?;
        let model = GeneratorModel::new(vocab, config)?;
        load_checkpoint_into::<f32, GeneratorConfig>(path, &model.params).map_err(CoreError::Nn)?;
        Ok(model)
    }
}

/// One training example: pre-encoded per-passage inputs (masks already
/// resolved for the chosen evidence source) and the target response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorExample {
    pub dial_id: String,
    pub turn_index: usize,
    pub inputs: Vec<GeneratorInput>,
    pub target_ids: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GeneratorTrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Shuffling seed (model init comes from the model config seed).
    pub seed: u64,
    pub log_every: usize,
    /// Evaluate exact-match regeneration every this many steps and stop
    /// early at `target_exact_match` (0 disables).
    pub eval_every: usize,
    pub target_exact_match: f64,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        GeneratorTrainConfig {
            steps: 5000,
            lr: 1e-3,
            seed: 0,
            log_every: 100,
            eval_every: 250,
            target_exact_match: 1.0,
        }
    }
}

/// Fraction of examples whose greedy regeneration equals the target ids.
pub fn generator_exact_match(model: &GeneratorModel, examples: &[GeneratorExample]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(1.0);
    }
    let mut hits = 0usize;
    for ex in examples {
        if model.generate_ids(&ex.inputs)? == ex.target_ids {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Single-example Adam steps over a seeded shuffle, reshuffled per epoch.
/// Returns per-step losses.
pub fn train_generator(
    model: &GeneratorModel,
    examples: &[GeneratorExample],
    cfg: &GeneratorTrainConfig,
) -> Result<Vec<f32>> {
    if examples.is_empty() {
        return Err(CoreError::InvalidInput("no generator examples".into()));
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
        let loss = model.forward_loss(&ex.inputs, &ex.target_ids)?;
        let value = loss.value();
        if !value.is_finite() {
            return Err(CoreError::Integrity(format!(
                "generator loss diverged at step {step}: {value}"
            )));
        }
        backward(&loss).map_err(CoreError::Nn)?;
        opt.step(&model.params).map_err(|e| {
            CoreError::Integrity(format!("generator optimizer aborted at step {step}: {e}"))
        })?;
        losses.push(value);
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("generator step {step}: loss {value:.4}");
        }
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            let em = generator_exact_match(model, examples)?;
            log::info!("generator step {step}: exact-match {em:.3}");
            if em >= cfg.target_exact_match {
                break;
            }
        }
    }
    Ok(losses)
}

/// Mean teacher-forced loss of `model` over `examples` (no grad).
pub fn eval_loss(model: &GeneratorModel, examples: &[GeneratorExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(CoreError::InvalidInput("no examples to evaluate".into()));
    }
    let _guard = no_grad();
    let mut total = 0.0f64;
    for ex in examples {
        total += model.forward_loss(&ex.inputs, &ex.target_ids)?.value() as f64;
    }
    Ok(total / examples.len() as f64)
}
