//! Transformer building blocks: embeddings with sinusoidal positions,
//! multi-head attention, pre-norm encoder/decoder blocks, and parameter
//! bookkeeping (named registry + seeded initialization).

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::NnError;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Architecture hyperparameters shared by all models in the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Kept for config completeness; always 0 at this scale and ignored.
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.d_model == 0 || self.n_heads == 0 {
            return Err(NnError::InvalidConfig(
                "d_model and n_heads must be positive".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(NnError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(NnError::InvalidConfig(
                "vocab_size and max_seq_len must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 64,
            n_heads: 4,
            n_layers_enc: 2,
            n_layers_dec: 2,
            d_ff: 128,
            max_seq_len: 256,
            dropout: 0.0,
            seed: 0,
        }
    }
}

/// Ordered registry of named parameters; insertion order fixes checkpoint
/// layout and optimizer state alignment.
pub struct ParamSet<T: Real> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Tensor<T> {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        assert!(tensor.is_tracked(), "parameter `{name}` must be tracked");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor.clone()));
        tensor
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// True if every parameter holds only finite values.
    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite_all())
    }
}

/// Seeded initializer that registers parameters into a [`ParamSet`].
pub struct ParamBuilder<T: Real> {
    rng: ChaCha8Rng,
    set: ParamSet<T>,
}

impl<T: Real> ParamBuilder<T> {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            set: ParamSet::new(),
        }
    }

    /// Xavier/Glorot uniform init: U(−√(6/(fan_in+fan_out)), +√(…)).
    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> Tensor<T> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data: Vec<T> = (0..rows * cols)
            .map(|_| T::from_f64(self.rng.gen_range(-limit..limit)))
            .collect();
        self.set.insert(name, Tensor::param(rows, cols, data))
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> Tensor<T> {
        self.set
            .insert(name, Tensor::param(rows, cols, vec![T::zero(); rows * cols]))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> Tensor<T> {
        self.set
            .insert(name, Tensor::param(rows, cols, vec![T::one(); rows * cols]))
    }

    pub fn finish(self) -> ParamSet<T> {
        self.set
    }
}

/// Sinusoidal position table, row `p`: sin/cos pairs at geometric frequencies.
pub fn sinusoidal_positions<T: Real>(max_len: usize, d_model: usize) -> Vec<T> {
    let mut table = vec![T::zero(); max_len * d_model];
    for p in 0..max_len {
        for i in 0..d_model / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            let angle = p as f64 * freq;
            table[p * d_model + 2 * i] = T::from_f64(angle.sin());
            table[p * d_model + 2 * i + 1] = T::from_f64(angle.cos());
        }
    }
    table
}

/// Token embedding plus fixed sinusoidal positions.
pub struct Embedding<T: Real> {
    pub table: Tensor<T>,
    positions: Vec<T>,
    d_model: usize,
    max_seq_len: usize,
}

impl<T: Real> Embedding<T> {
    pub fn new(pb: &mut ParamBuilder<T>, name: &str, cfg: &ModelConfig) -> Self {
        let table = pb.xavier(name, cfg.vocab_size, cfg.d_model);
        Self::with_table(table, cfg)
    }

    /// Share an existing table (tied encoder/decoder embeddings).
    pub fn with_table(table: Tensor<T>, cfg: &ModelConfig) -> Self {
        assert_eq!(table.cols(), cfg.d_model, "embedding width mismatch");
        Embedding {
            table,
            positions: sinusoidal_positions(cfg.max_seq_len, cfg.d_model),
            d_model: cfg.d_model,
            max_seq_len: cfg.max_seq_len,
        }
    }

    /// `[n, d]` token + position embeddings.
    pub fn forward(&self, ids: &[usize]) -> Tensor<T> {
        assert!(!ids.is_empty(), "embedding of empty sequence");
        assert!(
            ids.len() <= self.max_seq_len,
            "sequence length {} exceeds max_seq_len {}",
            ids.len(),
            self.max_seq_len
        );
        let tok = self.table.gather_rows(ids);
        tok.add_const(&self.positions[..ids.len() * self.d_model])
    }
}

/// Additive causal mask for an `n x n` score matrix: 0 on/below the
/// diagonal, −1e9 above.
pub fn causal_mask<T: Real>(n: usize) -> Vec<T> {
    let neg = T::from_f64(-1e9);
    let mut m = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            m[i * n + j] = neg;
        }
    }
    m
}

pub struct MultiHeadAttention<T: Real> {
    wq: Tensor<T>,
    wk: Tensor<T>,
    wv: Tensor<T>,
    wo: Tensor<T>,
    bq: Tensor<T>,
    bv: Tensor<T>,
    bo: Tensor<T>,
    n_heads: usize,
}

impl<T: Real> MultiHeadAttention<T> {
    pub fn new(pb: &mut ParamBuilder<T>, prefix: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        MultiHeadAttention {
            wq: pb.xavier(&format!("{prefix}.wq"), d, d),
            wk: pb.xavier(&format!("{prefix}.wk"), d, d),
            wv: pb.xavier(&format!("{prefix}.wv"), d, d),
            wo: pb.xavier(&format!("{prefix}.wo"), d, d),
            bq: pb.zeros(&format!("{prefix}.bq"), 1, d),
            // No key bias: a constant added to every key shifts each
            // softmax row uniformly, so it can never affect the output.
            bv: pb.zeros(&format!("{prefix}.bv"), 1, d),
            bo: pb.zeros(&format!("{prefix}.bo"), 1, d),
            n_heads: cfg.n_heads,
        }
    }

    /// Queries from `x_q`, keys/values from `x_kv`; `causal` adds the
    /// upper-triangular mask (requires square score matrix).
    pub fn forward(&self, x_q: &Tensor<T>, x_kv: &Tensor<T>, causal: bool) -> Tensor<T> {
        let d = self.wq.rows();
        let hd = d / self.n_heads;
        let q = x_q.matmul(&self.wq).add_bias(&self.bq);
        let k = x_kv.matmul(&self.wk);
        let v = x_kv.matmul(&self.wv).add_bias(&self.bv);
        let scale = T::one() / T::from_f64((hd as f64).sqrt());
        let mask = if causal {
            assert_eq!(x_q.rows(), x_kv.rows(), "causal mask requires square scores");
            Some(causal_mask::<T>(x_q.rows()))
        } else {
            None
        };
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let lo = h * hd;
            let hi = lo + hd;
            let qh = q.slice_cols(lo, hi);
            let kh = k.slice_cols(lo, hi);
            let vh = v.slice_cols(lo, hi);
            let mut scores = qh.matmul_nt(&kh).scale(scale);
            if let Some(m) = &mask {
                scores = scores.add_const(m);
            }
            heads.push(scores.softmax_rows().matmul(&vh));
        }
        Tensor::concat_cols(&heads).matmul(&self.wo).add_bias(&self.bo)
    }
}

pub struct FeedForward<T: Real> {
    w1: Tensor<T>,
    b1: Tensor<T>,
    w2: Tensor<T>,
    b2: Tensor<T>,
}

impl<T: Real> FeedForward<T> {
    pub fn new(pb: &mut ParamBuilder<T>, prefix: &str, cfg: &ModelConfig) -> Self {
        FeedForward {
            w1: pb.xavier(&format!("{prefix}.w1"), cfg.d_model, cfg.d_ff),
            b1: pb.zeros(&format!("{prefix}.b1"), 1, cfg.d_ff),
            w2: pb.xavier(&format!("{prefix}.w2"), cfg.d_ff, cfg.d_model),
            b2: pb.zeros(&format!("{prefix}.b2"), 1, cfg.d_model),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.matmul(&self.w1)
            .add_bias(&self.b1)
            .gelu()
            .matmul(&self.w2)
            .add_bias(&self.b2)
    }
}

pub struct LayerNorm<T: Real> {
    gamma: Tensor<T>,
    beta: Tensor<T>,
    eps: T,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(pb: &mut ParamBuilder<T>, prefix: &str, d: usize) -> Self {
        LayerNorm {
            gamma: pb.ones(&format!("{prefix}.gamma"), 1, d),
            beta: pb.zeros(&format!("{prefix}.beta"), 1, d),
            eps: T::from_f64(1e-5),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }
}

/// Pre-norm encoder block: `x + attn(ln(x))`, then `+ ff(ln(·))`.
pub struct EncoderBlock<T: Real> {
    ln1: LayerNorm<T>,
    attn: MultiHeadAttention<T>,
    ln2: LayerNorm<T>,
    ff: FeedForward<T>,
}

impl<T: Real> EncoderBlock<T> {
    pub fn new(pb: &mut ParamBuilder<T>, prefix: &str, cfg: &ModelConfig) -> Self {
        EncoderBlock {
            ln1: LayerNorm::new(pb, &format!("{prefix}.ln1"), cfg.d_model),
            attn: MultiHeadAttention::new(pb, &format!("{prefix}.attn"), cfg),
            ln2: LayerNorm::new(pb, &format!("{prefix}.ln2"), cfg.d_model),
            ff: FeedForward::new(pb, &format!("{prefix}.ff"), cfg),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = self.ln1.forward(x);
        let h = x.add(&self.attn.forward(&n, &n, false));
        h.add(&self.ff.forward(&self.ln2.forward(&h)))
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention over
/// encoder states, feed-forward; each with a residual connection.
pub struct DecoderBlock<T: Real> {
    ln1: LayerNorm<T>,
    self_attn: MultiHeadAttention<T>,
    ln2: LayerNorm<T>,
    cross_attn: MultiHeadAttention<T>,
    ln3: LayerNorm<T>,
    ff: FeedForward<T>,
}

impl<T: Real> DecoderBlock<T> {
    pub fn new(pb: &mut ParamBuilder<T>, prefix: &str, cfg: &ModelConfig) -> Self {
        DecoderBlock {
            ln1: LayerNorm::new(pb, &format!("{prefix}.ln1"), cfg.d_model),
            self_attn: MultiHeadAttention::new(pb, &format!("{prefix}.self_attn"), cfg),
            ln2: LayerNorm::new(pb, &format!("{prefix}.ln2"), cfg.d_model),
            cross_attn: MultiHeadAttention::new(pb, &format!("{prefix}.cross_attn"), cfg),
            ln3: LayerNorm::new(pb, &format!("{prefix}.ln3"), cfg.d_model),
            ff: FeedForward::new(pb, &format!("{prefix}.ff"), cfg),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, enc_out: &Tensor<T>) -> Tensor<T> {
        let n = self.ln1.forward(x);
        let h = x.add(&self.self_attn.forward(&n, &n, true));
        let h2 = h.add(&self.cross_attn.forward(&self.ln2.forward(&h), enc_out, false));
        h2.add(&self.ff.forward(&self.ln3.forward(&h2)))
    }
}

/// Full encoder stack: embedding → blocks → final layer norm.
pub struct TransformerEncoder<T: Real> {
    pub embedding: Embedding<T>,
    blocks: Vec<EncoderBlock<T>>,
    final_ln: LayerNorm<T>,
}

impl<T: Real> TransformerEncoder<T> {
    pub fn new(pb: &mut ParamBuilder<T>, prefix: &str, cfg: &ModelConfig) -> Self {
        let embedding = Embedding::new(pb, &format!("{prefix}.embed"), cfg);
        Self::with_embedding(pb, prefix, embedding, cfg)
    }

    pub fn with_embedding(
        pb: &mut ParamBuilder<T>,
        prefix: &str,
        embedding: Embedding<T>,
        cfg: &ModelConfig,
    ) -> Self {
        let blocks = (0..cfg.n_layers_enc)
            .map(|i| EncoderBlock::new(pb, &format!("{prefix}.block{i}"), cfg))
            .collect();
        TransformerEncoder {
            embedding,
            blocks,
            final_ln: LayerNorm::new(pb, &format!("{prefix}.final_ln"), cfg.d_model),
        }
    }

    /// Hidden states `[n, d]` for a token id sequence.
    pub fn forward(&self, ids: &[usize]) -> Tensor<T> {
        self.forward_embedded(&self.embedding.forward(ids))
    }

    /// Run the blocks on pre-built input embeddings (callers may add
    /// extra additive embeddings first).
    pub fn forward_embedded(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h);
        }
        self.final_ln.forward(&h)
    }
}

/// Full decoder stack with cross-attention over encoder states.
pub struct TransformerDecoder<T: Real> {
    pub embedding: Embedding<T>,
    blocks: Vec<DecoderBlock<T>>,
    final_ln: LayerNorm<T>,
}

impl<T: Real> TransformerDecoder<T> {
    pub fn with_embedding(
        pb: &mut ParamBuilder<T>,
        prefix: &str,
        embedding: Embedding<T>,
        cfg: &ModelConfig,
    ) -> Self {
        let blocks = (0..cfg.n_layers_dec)
            .map(|i| DecoderBlock::new(pb, &format!("{prefix}.block{i}"), cfg))
            .collect();
        TransformerDecoder {
            embedding,
            blocks,
            final_ln: LayerNorm::new(pb, &format!("{prefix}.final_ln"), cfg.d_model),
        }
    }

    /// Hidden states `[n, d]` for decoder input ids attending to `enc_out`.
    pub fn forward(&self, ids: &[usize], enc_out: &Tensor<T>) -> Tensor<T> {
        let mut h = self.embedding.forward(ids);
        for b in &self.blocks {
            h = b.forward(&h, enc_out);
        }
        self.final_ln.forward(&h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, no_grad};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 17,
            d_model: 8,
            n_heads: 2,
            n_layers_enc: 2,
            n_layers_dec: 2,
            d_ff: 16,
            max_seq_len: 12,
            dropout: 0.0,
            seed: 7,
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny_cfg().validate().is_ok());
        let mut bad = tiny_cfg();
        bad.n_heads = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sinusoidal_first_row_alternates() {
        let t = sinusoidal_positions::<f64>(4, 6);
        // Position 0: sin(0)=0, cos(0)=1 for every frequency.
        assert_eq!(&t[..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        // Position 1, lowest frequency pair: sin(1), cos(1).
        assert!((t[6] - 1f64.sin()).abs() < 1e-12);
        assert!((t[7] - 1f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn builder_is_seed_deterministic() {
        let build = || {
            let mut pb = ParamBuilder::<f32>::new(42);
            let w = pb.xavier("w", 4, 4);
            w.to_vec()
        };
        assert_eq!(build(), build());
        let mut pb = ParamBuilder::<f32>::new(43);
        assert_ne!(pb.xavier("w", 4, 4).to_vec(), build());
    }

    #[test]
    fn xavier_within_limit() {
        let mut pb = ParamBuilder::<f64>::new(1);
        let w = pb.xavier("w", 30, 34);
        let limit = (6.0 / 64.0f64).sqrt();
        assert!(w.to_vec().iter().all(|v| v.abs() < limit));
    }

    #[test]
    fn param_set_rejects_duplicates() {
        let result = std::panic::catch_unwind(|| {
            let mut pb = ParamBuilder::<f32>::new(0);
            pb.zeros("p", 1, 1);
            pb.zeros("p", 1, 1);
        });
        assert!(result.is_err());
    }

    #[test]
    fn encoder_output_shape_and_determinism() {
        let cfg = tiny_cfg();
        let mut pb = ParamBuilder::<f32>::new(cfg.seed);
        let enc = TransformerEncoder::new(&mut pb, "enc", &cfg);
        let ids = [3usize, 5, 1, 9];
        let _guard = no_grad();
        let a = enc.forward(&ids);
        let b = enc.forward(&ids);
        assert_eq!(a.shape(), (4, 8));
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn causal_mask_blocks_future_tokens() {
        let cfg = tiny_cfg();
        let mut pb = ParamBuilder::<f64>::new(cfg.seed);
        let emb = Embedding::new(&mut pb, "embed", &cfg);
        let dec = TransformerDecoder::with_embedding(&mut pb, "dec", emb, &cfg);
        let enc_out = Tensor::new(3, 8, vec![0.1; 24]);
        let _guard = no_grad();
        let a = dec.forward(&[2, 4, 6, 8], &enc_out);
        let b = dec.forward(&[2, 4, 6, 1], &enc_out); // change only the last token
        // Rows before the changed position are identical.
        for i in 0..3 * 8 {
            assert!((a.to_vec()[i] - b.to_vec()[i]).abs() < 1e-12);
        }
        // The changed position itself differs.
        let last_a = &a.to_vec()[3 * 8..];
        let last_b = &b.to_vec()[3 * 8..];
        assert!(last_a.iter().zip(last_b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn gradients_reach_all_parameters() {
        let cfg = tiny_cfg();
        let mut pb = ParamBuilder::<f32>::new(cfg.seed);
        let enc = TransformerEncoder::new(&mut pb, "enc", &cfg);
        let params = pb.finish();
        let loss = enc.forward(&[1, 2, 3]).mul(&enc.forward(&[1, 2, 3])).mean_all();
        backward(&loss).unwrap();
        for (name, p) in params.iter() {
            assert!(p.grad().is_some(), "no gradient for {name}");
        }
    }

    #[test]
    fn shared_embedding_accumulates_from_both_stacks() {
        let cfg = tiny_cfg();
        let mut pb = ParamBuilder::<f32>::new(cfg.seed);
        let enc = TransformerEncoder::new(&mut pb, "enc", &cfg);
        let dec_emb = Embedding::with_table(enc.embedding.table.clone(), &cfg);
        let dec = TransformerDecoder::with_embedding(&mut pb, "dec", dec_emb, &cfg);
        let enc_out = enc.forward(&[1, 2]);
        let h = dec.forward(&[3, 4], &enc_out);
        let loss = h.mean_all();
        backward(&loss).unwrap();
        assert!(enc.embedding.table.grad().is_some());
    }
}
