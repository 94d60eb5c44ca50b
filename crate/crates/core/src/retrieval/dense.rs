//! Tiny bi-encoder dense retriever: one shared transformer encoder,
//! mean pooling over token states, exhaustive dot-product search.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ueidg_nn::{
    load_checkpoint_config, load_checkpoint_into, no_grad, save_checkpoint, ModelConfig,
    ParamBuilder, ParamSet, Tensor, TransformerEncoder,
};

use super::{rank_scored, RetrievalResult};
use crate::corpus::tokenize::Vocab;
use crate::error::{CoreError, Result};

const DENSE_INDEX_VERSION: u32 = 1;

/// Bi-encoder: queries and passages share one encoder; the embedding is
/// the mean of the final token states (dimension = d_model).
pub struct BiEncoder {
    pub vocab: Vocab,
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
    encoder: TransformerEncoder<f32>,
}

impl BiEncoder {
    pub fn new(vocab: Vocab, config: ModelConfig) -> Result<BiEncoder> {
        config.validate().map_err(CoreError::Nn)?;
        if config.vocab_size < vocab.len() {
            return Err(CoreError::InvalidInput(format!(
                "bi-encoder vocab_size {} smaller than vocabulary ({} tokens)",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut pb = ParamBuilder::new(config.seed);
        let encoder = TransformerEncoder::new(&mut pb, "bienc", &config);
        Ok(BiEncoder {
            vocab,
            config,
            params: pb.finish(),
            encoder,
        })
    }

    pub fn d_emb(&self) -> usize {
        self.config.d_model
    }

    /// Token ids for a text, truncated to the encoder's maximum length.
    pub fn encode_ids(&self, text: &str) -> Vec<usize> {
        let mut ids = self.vocab.encode(text);
        ids.truncate(self.config.max_seq_len);
        ids
    }

    /// Tracked embedding (1 x d_model) for training. Empty text embeds to
    /// an untracked zero vector.
    pub fn embed_train(&self, text: &str) -> Tensor<f32> {
        let ids = self.encode_ids(text);
        if ids.is_empty() {
            return Tensor::zeros(1, self.d_emb());
        }
        self.encoder.forward(&ids).mean_rows()
    }

    /// Deterministic untracked embedding.
    pub fn embed_text(&self, text: &str) -> Vec<f32> {
        let _guard = no_grad();
        self.embed_train(text).to_vec()
    }

    /// SHA-256 over the serialized config and every parameter value;
    /// changes whenever the encoder would embed differently.
    pub fn version_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, t) in self.params.iter() {
            h.update(name.as_bytes());
            for v in t.to_vec() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.config, &self.params).map_err(CoreError::Nn)
    }

    pub fn load(path: &Path, vocab: Vocab) -> Result<BiEncoder> {
        let config: ModelConfig = load_checkpoint_config(path).map_err(CoreError::Nn)?;
        let enc = BiEncoder::new(vocab, config)?;
        load_checkpoint_into::<f32, ModelConfig>(path, &enc.params).map_err(CoreError::Nn)?;
        Ok(enc)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Immutable matrix of passage embeddings plus their ids.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseIndex {
    pub passage_ids: Vec<String>,
    pub dim: usize,
    /// Row-major, `passage_ids.len() * dim` entries.
    pub embeddings: Vec<f32>,
    pub encoder_hash: String,
}

#[derive(Serialize, Deserialize)]
struct DenseHeader {
    format_version: u32,
    dim: usize,
    count: usize,
    encoder_hash: String,
    passage_ids: Vec<String>,
}

/// Embed every `(passage_id, text)` with the bi-encoder.
pub fn build_dense_index<I, S>(encoder: &BiEncoder, passages: I) -> Result<DenseIndex>
where
    I: IntoIterator<Item = (S, S)>,
    S: AsRef<str>,
{
    let mut ids = Vec::new();
    let mut embeddings = Vec::new();
    for (id, text) in passages {
        ids.push(id.as_ref().to_string());
        let v = encoder.embed_text(text.as_ref());
        if v.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::Integrity(format!(
                "non-finite embedding for passage `{}`",
                id.as_ref()
            )));
        }
        embeddings.extend_from_slice(&v);
    }
    Ok(DenseIndex {
        passage_ids: ids,
        dim: encoder.d_emb(),
        embeddings,
        encoder_hash: encoder.version_hash(),
    })
}

impl DenseIndex {
    pub fn n_passages(&self) -> usize {
        self.passage_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    /// File layout: u64 LE header length, JSON header, little-endian f32
    /// embedding blob.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&DenseHeader {
            format_version: DENSE_INDEX_VERSION,
            dim: self.dim,
            count: self.passage_ids.len(),
            encoder_hash: self.encoder_hash.clone(),
            passage_ids: self.passage_ids.clone(),
        })?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for v in &self.embeddings {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DenseIndex> {
        let mut r = BufReader::new(File::open(path)?);
        let mut len8 = [0u8; 8];
        r.read_exact(&mut len8)?;
        let hlen = u64::from_le_bytes(len8) as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)?;
        let header: DenseHeader = serde_json::from_slice(&hbuf)?;
        if header.format_version != DENSE_INDEX_VERSION {
            return Err(CoreError::Schema(format!(
                "dense index format {} unsupported (expected {DENSE_INDEX_VERSION})",
                header.format_version
            )));
        }
        if header.passage_ids.len() != header.count {
            return Err(CoreError::Schema(
                "dense index header count does not match id list".into(),
            ));
        }
        let mut blob = Vec::new();
        r.read_to_end(&mut blob)?;
        let expected = header.count * header.dim * 4;
        if blob.len() != expected {
            return Err(CoreError::Schema(format!(
                "dense index blob is {} bytes, expected {expected}",
                blob.len()
            )));
        }
        let embeddings: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Integrity("dense index contains NaN/Inf".into()));
        }
        Ok(DenseIndex {
            passage_ids: header.passage_ids,
            dim: header.dim,
            embeddings,
            encoder_hash: header.encoder_hash,
        })
    }
}

/// Exhaustive top-k by dot product; f64 accumulation; ties break by
/// ascending passage id. `k` larger than the corpus returns everything.
pub fn dense_topk(
    index: &DenseIndex,
    encoder: &BiEncoder,
    query: &str,
    k: usize,
) -> Result<Vec<RetrievalResult>> {
    if k < 1 {
        return Err(CoreError::InvalidInput("dense_topk requires k >= 1".into()));
    }
    let q = encoder.embed_text(query);
    if q.len() != index.dim {
        return Err(CoreError::InvalidInput(format!(
            "query embedding dim {} does not match index dim {}",
            q.len(),
            index.dim
        )));
    }
    let scored: Vec<(String, f64)> = index
        .passage_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let dot: f64 = index
                .row(i)
                .iter()
                .zip(&q)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            (id.clone(), dot)
        })
        .collect();
    let mut ranked = rank_scored(scored);
    ranked.truncate(k);
    Ok(ranked)
}
