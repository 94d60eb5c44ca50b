//! Hard-negative mining for retriever training: dense top-2 passages of
//! other user queries from the same conversation, plus mid-ranked BM25
//! results for the query "current response + dialogue history".

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::bm25::{bm25_rank, Bm25Index};
use super::dense::{dense_topk, BiEncoder, DenseIndex};
use super::RetrieverTrainingExample;
use crate::corpus::{Dialogue, Role};
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MiningConfig {
    /// Other user queries sampled per conversation.
    pub n_other_queries: usize,
    /// BM25 rank window (1-based, inclusive).
    pub bm25_lo: usize,
    pub bm25_hi: usize,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            n_other_queries: 2,
            bm25_lo: 5,
            bm25_hi: 15,
            seed: 0,
        }
    }
}

/// Stable per-turn RNG seed: identical across runs and platforms,
/// independent of mining order.
fn turn_seed(seed: u64, dial_id: &str, turn_index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(dial_id.as_bytes());
    h.update((turn_index as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 8+ bytes"))
}

/// Mine negatives for the agent turn at `turn_index`. The positive is the
/// turn's first gold-evidence passage.
pub fn mine_negatives(
    dialogue: &Dialogue,
    turn_index: usize,
    query: &str,
    encoder: &BiEncoder,
    dense_index: &DenseIndex,
    bm25_index: &Bm25Index,
    cfg: &MiningConfig,
) -> Result<RetrieverTrainingExample> {
    let turn = dialogue.turns.get(turn_index).ok_or_else(|| {
        CoreError::InvalidInput(format!(
            "turn {turn_index} out of range for dialogue `{}`",
            dialogue.dial_id
        ))
    })?;
    let positive = turn
        .gold_evidence
        .first()
        .map(|g| g.passage_id.clone())
        .ok_or_else(|| {
            CoreError::InvalidInput(format!(
                "dialogue `{}` turn {turn_index} has no gold evidence; skipping",
                dialogue.dial_id
            ))
        })?;

    // (a) dense top-2 for each sampled *other* user query.
    let mut other_queries: Vec<&str> = dialogue
        .turns
        .iter()
        .filter(|t| t.role == Role::User && t.index != turn_index.saturating_sub(1))
        .map(|t| t.text.as_str())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(turn_seed(cfg.seed, &dialogue.dial_id, turn_index));
    other_queries.shuffle(&mut rng);
    other_queries.truncate(cfg.n_other_queries);

    let mut negatives: Vec<String> = Vec::new();
    let mut push = |id: String| {
        if id != positive && !negatives.contains(&id) {
            negatives.push(id);
        }
    };
    for oq in other_queries {
        for hit in dense_topk(dense_index, encoder, oq, 2)? {
            push(hit.passage_id);
        }
    }

    // (b) BM25 ranks lo..hi for "current response + dialogue history".
    let history: Vec<&str> = dialogue.turns[..turn_index]
        .iter()
        .map(|t| t.text.as_str())
        .collect();
    let bm25_query = format!("{} {}", turn.text, history.join(" "));
    for hit in bm25_rank(bm25_index, &bm25_query, cfg.bm25_lo, cfg.bm25_hi)? {
        push(hit.passage_id);
    }

    if negatives.is_empty() {
        return Err(CoreError::InvalidInput(format!(
            "no negatives mined for dialogue `{}` turn {turn_index}",
            dialogue.dial_id
        )));
    }
    Ok(RetrieverTrainingExample {
        query: query.to_string(),
        positive,
        negatives,
    })
}
