//! Passage retrieval: BM25 lexical index, tiny bi-encoder dense retriever,
//! hard-negative mining, and retriever training.

pub mod bm25;
pub mod dense;
pub mod mining;
pub mod train;

use serde::{Deserialize, Serialize};

pub use bm25::{build_bm25_index, Bm25Index};
pub use dense::{build_dense_index, dense_topk, BiEncoder, DenseIndex};
pub use mining::{mine_negatives, MiningConfig};
pub use train::{retriever_loss, train_retriever, RetrieverTrainConfig};

/// One ranked retrieval hit. `rank` is 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub passage_id: String,
    pub score: f64,
    pub rank: usize,
}

/// One retriever training example: a query, its gold passage, and mined
/// hard negatives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrieverTrainingExample {
    pub query: String,
    pub positive: String,
    pub negatives: Vec<String>,
}

/// Sort scored passages descending, ties by ascending passage id, and
/// assign 1-based contiguous ranks.
pub(crate) fn rank_scored(mut scored: Vec<(String, f64)>) -> Vec<RetrievalResult> {
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("retrieval scores are finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    scored
        .into_iter()
        .enumerate()
        .map(|(i, (passage_id, score))| RetrievalResult {
            passage_id,
            score,
            rank: i + 1,
        })
        .collect()
}
