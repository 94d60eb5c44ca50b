//! Retriever training: softmax cross-entropy of the positive passage
//! against mined negatives under dot-product scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use ueidg_nn::{backward, Adam, AdamConfig, Tensor};

use super::dense::BiEncoder;
use super::RetrieverTrainingExample;
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RetrieverTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub log_every: usize,
}

impl Default for RetrieverTrainConfig {
    fn default() -> Self {
        RetrieverTrainConfig {
            steps: 200,
            lr: 1e-3,
            log_every: 25,
        }
    }
}

/// Tracked NLL of the positive among `{positive} ∪ negatives`:
/// `-ln softmax(q·c_pos / q·c_i)`. Candidate order: positive first, then
/// negatives as mined.
pub fn retriever_loss(
    encoder: &BiEncoder,
    example: &RetrieverTrainingExample,
    passage_texts: &BTreeMap<String, String>,
) -> Result<Tensor<f32>> {
    if example.negatives.is_empty() {
        return Err(CoreError::InvalidInput(
            "retriever example needs at least one negative".into(),
        ));
    }
    let text_of = |id: &str| -> Result<&str> {
        passage_texts
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| CoreError::Integrity(format!("unknown passage `{id}` in example")))
    };
    let q = encoder.embed_train(&example.query);
    let mut cands = vec![encoder.embed_train(text_of(&example.positive)?)];
    for neg in &example.negatives {
        cands.push(encoder.embed_train(text_of(neg)?));
    }
    // scores: 1 x (1 + |negatives|); positive is class 0.
    let scores = q.matmul_nt(&Tensor::concat_rows(&cands));
    Ok(scores.cross_entropy_rows(&[0], None))
}

/// Streamed single-example steps over `examples` in order, cycling until
/// `cfg.steps`. Returns the per-step losses.
pub fn train_retriever(
    encoder: &BiEncoder,
    examples: &[RetrieverTrainingExample],
    passage_texts: &BTreeMap<String, String>,
    cfg: &RetrieverTrainConfig,
) -> Result<Vec<f32>> {
    if examples.is_empty() {
        return Err(CoreError::InvalidInput(
            "no retriever training examples".into(),
        ));
    }
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &encoder.params,
    );
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let example = &examples[step % examples.len()];
        let loss = retriever_loss(encoder, example, passage_texts)?;
        let value = loss.value();
        if !value.is_finite() {
            return Err(CoreError::Integrity(format!(
                "retriever loss diverged at step {step}: {value}"
            )));
        }
        backward(&loss).map_err(CoreError::Nn)?;
        opt.step(&encoder.params).map_err(|e| {
            CoreError::Integrity(format!("retriever optimizer aborted at step {step}: {e}"))
        })?;
        losses.push(value);
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("retriever step {step}: loss {value:.4}");
        }
    }
    Ok(losses)
}
