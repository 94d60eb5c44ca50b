//! Dataset assembly shared by the CLI stages and the end-to-end tests:
//! per-turn retrieval maps, indicator/generator training examples with a
//! chosen evidence source, and the deterministic train/dev split.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::tokenize::{tokenize_with_offsets, Vocab};
use crate::corpus::{
    CorpusStore, Dialogue, EvidenceKind, EvidenceLabel, PredictionRow, Role,
};
use crate::error::{CoreError, Result};
use crate::generator::{encode_generator_input, EvidenceSource, GeneratorExample, MaskSpan};
use crate::indicator::{IndicatorExample, IndicatorModel, SpanTarget};

/// Top-ranked passage ids per agent turn, keyed by `(dial_id, turn_index)`.
pub type TopkMap = BTreeMap<(String, usize), Vec<String>>;

/// Evidence char spans per `(dial_id, turn_index, passage_id)`.
pub type SpanLookup = BTreeMap<(String, usize, String), Vec<(usize, usize)>>;

/// Retrieve the top `k` passages for every agent turn.
pub fn retrieve_topk_for_turns(
    corpus: &CorpusStore,
    retrieve: &dyn Fn(&str) -> Result<Vec<String>>,
    k: usize,
    context_window: usize,
) -> Result<TopkMap> {
    if k == 0 {
        return Err(CoreError::InvalidInput("k must be positive".into()));
    }
    let mut map = TopkMap::new();
    for (dialogue, turn_index) in corpus.agent_turns() {
        let query = crate::corpus::query_for_agent_turn(dialogue, turn_index, context_window)?;
        let mut ids = retrieve(&query)?;
        ids.truncate(k);
        map.insert((dialogue.dial_id.clone(), turn_index), ids);
    }
    Ok(map)
}

/// Group label spans by turn and passage. `include_aeg=false` keeps only
/// gold spans.
pub fn spans_from_labels(labels: &[EvidenceLabel], include_aeg: bool) -> SpanLookup {
    let mut map = SpanLookup::new();
    for l in labels {
        if !include_aeg && l.kind != EvidenceKind::Gold {
            continue;
        }
        map.entry((l.dial_id.clone(), l.turn_index, l.passage_id.clone()))
            .or_default()
            .push((l.span_start, l.span_end));
    }
    for spans in map.values_mut() {
        spans.sort_unstable();
        spans.dedup();
    }
    map
}

/// Group indicator predictions by turn and passage.
pub fn spans_from_predictions(rows: &[PredictionRow]) -> SpanLookup {
    let mut map = SpanLookup::new();
    for r in rows {
        map.entry((r.dial_id.clone(), r.turn_index, r.passage_id.clone()))
            .or_default()
            .push((r.span_start, r.span_end));
    }
    for spans in map.values_mut() {
        spans.sort_unstable();
        spans.dedup();
    }
    map
}

/// Token span (inclusive) covering all tokens whose char ranges overlap
/// `[span_start, span_end)`; `None` when no token overlaps.
pub fn char_span_to_token_span(
    text: &str,
    span_start: usize,
    span_end: usize,
) -> Option<(usize, usize)> {
    let mut first = None;
    let mut last = None;
    for (i, t) in tokenize_with_offsets(text).iter().enumerate() {
        if t.start < span_end && span_start < t.end {
            if first.is_none() {
                first = Some(i);
            }
            last = Some(i);
        }
    }
    Some((first?, last?))
}

/// Role-tagged turns strictly before `turn`, within the window.
pub fn dialogue_context(dialogue: &Dialogue, turn: usize, window: usize) -> String {
    let start = turn.saturating_sub(window);
    dialogue.turns[start..turn]
        .iter()
        .map(|t| {
            let tag = match t.role {
                Role::User => "user",
                Role::Agent => "agent",
            };
            format!("{tag}: {}", t.text)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn keep_dialogue(filter: Option<&BTreeSet<String>>, dial_id: &str) -> bool {
    filter.is_none_or(|f| f.contains(dial_id))
}

/// Indicator training set: one span example per label row (gold and,
/// when present, AEG kinds) plus one NO_EVIDENCE example per retrieved
/// passage without any label. Nulls are judged against the full label
/// set, so the `use_aeg_labels` training toggle removes exactly the
/// AEG-kind examples.
pub fn build_indicator_examples(
    corpus: &CorpusStore,
    labels: &[EvidenceLabel],
    topk: &TopkMap,
    context_window: usize,
    dial_filter: Option<&BTreeSet<String>>,
) -> Result<Vec<IndicatorExample>> {
    let mut by_turn: BTreeMap<(String, usize), Vec<&EvidenceLabel>> = BTreeMap::new();
    for l in labels {
        by_turn
            .entry((l.dial_id.clone(), l.turn_index))
            .or_default()
            .push(l);
    }
    let empty: Vec<&EvidenceLabel> = Vec::new();
    let mut examples = Vec::new();
    for (dialogue, turn_index) in corpus.agent_turns() {
        if !keep_dialogue(dial_filter, &dialogue.dial_id) {
            continue;
        }
        let context = dialogue_context(dialogue, turn_index - 1, context_window);
        let query = dialogue.turns[turn_index - 1].text.clone();
        let key = (dialogue.dial_id.clone(), turn_index);
        let turn_labels = by_turn.get(&key).unwrap_or(&empty);
        let labeled_passages: BTreeSet<&str> =
            turn_labels.iter().map(|l| l.passage_id.as_str()).collect();

        for label in turn_labels {
            let text = corpus.passage_text(&label.passage_id).ok_or_else(|| {
                CoreError::Integrity(format!(
                    "label references unknown passage `{}`",
                    label.passage_id
                ))
            })?;
            let Some((start_tok, end_tok)) =
                char_span_to_token_span(text, label.span_start, label.span_end)
            else {
                return Err(CoreError::Integrity(format!(
                    "label span {}..{} covers no tokens of `{}`",
                    label.span_start, label.span_end, label.passage_id
                )));
            };
            examples.push(IndicatorExample {
                dial_id: dialogue.dial_id.clone(),
                turn_index,
                context: context.clone(),
                query: query.clone(),
                passage_id: label.passage_id.clone(),
                passage_text: text.to_string(),
                target: SpanTarget::Span { start_tok, end_tok },
                kind: Some(label.kind),
            });
        }
        for pid in topk.get(&key).map(Vec::as_slice).unwrap_or_default() {
            if labeled_passages.contains(pid.as_str()) {
                continue;
            }
            let text = corpus.passage_text(pid).ok_or_else(|| {
                CoreError::Integrity(format!("retrieved unknown passage `{pid}`"))
            })?;
            examples.push(IndicatorExample {
                dial_id: dialogue.dial_id.clone(),
                turn_index,
                context: context.clone(),
                query: query.clone(),
                passage_id: pid.clone(),
                passage_text: text.to_string(),
                target: SpanTarget::NoEvidence,
                kind: None,
            });
        }
    }
    Ok(examples)
}

/// Generator training/eval set: per agent turn, the top-k passages with
/// evidence masks resolved from `spans` (`None` = evidence-free run) and
/// the agent response as target.
pub fn build_generator_examples(
    corpus: &CorpusStore,
    topk: &TopkMap,
    spans: Option<&SpanLookup>,
    vocab: &Vocab,
    max_seq_len: usize,
    context_window: usize,
    dial_filter: Option<&BTreeSet<String>>,
) -> Result<Vec<GeneratorExample>> {
    let mut examples = Vec::new();
    for (dialogue, turn_index) in corpus.agent_turns() {
        if !keep_dialogue(dial_filter, &dialogue.dial_id) {
            continue;
        }
        let key = (dialogue.dial_id.clone(), turn_index);
        let Some(pids) = topk.get(&key) else {
            return Err(CoreError::InvalidInput(format!(
                "no retrieval results for {}#{turn_index}",
                dialogue.dial_id
            )));
        };
        if pids.is_empty() {
            return Err(CoreError::InvalidInput(format!(
                "empty retrieval results for {}#{turn_index}",
                dialogue.dial_id
            )));
        }
        let context = dialogue_context(dialogue, turn_index - 1, context_window);
        let query = dialogue.turns[turn_index - 1].text.clone();
        let mut inputs = Vec::with_capacity(pids.len());
        for pid in pids {
            let text = corpus.passage_text(pid).ok_or_else(|| {
                CoreError::Integrity(format!("retrieved unknown passage `{pid}`"))
            })?;
            let mask_spans: Vec<MaskSpan> = spans
                .and_then(|s| s.get(&(dialogue.dial_id.clone(), turn_index, pid.clone())))
                .map(|ranges| {
                    ranges
                        .iter()
                        .map(|&(s, e)| MaskSpan {
                            passage_id: pid.clone(),
                            span_start: s,
                            span_end: e,
                        })
                        .collect()
                })
                .unwrap_or_default();
            inputs.push(encode_generator_input(
                &context,
                &query,
                pid,
                text,
                &mask_spans,
                vocab,
                max_seq_len,
            )?);
        }
        let target_text = &dialogue.turns[turn_index].text;
        examples.push(GeneratorExample {
            dial_id: dialogue.dial_id.clone(),
            turn_index,
            inputs,
            target_ids: vocab.encode(target_text),
        });
    }
    Ok(examples)
}

/// Resolve the span lookup for an evidence source. `Predicted` runs the
/// indicator over each turn's retrieved passages.
pub fn resolve_evidence_spans(
    corpus: &CorpusStore,
    source: EvidenceSource,
    labels: Option<&[EvidenceLabel]>,
    indicator: Option<&IndicatorModel>,
    topk: &TopkMap,
    context_window: usize,
) -> Result<Option<SpanLookup>> {
    match source {
        EvidenceSource::None => Ok(None),
        EvidenceSource::Gold => {
            let labels = labels.ok_or_else(|| {
                CoreError::InvalidInput("evidence source `gold` requires a label file".into())
            })?;
            Ok(Some(spans_from_labels(labels, false)))
        }
        EvidenceSource::Aeg => {
            let labels = labels.ok_or_else(|| {
                CoreError::InvalidInput("evidence source `aeg` requires a label file".into())
            })?;
            Ok(Some(spans_from_labels(labels, true)))
        }
        EvidenceSource::Predicted => {
            let model = indicator.ok_or_else(|| {
                CoreError::InvalidInput(
                    "evidence source `predicted` requires an indicator checkpoint".into(),
                )
            })?;
            Ok(Some(spans_from_predictions(&predict_evidence(
                corpus,
                model,
                topk,
                context_window,
            )?)))
        }
    }
}

/// Run the indicator over every turn's retrieved passages; rows with a
/// NO_EVIDENCE outcome are omitted.
pub fn predict_evidence(
    corpus: &CorpusStore,
    model: &IndicatorModel,
    topk: &TopkMap,
    context_window: usize,
) -> Result<Vec<PredictionRow>> {
    let mut rows = Vec::new();
    for (dialogue, turn_index) in corpus.agent_turns() {
        let key = (dialogue.dial_id.clone(), turn_index);
        let Some(pids) = topk.get(&key) else {
            continue;
        };
        let context = dialogue_context(dialogue, turn_index - 1, context_window);
        let query = &dialogue.turns[turn_index - 1].text;
        let passages: Vec<(String, String)> = pids
            .iter()
            .map(|pid| {
                corpus
                    .passage_text(pid)
                    .map(|t| (pid.clone(), t.to_string()))
                    .ok_or_else(|| {
                        CoreError::Integrity(format!("retrieved unknown passage `{pid}`"))
                    })
            })
            .collect::<Result<_>>()?;
        for pred in model.predict_evidence_set(&context, query, &passages)? {
            let span = pred.span.expect("predict_evidence_set omits null rows");
            rows.push(PredictionRow {
                dial_id: dialogue.dial_id.clone(),
                turn_index,
                passage_id: pred.passage_id,
                span_start: span.char_start,
                span_end: span.char_end,
                score: pred.score,
            });
        }
    }
    Ok(rows)
}

/// Deterministic split of dialogue ids: `n_dev` are held out after a
/// seeded shuffle; the rest train.
pub fn split_dialogue_ids(
    corpus: &CorpusStore,
    n_dev: usize,
    seed: u64,
) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    let mut ids: Vec<String> = corpus.dialogues().map(|d| d.dial_id.clone()).collect();
    if n_dev >= ids.len() {
        return Err(CoreError::InvalidInput(format!(
            "cannot hold out {n_dev} of {} dialogues",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let dev: BTreeSet<String> = ids.split_off(ids.len() - n_dev).into_iter().collect();
    Ok((ids.into_iter().collect(), dev))
}
