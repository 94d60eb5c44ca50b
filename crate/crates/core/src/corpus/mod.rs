//! Data model, ingestion, chunking, query construction, and the seeded
//! synthetic corpus generator.

pub mod chunk;
pub mod ingest;
pub mod synth;
pub mod tokenize;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
pub use chunk::{chunk_document, ChunkParams};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub text: String,
    pub domain_tag: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub passage_id: String,
    pub doc_id: String,
    pub char_start: usize,
    pub char_end: usize,
    pub token_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Agent,
}

/// Gold evidence reference as stored in dialogues.jsonl (passage-local
/// char offsets).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldSpan {
    pub passage_id: String,
    pub span_start: usize,
    pub span_end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    pub role: Role,
    pub text: String,
    pub gold_evidence: Vec<GoldSpan>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dial_id: String,
    pub turns: Vec<Turn>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceKind {
    Gold,
    CurrentRelated,
    HistoricalRelated,
}

/// A labeled evidence span (passage-local char offsets) with its origin.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EvidenceSpan {
    pub passage_id: String,
    pub span_start: usize,
    pub span_end: usize,
    pub kind: EvidenceKind,
    pub source_turn: usize,
}

/// One labels.jsonl row.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EvidenceLabel {
    pub dial_id: String,
    pub turn_index: usize,
    pub passage_id: String,
    pub span_start: usize,
    pub span_end: usize,
    pub kind: EvidenceKind,
    pub source_turn: usize,
}

impl EvidenceLabel {
    pub fn span(&self) -> EvidenceSpan {
        EvidenceSpan {
            passage_id: self.passage_id.clone(),
            span_start: self.span_start,
            span_end: self.span_end,
            kind: self.kind,
            source_turn: self.source_turn,
        }
    }
}

/// One evidence-prediction row (predictions.jsonl).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub dial_id: String,
    pub turn_index: usize,
    pub passage_id: String,
    pub span_start: usize,
    pub span_end: usize,
    pub score: f64,
}

/// One generated-response row (generations.jsonl).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRow {
    pub dial_id: String,
    pub turn_index: usize,
    pub response: String,
}

/// Immutable, fully cross-referenced corpus: documents, their chunked
/// passages, and dialogues.
#[derive(Debug)]
pub struct CorpusStore {
    documents: BTreeMap<String, Document>,
    passages: BTreeMap<String, Passage>,
    dialogues: BTreeMap<String, Dialogue>,
    passage_texts: BTreeMap<String, String>,
    doc_order: Vec<String>,
    dialogue_order: Vec<String>,
    passage_order: Vec<String>,
    chunk_params: ChunkParams,
}

fn char_slice(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end - start).collect()
}

impl CorpusStore {
    /// Chunk documents, validate all cross-references, and freeze.
    pub fn from_parts(
        documents: Vec<Document>,
        dialogues: Vec<Dialogue>,
        chunk_params: &ChunkParams,
    ) -> Result<CorpusStore> {
        let mut store = CorpusStore {
            documents: BTreeMap::new(),
            passages: BTreeMap::new(),
            dialogues: BTreeMap::new(),
            passage_texts: BTreeMap::new(),
            doc_order: Vec::new(),
            dialogue_order: Vec::new(),
            passage_order: Vec::new(),
            chunk_params: *chunk_params,
        };
        for doc in documents {
            if doc.text.is_empty() {
                return Err(CoreError::InvalidInput(format!(
                    "document `{}` has empty text",
                    doc.doc_id
                )));
            }
            if store.documents.contains_key(&doc.doc_id) {
                return Err(CoreError::InvalidInput(format!(
                    "duplicate doc_id `{}`",
                    doc.doc_id
                )));
            }
            for p in chunk_document(&doc, chunk_params)? {
                store
                    .passage_texts
                    .insert(p.passage_id.clone(), char_slice(&doc.text, p.char_start, p.char_end));
                store.passage_order.push(p.passage_id.clone());
                store.passages.insert(p.passage_id.clone(), p);
            }
            store.doc_order.push(doc.doc_id.clone());
            store.documents.insert(doc.doc_id.clone(), doc);
        }
        for dlg in dialogues {
            store.validate_dialogue(&dlg)?;
            if store.dialogues.contains_key(&dlg.dial_id) {
                return Err(CoreError::InvalidInput(format!(
                    "duplicate dial_id `{}`",
                    dlg.dial_id
                )));
            }
            store.dialogue_order.push(dlg.dial_id.clone());
            store.dialogues.insert(dlg.dial_id.clone(), dlg);
        }
        Ok(store)
    }

    fn validate_dialogue(&self, dlg: &Dialogue) -> Result<()> {
        for (i, turn) in dlg.turns.iter().enumerate() {
            if turn.index != i {
                return Err(CoreError::InvalidInput(format!(
                    "dialogue `{}`: turn index {} at position {i}",
                    dlg.dial_id, turn.index
                )));
            }
            let expected = if i % 2 == 0 { Role::User } else { Role::Agent };
            if turn.role != expected {
                return Err(CoreError::InvalidInput(format!(
                    "dialogue `{}` turn {i}: roles must alternate user/agent starting with user",
                    dlg.dial_id
                )));
            }
            if turn.role == Role::User && !turn.gold_evidence.is_empty() {
                return Err(CoreError::InvalidInput(format!(
                    "dialogue `{}` turn {i}: gold evidence on a user turn",
                    dlg.dial_id
                )));
            }
            for g in &turn.gold_evidence {
                let text = self.passage_texts.get(&g.passage_id).ok_or_else(|| {
                    CoreError::Integrity(format!(
                        "dialogue `{}` turn {i} references unknown passage `{}`",
                        dlg.dial_id, g.passage_id
                    ))
                })?;
                let len = text.chars().count();
                if g.span_start >= g.span_end || g.span_end > len {
                    return Err(CoreError::InvalidInput(format!(
                        "dialogue `{}` turn {i}: span {}..{} outside passage `{}` (len {len})",
                        dlg.dial_id, g.span_start, g.span_end, g.passage_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn chunk_params(&self) -> &ChunkParams {
        &self.chunk_params
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.doc_order.iter().map(|id| &self.documents[id])
    }

    pub fn dialogues(&self) -> impl Iterator<Item = &Dialogue> {
        self.dialogue_order.iter().map(|id| &self.dialogues[id])
    }

    pub fn passages(&self) -> impl Iterator<Item = &Passage> {
        self.passage_order.iter().map(|id| &self.passages[id])
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.documents.get(doc_id)
    }

    pub fn dialogue(&self, dial_id: &str) -> Option<&Dialogue> {
        self.dialogues.get(dial_id)
    }

    pub fn passage(&self, passage_id: &str) -> Option<&Passage> {
        self.passages.get(passage_id)
    }

    pub fn passage_text(&self, passage_id: &str) -> Option<&str> {
        self.passage_texts.get(passage_id).map(|s| s.as_str())
    }

    pub fn n_documents(&self) -> usize {
        self.documents.len()
    }

    pub fn n_passages(&self) -> usize {
        self.passages.len()
    }

    pub fn n_dialogues(&self) -> usize {
        self.dialogues.len()
    }

    /// `(dialogue, turn_index)` pairs for every agent turn, in corpus order.
    pub fn agent_turns(&self) -> Vec<(&Dialogue, usize)> {
        let mut out = Vec::new();
        for dlg in self.dialogues() {
            for turn in &dlg.turns {
                if turn.role == Role::Agent {
                    out.push((dlg, turn.index));
                }
            }
        }
        out
    }

    /// Vocabulary over all document and dialogue text plus the query
    /// role tags.
    pub fn build_vocab(&self) -> tokenize::Vocab {
        let mut texts: Vec<&str> = Vec::new();
        for d in self.documents() {
            texts.push(&d.text);
            texts.push(&d.title);
        }
        for dlg in self.dialogues() {
            for t in &dlg.turns {
                texts.push(&t.text);
            }
        }
        texts.push("user :");
        texts.push("agent :");
        tokenize::Vocab::build(texts)
    }
}

/// Role-tagged retrieval query: the last `window` context turns followed by
/// the user turn at `turn_index`.
pub fn build_query(dialogue: &Dialogue, turn_index: usize, window: usize) -> Result<String> {
    let turn = dialogue.turns.get(turn_index).ok_or_else(|| {
        CoreError::InvalidInput(format!(
            "turn index {turn_index} out of range for dialogue `{}`",
            dialogue.dial_id
        ))
    })?;
    if turn.role != Role::User {
        return Err(CoreError::InvalidInput(format!(
            "turn {turn_index} of dialogue `{}` is not a user turn",
            dialogue.dial_id
        )));
    }
    let start = turn_index.saturating_sub(window);
    let mut parts = Vec::with_capacity(turn_index - start + 1);
    for t in &dialogue.turns[start..=turn_index] {
        let tag = match t.role {
            Role::User => "user",
            Role::Agent => "agent",
        };
        parts.push(format!("{tag}: {}", t.text));
    }
    Ok(parts.join(" "))
}

/// Query for the user turn immediately preceding an agent turn.
pub fn query_for_agent_turn(dialogue: &Dialogue, agent_turn: usize, window: usize) -> Result<String> {
    if agent_turn == 0 {
        return Err(CoreError::InvalidInput(
            "agent turn cannot be turn 0".into(),
        ));
    }
    build_query(dialogue, agent_turn - 1, window)
}

/// Per-kind label counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelStats {
    pub gold: usize,
    pub current_related: usize,
    pub historical_related: usize,
    pub total: usize,
}

pub fn label_stats(labels: &[EvidenceLabel]) -> LabelStats {
    let mut s = LabelStats::default();
    for l in labels {
        match l.kind {
            EvidenceKind::Gold => s.gold += 1,
            EvidenceKind::CurrentRelated => s.current_related += 1,
            EvidenceKind::HistoricalRelated => s.historical_related += 1,
        }
    }
    s.total = s.gold + s.current_related + s.historical_related;
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn make_dialogue(texts: &[&str]) -> Dialogue {
        Dialogue {
            dial_id: "d0".into(),
            turns: texts
                .iter()
                .enumerate()
                .map(|(i, t)| Turn {
                    index: i,
                    role: if i % 2 == 0 { Role::User } else { Role::Agent },
                    text: t.to_string(),
                    gold_evidence: vec![],
                })
                .collect(),
        }
    }

    #[test]
    fn query_window_zero_is_current_turn_only() {
        let d = make_dialogue(&["u0", "a0", "u1"]);
        assert_eq!(build_query(&d, 2, 0).unwrap(), "user: u1");
    }

    #[test]
    fn query_includes_tagged_history_most_recent_last() {
        let d = make_dialogue(&["u0", "a0", "u1"]);
        assert_eq!(build_query(&d, 2, 2).unwrap(), "user: u0 agent: a0 user: u1");
    }

    #[test]
    fn query_window_clamps_to_history() {
        let d = make_dialogue(&["u0", "a0", "u1"]);
        assert_eq!(
            build_query(&d, 2, 99).unwrap(),
            "user: u0 agent: a0 user: u1"
        );
    }

    #[test]
    fn query_rejects_agent_or_out_of_range_turns() {
        let d = make_dialogue(&["u0", "a0", "u1"]);
        assert!(build_query(&d, 1, 2).is_err());
        assert!(build_query(&d, 7, 2).is_err());
        assert_eq!(query_for_agent_turn(&d, 1, 0).unwrap(), "user: u0");
    }

    #[test]
    fn label_stats_totals() {
        let mk = |kind| EvidenceLabel {
            dial_id: "d".into(),
            turn_index: 1,
            passage_id: "p".into(),
            span_start: 0,
            span_end: 1,
            kind,
            source_turn: 1,
        };
        let labels: Vec<EvidenceLabel> = std::iter::repeat_with(|| mk(EvidenceKind::HistoricalRelated))
            .take(3)
            .chain(std::iter::repeat_with(|| mk(EvidenceKind::CurrentRelated)).take(5))
            .chain(std::iter::repeat_with(|| mk(EvidenceKind::Gold)).take(2))
            .collect();
        let s = label_stats(&labels);
        assert_eq!(s.historical_related, 3);
        assert_eq!(s.current_related, 5);
        assert_eq!(s.gold, 2);
        assert_eq!(s.total, 10);
        assert_eq!(label_stats(&[]), LabelStats::default());
    }

    #[test]
    fn store_rejects_bad_dialogues() {
        let doc = Document {
            doc_id: "doc0".into(),
            title: "t".into(),
            text: "alpha beta gamma delta epsilon zeta eta theta".into(),
            domain_tag: "g".into(),
        };
        let params = ChunkParams::default();

        // Dangling passage reference.
        let mut dlg = make_dialogue(&["u0", "a0"]);
        dlg.turns[1].gold_evidence.push(GoldSpan {
            passage_id: "doc9::p0".into(),
            span_start: 0,
            span_end: 5,
        });
        let err = CorpusStore::from_parts(vec![doc.clone()], vec![dlg], &params);
        assert!(matches!(err, Err(CoreError::Integrity(_))));

        // Bad role alternation.
        let mut dlg = make_dialogue(&["u0", "a0"]);
        dlg.turns[1].role = Role::User;
        assert!(CorpusStore::from_parts(vec![doc.clone()], vec![dlg], &params).is_err());

        // Span out of passage bounds.
        let mut dlg = make_dialogue(&["u0", "a0"]);
        dlg.turns[1].gold_evidence.push(GoldSpan {
            passage_id: "doc0::p0".into(),
            span_start: 0,
            span_end: 10_000,
        });
        assert!(CorpusStore::from_parts(vec![doc], vec![dlg], &params).is_err());
    }

    #[test]
    fn store_exposes_passages_and_texts() {
        let doc = Document {
            doc_id: "doc0".into(),
            title: "t".into(),
            text: "alpha beta gamma delta".into(),
            domain_tag: "g".into(),
        };
        let store =
            CorpusStore::from_parts(vec![doc], vec![], &ChunkParams::default()).unwrap();
        assert_eq!(store.n_passages(), 1);
        let p = store.passages().next().unwrap();
        assert_eq!(p.passage_id, "doc0::p0");
        assert_eq!(store.passage_text("doc0::p0").unwrap(), "alpha beta gamma delta");
    }
}
