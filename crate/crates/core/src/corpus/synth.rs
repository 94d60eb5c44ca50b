//! Seeded synthetic corpus: templated fact documents plus dialogues whose
//! agent turns copy the queried fact sentence.
//!
//! Every (document, attribute) fact carries a coined value token (e.g.
//! `qz37`) that appears nowhere else in the corpus, so producing a correct
//! response requires the evidence sentence. Each dialogue grounds in one
//! document and asks about attributes no other dialogue uses, which keeps
//! held-out dialogues genuinely unseen.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::chunk::{chunk_document, ChunkParams};
use super::ingest::write_jsonl;
use super::{Dialogue, Document, GoldSpan, Passage, Role, Turn};
use crate::error::{CoreError, Result};

const ADJECTIVES: [&str; 25] = [
    "amber", "brisk", "cedar", "dusty", "eager", "frosty", "golden", "hazel", "ivory", "jade",
    "keen", "lunar", "mossy", "noble", "oaken", "pale", "quiet", "rustic", "silver", "tidal",
    "umber", "velvet", "windy", "yonder", "zesty",
];

const NOUNS: [&str; 20] = [
    "archive", "bakery", "clinic", "depot", "forum", "garden", "harbor", "inn", "kiosk",
    "library", "market", "museum", "office", "pavilion", "quarry", "registry", "studio",
    "terrace", "union", "workshop",
];

const ATTRIBUTES: [&str; 5] = ["fee", "hours", "phone", "address", "capacity"];

const DISTRACTOR_TEMPLATES: [&str; 12] = [
    "general information about the {e} appears in this section .",
    "visitors often ask about the {e} at the desk .",
    "the {e} welcomes guests throughout the year .",
    "please review the notice board near the {e} .",
    "staff at the {e} can answer common questions .",
    "the {a} policy of nearby venues may differ .",
    "updates about the {a} are posted every season .",
    "records about the {a} are kept by the office .",
    "many people compare the {a} with other venues .",
    "a guide about the {e} is available on request .",
    "the {e} appears on several local maps .",
    "opening notes about the {e} are printed below .",
];

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_docs: usize,
    pub n_dialogues: usize,
    /// User/agent exchanges per dialogue; each asks about a fresh attribute.
    pub exchanges_per_dialogue: usize,
    pub distractors_per_doc: usize,
    pub chunk: ChunkParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_docs: 20,
            n_dialogues: 16,
            exchanges_per_dialogue: 2,
            distractors_per_doc: 32,
            chunk: ChunkParams::default(),
        }
    }
}

struct Fact {
    attr_idx: usize,
    sentence: String,
    /// Char range of the sentence within the document text.
    doc_start: usize,
    doc_end: usize,
}

struct SynthDoc {
    document: Document,
    entity: String,
    facts: Vec<Fact>,
    passages: Vec<Passage>,
}

fn fact_sentence(attr: &str, entity: &str, value: &str) -> String {
    format!("the {attr} of the {entity} is {value} .")
}

fn coin_value(rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> String {
    loop {
        let a = (b'a' + rng.gen_range(0..26u8)) as char;
        let b = (b'a' + rng.gen_range(0..26u8)) as char;
        let c = (b'0' + rng.gen_range(0..10u8)) as char;
        let d = (b'0' + rng.gen_range(0..10u8)) as char;
        let tok: String = [a, b, c, d].iter().collect();
        if used.insert(tok.clone()) {
            return tok;
        }
    }
}

fn distractor(doc_idx: usize, counter: usize, entity: &str) -> String {
    let template = DISTRACTOR_TEMPLATES[(doc_idx + counter) % DISTRACTOR_TEMPLATES.len()];
    let attr = ATTRIBUTES[counter % ATTRIBUTES.len()];
    template.replace("{e}", entity).replace("{a}", attr)
}

fn build_doc(
    doc_idx: usize,
    entity: String,
    values: &[String],
    cfg: &SynthConfig,
) -> Result<SynthDoc> {
    // Distractors fill six gaps: before each of the five facts and after
    // the last, remainder in the trailing gap.
    let per_gap = cfg.distractors_per_doc / 6;
    let trailing = cfg.distractors_per_doc - per_gap * 5;
    let mut counter = 0usize;
    let mut sentences: Vec<(String, bool, usize)> = Vec::new(); // (text, is_fact, attr_idx)
    for (attr_idx, attr) in ATTRIBUTES.iter().enumerate() {
        for _ in 0..per_gap {
            sentences.push((distractor(doc_idx, counter, &entity), false, 0));
            counter += 1;
        }
        sentences.push((fact_sentence(attr, &entity, &values[attr_idx]), true, attr_idx));
    }
    for _ in 0..trailing {
        sentences.push((distractor(doc_idx, counter, &entity), false, 0));
        counter += 1;
    }

    let mut facts = Vec::new();
    let mut offset = 0usize;
    let mut parts: Vec<&str> = Vec::with_capacity(sentences.len());
    for (i, (text, is_fact, attr_idx)) in sentences.iter().enumerate() {
        let start = offset + if i > 0 { 1 } else { 0 }; // joining space
        let len = text.chars().count();
        if *is_fact {
            facts.push(Fact {
                attr_idx: *attr_idx,
                sentence: text.clone(),
                doc_start: start,
                doc_end: start + len,
            });
        }
        offset = start + len;
        parts.push(text);
    }

    let document = Document {
        doc_id: format!("doc{doc_idx}"),
        title: format!("{entity} directory"),
        text: parts.join(" "),
        domain_tag: "venues".to_string(),
    };
    let passages = chunk_document(&document, &cfg.chunk)?;
    Ok(SynthDoc {
        document,
        entity,
        facts,
        passages,
    })
}

/// First passage whose char range fully contains `[start, end)`.
fn containing_passage<'a>(passages: &'a [Passage], start: usize, end: usize) -> Option<&'a Passage> {
    passages
        .iter()
        .find(|p| p.char_start <= start && end <= p.char_end)
}

/// Generate documents and dialogues in memory. Pure function of the config.
pub fn build_synthetic(cfg: &SynthConfig) -> Result<(Vec<Document>, Vec<Dialogue>)> {
    if cfg.n_docs < 1 || cfg.n_dialogues < 1 {
        return Err(CoreError::InvalidInput(
            "n_docs and n_dialogues must be >= 1".into(),
        ));
    }
    if cfg.n_docs > ADJECTIVES.len() * NOUNS.len() {
        return Err(CoreError::InvalidInput(format!(
            "at most {} synthetic documents supported",
            ADJECTIVES.len() * NOUNS.len()
        )));
    }
    if cfg.exchanges_per_dialogue < 1 || cfg.exchanges_per_dialogue > ATTRIBUTES.len() {
        return Err(CoreError::InvalidInput(format!(
            "exchanges_per_dialogue must be in 1..={}",
            ATTRIBUTES.len()
        )));
    }
    let dialogues_per_doc = ATTRIBUTES.len() / cfg.exchanges_per_dialogue;
    if cfg.n_dialogues > cfg.n_docs * dialogues_per_doc {
        return Err(CoreError::InvalidInput(format!(
            "at most {} dialogues for {} docs at {} exchanges each (attributes are never reused)",
            cfg.n_docs * dialogues_per_doc,
            cfg.n_docs,
            cfg.exchanges_per_dialogue
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Entities: seeded shuffle of the adjective x noun grid.
    let mut combos: Vec<String> = ADJECTIVES
        .iter()
        .flat_map(|a| NOUNS.iter().map(move |n| format!("{a} {n}")))
        .collect();
    combos.shuffle(&mut rng);
    let entities = &combos[..cfg.n_docs];

    // Globally unique value tokens, one per (doc, attribute).
    let mut used = HashSet::new();
    let mut docs = Vec::with_capacity(cfg.n_docs);
    for (i, entity) in entities.iter().enumerate() {
        let values: Vec<String> = (0..ATTRIBUTES.len())
            .map(|_| coin_value(&mut rng, &mut used))
            .collect();
        docs.push(build_doc(i, entity.clone(), &values, cfg)?);
    }

    // Per-doc attribute order; dialogues consume it in disjoint slices so
    // no (doc, attribute) pair is asked twice anywhere in the corpus.
    let mut attr_orders: Vec<Vec<usize>> = Vec::with_capacity(cfg.n_docs);
    for _ in 0..cfg.n_docs {
        let mut order: Vec<usize> = (0..ATTRIBUTES.len()).collect();
        order.shuffle(&mut rng);
        attr_orders.push(order);
    }

    let mut dialogues = Vec::with_capacity(cfg.n_dialogues);
    for d in 0..cfg.n_dialogues {
        let doc_idx = d % cfg.n_docs;
        let slot = d / cfg.n_docs; // which slice of this doc's attrs
        let sdoc = &docs[doc_idx];
        let lo = slot * cfg.exchanges_per_dialogue;
        let attrs = &attr_orders[doc_idx][lo..lo + cfg.exchanges_per_dialogue];

        let mut turns = Vec::with_capacity(2 * cfg.exchanges_per_dialogue);
        for (x, &attr_idx) in attrs.iter().enumerate() {
            let attr = ATTRIBUTES[attr_idx];
            let question = if x == 0 {
                format!("what is the {attr} of the {} ?", sdoc.entity)
            } else {
                format!("and what is the {attr} ?")
            };
            let fact = sdoc
                .facts
                .iter()
                .find(|f| f.attr_idx == attr_idx)
                .expect("every attribute has a fact");
            let passage = containing_passage(&sdoc.passages, fact.doc_start, fact.doc_end)
                .ok_or_else(|| {
                    CoreError::InvalidInput(format!(
                        "fact sentence not contained in any passage of {} (chunk overlap too small)",
                        sdoc.document.doc_id
                    ))
                })?;
            turns.push(Turn {
                index: 2 * x,
                role: Role::User,
                text: question,
                gold_evidence: vec![],
            });
            turns.push(Turn {
                index: 2 * x + 1,
                role: Role::Agent,
                text: fact.sentence.clone(),
                gold_evidence: vec![GoldSpan {
                    passage_id: passage.passage_id.clone(),
                    span_start: fact.doc_start - passage.char_start,
                    span_end: fact.doc_end - passage.char_start,
                }],
            });
        }
        dialogues.push(Dialogue {
            dial_id: format!("dlg{d}"),
            turns,
        });
    }

    Ok((docs.into_iter().map(|d| d.document).collect(), dialogues))
}

/// Generate and write documents.jsonl + dialogues.jsonl.
pub fn synthesize_corpus(cfg: &SynthConfig, doc_file: &Path, dialogue_file: &Path) -> Result<()> {
    let (docs, dialogues) = build_synthetic(cfg)?;
    write_jsonl(doc_file, &docs)?;
    write_jsonl(dialogue_file, &dialogues)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize::tokenize;
    use crate::corpus::CorpusStore;

    #[test]
    fn same_seed_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_docs: 4,
            n_dialogues: 3,
            ..SynthConfig::default()
        };
        let (d1, g1) = (dir.path().join("a1"), dir.path().join("b1"));
        let (d2, g2) = (dir.path().join("a2"), dir.path().join("b2"));
        synthesize_corpus(&cfg, &d1, &g1).unwrap();
        synthesize_corpus(&cfg, &d2, &g2).unwrap();
        assert_eq!(std::fs::read(&d1).unwrap(), std::fs::read(&d2).unwrap());
        assert_eq!(std::fs::read(&g1).unwrap(), std::fs::read(&g2).unwrap());
    }

    #[test]
    fn different_seeds_differ() {
        let a = build_synthetic(&SynthConfig {
            seed: 1,
            n_docs: 2,
            n_dialogues: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        let b = build_synthetic(&SynthConfig {
            seed: 2,
            n_docs: 2,
            n_dialogues: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        assert_ne!(a.0[0].text, b.0[0].text);
    }

    #[test]
    fn gold_spans_contain_the_response_value() {
        let cfg = SynthConfig {
            seed: 1,
            n_docs: 1,
            n_dialogues: 1,
            ..SynthConfig::default()
        };
        let (docs, dialogues) = build_synthetic(&cfg).unwrap();
        let store = CorpusStore::from_parts(docs, dialogues, &cfg.chunk).unwrap();
        for dlg in store.dialogues() {
            for turn in dlg.turns.iter().filter(|t| t.role == Role::Agent) {
                // Value token is the second-to-last token of the response.
                let toks = tokenize(&turn.text);
                let value = &toks[toks.len() - 2];
                assert_eq!(turn.gold_evidence.len(), 1);
                let g = &turn.gold_evidence[0];
                let ptext = store.passage_text(&g.passage_id).unwrap();
                let span: String = ptext
                    .chars()
                    .skip(g.span_start)
                    .take(g.span_end - g.span_start)
                    .collect();
                assert!(span.contains(value), "span {span:?} missing value {value:?}");
                assert_eq!(span, turn.text, "gold span is exactly the fact sentence");
            }
        }
    }

    #[test]
    fn values_are_globally_unique() {
        let cfg = SynthConfig::default();
        let (docs, dialogues) = build_synthetic(&cfg).unwrap();
        let mut value_counts: std::collections::HashMap<String, usize> = Default::default();
        for doc in &docs {
            for tok in tokenize(&doc.text) {
                // Coined values: two letters then two digits.
                let chars: Vec<char> = tok.chars().collect();
                if chars.len() == 4
                    && chars[0].is_ascii_alphabetic()
                    && chars[1].is_ascii_alphabetic()
                    && chars[2].is_ascii_digit()
                    && chars[3].is_ascii_digit()
                {
                    *value_counts.entry(tok).or_default() += 1;
                }
            }
        }
        assert_eq!(value_counts.len(), docs.len() * ATTRIBUTES.len());
        // Each value appears exactly once across all documents.
        assert!(value_counts.values().all(|&c| c == 1));
        // Dialogue responses reuse only document fact sentences.
        for dlg in &dialogues {
            for t in dlg.turns.iter().filter(|t| t.role == Role::Agent) {
                assert!(docs.iter().any(|d| d.text.contains(&t.text)));
            }
        }
    }

    #[test]
    fn distractors_outnumber_used_facts_twenty_fold() {
        let cfg = SynthConfig::default(); // 20 docs, 16 dialogues
        let (docs, dialogues) = build_synthetic(&cfg).unwrap();
        let total_sentences: usize = docs
            .iter()
            .map(|d| d.text.matches(" .").count())
            .sum();
        let fact_sentences = docs.len() * ATTRIBUTES.len();
        let distractors = total_sentences - fact_sentences;
        let used_facts: usize = dialogues
            .iter()
            .map(|d| d.turns.iter().filter(|t| t.role == Role::Agent).count())
            .sum();
        assert!(
            distractors >= 20 * used_facts,
            "distractors {distractors} < 20x used facts {used_facts}"
        );
    }

    #[test]
    fn dialogue_attribute_pairs_are_never_reused() {
        let cfg = SynthConfig::default();
        let (docs, dialogues) = build_synthetic(&cfg).unwrap();
        let store = CorpusStore::from_parts(docs, dialogues, &cfg.chunk).unwrap();
        let mut seen = HashSet::new();
        for dlg in store.dialogues() {
            for turn in dlg.turns.iter().filter(|t| t.role == Role::Agent) {
                let g = &turn.gold_evidence[0];
                let doc_id = store.passage(&g.passage_id).unwrap().doc_id.clone();
                // Attribute is the second token of the fact sentence.
                let attr = tokenize(&turn.text)[1].clone();
                assert!(seen.insert((doc_id, attr)), "(doc, attribute) pair reused");
            }
        }
    }

    #[test]
    fn capacity_limits_are_enforced() {
        let cfg = SynthConfig {
            n_docs: 2,
            n_dialogues: 5, // 2 docs x 2 dialogues max at 2 exchanges
            ..SynthConfig::default()
        };
        assert!(build_synthetic(&cfg).is_err());
    }
}
