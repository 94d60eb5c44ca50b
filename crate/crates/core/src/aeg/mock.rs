//! Deterministic LLM stand-in. It parses the versioned prompts and
//! answers by token-overlap heuristics, so every AEG output is a pure
//! function of the prompt text.

use std::collections::BTreeSet;

use crate::corpus::tokenize::tokenize;
use crate::error::{CoreError, Result};

use super::client::LlmClient;
use super::prompt::{
    parse_chain_section, parse_numbered_items, parse_sections, section, GENERATION_HEADER_V1,
    VERIFICATION_HEADER_V1,
};

/// Minimum distinct-token overlap for the mock to quote a sentence.
const MIN_OVERLAP: usize = 2;

pub struct MockLlm {
    seed: u64,
}

impl MockLlm {
    pub fn new(seed: u64) -> MockLlm {
        MockLlm { seed }
    }
}

impl LlmClient for MockLlm {
    fn complete(&self, _request_id: &str, prompt: &str) -> Result<String> {
        deterministic_mock(prompt, self.seed)
    }

    fn name(&self) -> &str {
        "mock"
    }
}

/// Sentences of a passage: maximal spans ending at `.` (inclusive) or at
/// the end of text, trimmed. Each is a verbatim substring of the input.
fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        current.push(ch);
        if ch == '.' {
            let t = current.trim();
            if !t.is_empty() {
                sentences.push(t.to_string());
            }
            current.clear();
        }
    }
    let t = current.trim();
    if !t.is_empty() {
        sentences.push(t.to_string());
    }
    sentences
}

fn token_set(text: &str) -> BTreeSet<String> {
    tokenize(text).into_iter().collect()
}

fn overlap(a: &BTreeSet<String>, b: &BTreeSet<String>) -> usize {
    a.intersection(b).count()
}

/// Best sentence by distinct-token overlap with `target`; ties go to the
/// earliest sentence. Returns `(index, overlap)`.
fn best_sentence(sentences: &[BTreeSet<String>], target: &BTreeSet<String>) -> (usize, usize) {
    let mut best = (0usize, 0usize);
    for (i, s) in sentences.iter().enumerate() {
        let o = overlap(s, target);
        if o > best.1 {
            best = (i, o);
        }
    }
    best
}

fn mock_generation(sections: &[(String, String)]) -> Result<String> {
    let turn: usize = section(sections, "agent turn")?
        .trim()
        .parse()
        .map_err(|_| CoreError::Schema("agent turn is not a number".into()))?;
    let query_tokens = token_set(section(sections, "query")?);
    let chain = parse_chain_section(section(sections, "evidence chain")?)?;
    let chain_tokens: BTreeSet<String> = chain
        .iter()
        .flat_map(|(_, text)| tokenize(text))
        .collect();
    let passages = parse_numbered_items(section(sections, "passages")?)?;

    let mut lines = Vec::new();
    for (i, (_, text)) in passages.iter().enumerate() {
        let sentences = split_sentences(text);
        let sets: Vec<BTreeSet<String>> = sentences.iter().map(|s| token_set(s)).collect();
        if sets.is_empty() {
            continue;
        }
        let (cur_idx, cur_overlap) = best_sentence(&sets, &query_tokens);
        let current_quoted = cur_overlap >= MIN_OVERLAP;
        if current_quoted {
            lines.push(format!(
                "EVIDENCE\t{}\tcurrent\t{turn}\t{}",
                i + 1,
                sentences[cur_idx]
            ));
        }
        if !chain.is_empty() {
            let (hist_idx, hist_overlap) = best_sentence(&sets, &chain_tokens);
            if hist_overlap >= MIN_OVERLAP && !(current_quoted && hist_idx == cur_idx) {
                // Source turn: chain entry with the strongest overlap with
                // the chosen sentence, earliest turn on ties.
                let source = chain
                    .iter()
                    .map(|(t, text)| (overlap(&sets[hist_idx], &token_set(text)), *t))
                    .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
                    .map(|(_, t)| t)
                    .expect("chain is non-empty");
                lines.push(format!(
                    "EVIDENCE\t{}\thistorical\t{source}\t{}",
                    i + 1,
                    sentences[hist_idx]
                ));
            }
        }
    }
    if lines.is_empty() {
        return Ok("NONE".to_string());
    }
    Ok(lines.join("\n"))
}

fn mock_verification(sections: &[(String, String)]) -> Result<String> {
    let response_tokens = token_set(section(sections, "target response")?);
    let candidates = parse_numbered_items(section(sections, "candidates")?)?;
    let mut rationale = Vec::new();
    let mut verdicts = Vec::new();
    for (i, (_, snippet)) in candidates.iter().enumerate() {
        let o = overlap(&token_set(snippet), &response_tokens);
        rationale.push(format!(
            "candidate {}: {o} shared token(s) with the target response.",
            i + 1
        ));
        let verdict = if o > 0 { "COHERENT" } else { "INCOHERENT" };
        verdicts.push(format!("VERDICT\t{}\t{verdict}", i + 1));
    }
    rationale.extend(verdicts);
    Ok(rationale.join("\n"))
}

/// Pure function of `(prompt, seed)`; the seed is accepted for interface
/// parity but the heuristics are already deterministic.
pub fn deterministic_mock(prompt: &str, _seed: u64) -> Result<String> {
    let header = prompt.lines().next().unwrap_or_default().trim();
    let sections = parse_sections(prompt);
    match header {
        GENERATION_HEADER_V1 => mock_generation(&sections),
        VERIFICATION_HEADER_V1 => mock_verification(&sections),
        other => Err(CoreError::Schema(format!(
            "mock cannot serve prompt with header `{other}`"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aeg::prompt::{build_generation_prompt, build_verification_prompt};
    use crate::aeg::{ChainEntry, EvidenceChain};
    use crate::corpus::{EvidenceKind, EvidenceSpan};

    fn empty_chain() -> EvidenceChain {
        EvidenceChain {
            dial_id: "d".into(),
            entries: vec![],
        }
    }

    fn chain_with(turn: usize, text: &str) -> EvidenceChain {
        EvidenceChain {
            dial_id: "d".into(),
            entries: vec![ChainEntry {
                turn_index: turn,
                span: EvidenceSpan {
                    passage_id: "p0".into(),
                    span_start: 0,
                    span_end: text.chars().count(),
                    kind: EvidenceKind::Gold,
                    source_turn: turn,
                },
                text: text.into(),
            }],
        }
    }

    #[test]
    fn quotes_the_answer_sentence_as_current_related() {
        // Hand-checked overlaps with the query {what,is,the,fee,of,ochre,falcon,?}:
        // fact sentence shares {the,fee,of,ochre,falcon,is} = 6 tokens;
        // the distractor shares {the,ochre,falcon} = 3. The fact wins.
        let passage = "many guests praise the ochre falcon . \
                       the fee of the ochre falcon is qx07 .";
        let prompt = build_generation_prompt(
            &empty_chain(),
            "",
            "what is the fee of the ochre falcon ?",
            1,
            &[("p7".into(), passage.into())],
        )
        .unwrap();
        let out = deterministic_mock(&prompt, 0).unwrap();
        assert_eq!(
            out,
            "EVIDENCE\t1\tcurrent\t1\tthe fee of the ochre falcon is qx07 ."
        );
    }

    #[test]
    fn no_overlap_yields_none() {
        let prompt = build_generation_prompt(
            &empty_chain(),
            "",
            "completely unrelated words ?",
            1,
            &[("p0".into(), "zebra yak .".into())],
        )
        .unwrap();
        assert_eq!(deterministic_mock(&prompt, 0).unwrap(), "NONE");
    }

    #[test]
    fn historical_evidence_follows_the_chain() {
        let chain = chain_with(1, "the hours of the amber lynx are kk11 .");
        let passage = "the hours of the amber lynx are kk11 . \
                       the phone of the amber lynx is zz93 .";
        let prompt = build_generation_prompt(
            &chain,
            "user: earlier",
            "and what is the phone ?",
            3,
            &[("p2".into(), passage.into())],
        )
        .unwrap();
        let out = deterministic_mock(&prompt, 0).unwrap();
        let lines: Vec<&str> = out.lines().collect();
        assert!(lines.contains(&"EVIDENCE\t1\tcurrent\t3\tthe phone of the amber lynx is zz93 ."));
        assert!(
            lines.contains(&"EVIDENCE\t1\thistorical\t1\tthe hours of the amber lynx are kk11 .")
        );
    }

    #[test]
    fn same_prompt_same_output() {
        let prompt = build_generation_prompt(
            &chain_with(1, "alpha beta gamma ."),
            "user: x",
            "alpha beta ?",
            3,
            &[("p0".into(), "alpha beta gamma . delta .".into())],
        )
        .unwrap();
        assert_eq!(
            deterministic_mock(&prompt, 7).unwrap(),
            deterministic_mock(&prompt, 7).unwrap()
        );
    }

    #[test]
    fn verification_marks_zero_overlap_incoherent() {
        let prompt = build_verification_prompt(
            &empty_chain(),
            "q ?",
            "the fee is ab12 .",
            &[
                ("p0".into(), "current".into(), "the fee is ab12 .".into()),
                ("p1".into(), "current".into(), "zebra yak".into()),
            ],
        )
        .unwrap();
        let out = deterministic_mock(&prompt, 0).unwrap();
        assert!(out.contains("VERDICT\t1\tCOHERENT"));
        assert!(out.contains("VERDICT\t2\tINCOHERENT"));
    }

    #[test]
    fn unknown_prompt_is_a_schema_error() {
        assert!(deterministic_mock("SOMETHING ELSE\nbody", 0).is_err());
    }
}
