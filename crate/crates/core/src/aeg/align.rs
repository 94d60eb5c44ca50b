//! Snippet-to-offset alignment and STEP-1 response parsing. Quotes align
//! by exact substring match first, then by a normalized (lowercased,
//! whitespace-collapsed) match that must be unique; ambiguous or missing
//! matches are dropped with a counted reason.

use crate::corpus::EvidenceKind;
use crate::error::{CoreError, Result};

use super::{AegCounters, CandidateEvidence, Verification};

/// Lowercase and collapse whitespace runs; returns the normalized chars
/// and, per normalized char, the index of the original char it came from.
fn normalize_chars(text: &str) -> (Vec<char>, Vec<usize>) {
    let mut out = Vec::new();
    let mut map = Vec::new();
    let mut pending_space: Option<usize> = None;
    for (i, ch) in text.chars().enumerate() {
        if ch.is_whitespace() {
            if !out.is_empty() {
                pending_space = Some(i);
            }
            continue;
        }
        if let Some(ws) = pending_space.take() {
            out.push(' ');
            map.push(ws);
        }
        for low in ch.to_lowercase() {
            out.push(low);
            map.push(i);
        }
    }
    (out, map)
}

pub fn normalize_snippet(text: &str) -> String {
    normalize_chars(text).0.into_iter().collect()
}

fn find_all(hay: &[char], needle: &[char]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return Vec::new();
    }
    (0..=hay.len() - needle.len())
        .filter(|&i| &hay[i..i + needle.len()] == needle)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Alignment {
    /// `[start, end)` char offsets into the passage.
    Matched(usize, usize),
    NotFound,
    Ambiguous,
}

/// Align a quote against a passage: exact match if unique, else unique
/// normalized match, else not-found/ambiguous.
pub fn align_snippet(passage: &str, quote: &str) -> Alignment {
    let hay: Vec<char> = passage.chars().collect();
    let needle: Vec<char> = quote.chars().collect();
    let exact = find_all(&hay, &needle);
    match exact.len() {
        1 => return Alignment::Matched(exact[0], exact[0] + needle.len()),
        n if n > 1 => return Alignment::Ambiguous,
        _ => {}
    }
    let (norm_hay, map) = normalize_chars(passage);
    let (norm_needle, _) = normalize_chars(quote);
    if norm_needle.is_empty() {
        return Alignment::NotFound;
    }
    let hits = find_all(&norm_hay, &norm_needle);
    match hits.len() {
        0 => Alignment::NotFound,
        1 => {
            let start = map[hits[0]];
            let end = map[hits[0] + norm_needle.len() - 1] + 1;
            Alignment::Matched(start, end)
        }
        _ => Alignment::Ambiguous,
    }
}

/// Parse a STEP-1 response into aligned candidates. `passages` is the
/// numbered batch the prompt carried, in order; `base_rank` offsets the
/// stored retrieval rank when batching. Returns an error only when the
/// text contains no recognizable schema line at all.
pub fn parse_candidates(
    raw: &str,
    passages: &[(String, String)],
    base_rank: usize,
    counters: &mut AegCounters,
) -> Result<Vec<CandidateEvidence>> {
    let mut candidates = Vec::new();
    let mut recognized = 0usize;
    for line in raw.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "NONE" {
            recognized += 1;
            continue;
        }
        let mut fields = line.split('\t');
        if fields.next() != Some("EVIDENCE") {
            counters.unparsed_lines += 1;
            continue;
        }
        recognized += 1;
        let parsed = (|| {
            let num: usize = fields.next()?.trim().parse().ok()?;
            let kind = match fields.next()?.trim() {
                "current" => EvidenceKind::CurrentRelated,
                "historical" => EvidenceKind::HistoricalRelated,
                _ => return None,
            };
            let source_turn: usize = fields.next()?.trim().parse().ok()?;
            let quote = fields.next()?.trim().to_string();
            if fields.next().is_some() || num == 0 || num > passages.len() || quote.is_empty() {
                return None;
            }
            Some((num, kind, source_turn, quote))
        })();
        let Some((num, kind, source_turn, quote)) = parsed else {
            counters.unparsed_lines += 1;
            recognized -= 1;
            continue;
        };
        let (passage_id, passage_text) = &passages[num - 1];
        let span = match align_snippet(passage_text, &quote) {
            Alignment::Matched(s, e) => Some((s, e)),
            Alignment::NotFound => {
                log::debug!("dropping quote with no match in {passage_id}: `{quote}`");
                counters.unmatched_quotes += 1;
                continue;
            }
            Alignment::Ambiguous => {
                log::debug!("dropping ambiguous quote in {passage_id}: `{quote}`");
                counters.ambiguous_quotes += 1;
                continue;
            }
        };
        counters.candidates_parsed += 1;
        candidates.push(CandidateEvidence {
            passage_id: passage_id.clone(),
            snippet: quote,
            span,
            kind,
            source_turn,
            verification: Verification::Pending,
            passage_rank: base_rank + num - 1,
        });
    }
    if recognized == 0 {
        return Err(CoreError::Schema(
            "no EVIDENCE or NONE line in the model response".into(),
        ));
    }
    Ok(candidates)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_recovers_offsets() {
        let passage = "alpha beta gamma delta";
        match align_snippet(passage, "beta gamma") {
            Alignment::Matched(s, e) => {
                assert_eq!((s, e), (6, 16));
                assert_eq!(&passage[6..16], "beta gamma");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn normalized_match_handles_case_and_spacing() {
        let passage = "alpha  beta\tgamma delta";
        let Alignment::Matched(s, e) = align_snippet(passage, "Beta Gamma") else {
            panic!("expected a match");
        };
        let recovered: String = passage.chars().skip(s).take(e - s).collect();
        assert_eq!(normalize_snippet(&recovered), normalize_snippet("Beta Gamma"));
    }

    #[test]
    fn duplicate_occurrences_are_ambiguous() {
        assert_eq!(
            align_snippet("echo one echo one", "echo one"),
            Alignment::Ambiguous
        );
        assert_eq!(
            align_snippet("Echo one . echo ONE", "echo one"),
            Alignment::Ambiguous
        );
        assert_eq!(align_snippet("nothing here", "absent"), Alignment::NotFound);
    }

    #[test]
    fn parse_accepts_schema_lines_and_counts_drops() {
        let passages = vec![
            ("p0".to_string(), "the fee is ab12 . extra".to_string()),
            ("p1".to_string(), "twice twice".to_string()),
        ];
        let raw = "EVIDENCE\t1\tcurrent\t3\tthe fee is ab12 .\n\
                   EVIDENCE\t2\thistorical\t1\ttwice\n\
                   EVIDENCE\t1\tcurrent\t3\tnot in passage\n\
                   garbage line\n\
                   EVIDENCE\t9\tcurrent\t3\tthe fee\n";
        let mut c = AegCounters::default();
        let cands = parse_candidates(raw, &passages, 0, &mut c).unwrap();
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].passage_id, "p0");
        assert_eq!(cands[0].span, Some((0, 17)));
        assert_eq!(cands[0].kind, EvidenceKind::CurrentRelated);
        assert_eq!(cands[0].source_turn, 3);
        assert_eq!(cands[0].passage_rank, 0);
        assert_eq!(c.candidates_parsed, 1);
        assert_eq!(c.ambiguous_quotes, 1); // "twice" matches twice in p1
        assert_eq!(c.unmatched_quotes, 1);
        assert_eq!(c.unparsed_lines, 2); // garbage + out-of-range number
    }

    #[test]
    fn none_line_is_recognized_and_empty() {
        let mut c = AegCounters::default();
        let cands = parse_candidates("NONE", &[("p".into(), "t".into())], 0, &mut c).unwrap();
        assert!(cands.is_empty());
    }

    #[test]
    fn wholly_unparseable_text_is_an_error() {
        let mut c = AegCounters::default();
        assert!(parse_candidates("chatter\nmore chatter", &[("p".into(), "t".into())], 0, &mut c)
            .is_err());
    }

    #[test]
    fn base_rank_offsets_batches() {
        let mut c = AegCounters::default();
        let cands = parse_candidates(
            "EVIDENCE\t1\tcurrent\t1\tzz",
            &[("p9".into(), "zz yy".into())],
            20,
            &mut c,
        )
        .unwrap();
        assert_eq!(cands[0].passage_rank, 20);
    }
}
