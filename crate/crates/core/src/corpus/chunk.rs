//! Sliding-window document chunking on token boundaries.

use serde::{Deserialize, Serialize};

use super::tokenize::tokenize_with_offsets;
use super::{Document, Passage};
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkParams {
    pub max_tokens: usize,
    pub overlap_tokens: usize,
}

impl Default for ChunkParams {
    fn default() -> Self {
        ChunkParams {
            max_tokens: 128,
            overlap_tokens: 32,
        }
    }
}

impl ChunkParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens < 8 {
            return Err(CoreError::InvalidInput(format!(
                "max_tokens must be >= 8, got {}",
                self.max_tokens
            )));
        }
        if self.overlap_tokens >= self.max_tokens {
            return Err(CoreError::InvalidInput(format!(
                "overlap_tokens {} must be < max_tokens {}",
                self.overlap_tokens, self.max_tokens
            )));
        }
        Ok(())
    }
}

/// Split a document into passages of at most `max_tokens` tokens with the
/// given token overlap between consecutive passages.
///
/// Character ranges are widened so that their union covers the whole
/// document: the first passage starts at 0, the last ends at the text end,
/// and each boundary extends to the next passage's first token (absorbing
/// inter-token whitespace). Boundaries never split a token.
pub fn chunk_document(doc: &Document, params: &ChunkParams) -> Result<Vec<Passage>> {
    params.validate()?;
    let toks = tokenize_with_offsets(&doc.text);
    let n_chars = doc.text.chars().count();
    let n = toks.len();

    // Token-index windows [start, end).
    let mut windows: Vec<(usize, usize)> = Vec::new();
    if n <= params.max_tokens {
        windows.push((0, n));
    } else {
        let stride = params.max_tokens - params.overlap_tokens;
        let mut start = 0usize;
        loop {
            let end = (start + params.max_tokens).min(n);
            windows.push((start, end));
            if end == n {
                break;
            }
            start += stride;
        }
    }

    let mut passages = Vec::with_capacity(windows.len());
    for (i, &(ts, te)) in windows.iter().enumerate() {
        let char_start = if i == 0 { 0 } else { toks[ts].start };
        let char_end = if i == windows.len() - 1 {
            n_chars
        } else {
            // Extend to the next window's first token so consecutive
            // ranges always touch or overlap.
            let next_first = toks[windows[i + 1].0].start;
            toks[te - 1].end.max(next_first)
        };
        passages.push(Passage {
            passage_id: format!("{}::p{}", doc.doc_id, i),
            doc_id: doc.doc_id.clone(),
            char_start,
            char_end,
            token_count: te - ts,
        });
    }
    Ok(passages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize::tokenize;

    fn doc(text: &str) -> Document {
        Document {
            doc_id: "d".into(),
            title: "t".into(),
            text: text.into(),
            domain_tag: "g".into(),
        }
    }

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    fn params(max: usize, overlap: usize) -> ChunkParams {
        ChunkParams {
            max_tokens: max,
            overlap_tokens: overlap,
        }
    }

    fn char_slice(text: &str, start: usize, end: usize) -> String {
        text.chars().skip(start).take(end - start).collect()
    }

    #[test]
    fn short_document_is_one_passage() {
        let d = doc(&words(10));
        let ps = chunk_document(&d, &params(20, 5)).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(ps[0].char_start, 0);
        assert_eq!(ps[0].char_end, d.text.chars().count());
        assert_eq!(ps[0].token_count, 10);
    }

    #[test]
    fn zero_overlap_partitions_token_stream() {
        let d = doc(&words(100));
        let ps = chunk_document(&d, &params(50, 0)).unwrap();
        assert_eq!(ps.len(), 2);
        let mut all = Vec::new();
        for p in &ps {
            all.extend(tokenize(&char_slice(&d.text, p.char_start, p.char_end)));
        }
        assert_eq!(all, tokenize(&d.text));
    }

    #[test]
    fn stride_is_max_minus_overlap() {
        // 100 tokens, max 40, overlap 10 -> windows starting at tokens 0, 30, 60.
        let d = doc(&words(100));
        let ps = chunk_document(&d, &params(40, 10)).unwrap();
        assert_eq!(ps.len(), 3);
        let toks = super::tokenize_with_offsets(&d.text);
        assert_eq!(ps[0].char_start, 0);
        assert_eq!(ps[1].char_start, toks[30].start);
        assert_eq!(ps[2].char_start, toks[60].start);
        // Consecutive passages share exactly `overlap` tokens.
        for w in ps.windows(2) {
            let a = tokenize(&char_slice(&d.text, w[0].char_start, w[0].char_end));
            let b = tokenize(&char_slice(&d.text, w[1].char_start, w[1].char_end));
            assert_eq!(a[a.len() - 10..], b[..10]);
        }
        assert_eq!(ps[0].token_count, 40);
        assert_eq!(ps[1].token_count, 40);
        assert_eq!(ps[2].token_count, 40);
    }

    #[test]
    fn union_covers_document() {
        for (n, max, ov) in [(37, 8, 3), (100, 40, 10), (129, 16, 0), (8, 8, 0)] {
            let d = doc(&words(n));
            let ps = chunk_document(&d, &params(max, ov)).unwrap();
            assert_eq!(ps[0].char_start, 0);
            assert_eq!(ps.last().unwrap().char_end, d.text.chars().count());
            for w in ps.windows(2) {
                assert!(w[1].char_start <= w[0].char_end, "gap between passages");
            }
            for p in &ps {
                assert!(p.token_count <= max);
                assert!(p.char_start < p.char_end);
            }
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        let d = doc("one two");
        assert!(chunk_document(&d, &params(4, 0)).is_err());
        assert!(chunk_document(&d, &params(10, 10)).is_err());
    }
}
