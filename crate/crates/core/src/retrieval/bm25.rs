//! Robertson/Okapi BM25 with the non-negative IDF
//! `ln(((N - df + 0.5) / (df + 0.5)) + 1)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{rank_scored, RetrievalResult};
use crate::corpus::tokenize::tokenize;
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Bm25Index {
    k1: f64,
    b: f64,
    /// term -> (passage index, term frequency), ascending passage index.
    postings: BTreeMap<String, Vec<(usize, usize)>>,
    passage_ids: Vec<String>,
    lengths: Vec<usize>,
    avg_len: f64,
}

/// Build an inverted index over `(passage_id, text)` pairs.
pub fn build_bm25_index<I, S>(passages: I, k1: f64, b: f64) -> Result<Bm25Index>
where
    I: IntoIterator<Item = (S, S)>,
    S: AsRef<str>,
{
    if k1 <= 0.0 || !(0.0..=1.0).contains(&b) {
        return Err(CoreError::InvalidInput(format!(
            "BM25 requires k1 > 0 and 0 <= b <= 1, got k1={k1}, b={b}"
        )));
    }
    let mut index = Bm25Index {
        k1,
        b,
        postings: BTreeMap::new(),
        passage_ids: Vec::new(),
        lengths: Vec::new(),
        avg_len: 0.0,
    };
    for (id, text) in passages {
        let pidx = index.passage_ids.len();
        index.passage_ids.push(id.as_ref().to_string());
        let tokens = tokenize(text.as_ref());
        index.lengths.push(tokens.len());
        let mut tf: BTreeMap<String, usize> = BTreeMap::new();
        for t in tokens {
            *tf.entry(t).or_default() += 1;
        }
        for (term, freq) in tf {
            index.postings.entry(term).or_default().push((pidx, freq));
        }
    }
    let n = index.passage_ids.len();
    if n > 0 {
        index.avg_len = index.lengths.iter().sum::<usize>() as f64 / n as f64;
    }
    Ok(index)
}

impl Bm25Index {
    pub fn n_passages(&self) -> usize {
        self.passage_ids.len()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.passage_ids.len() as f64;
        let df = self.postings.get(term).map_or(0, Vec::len) as f64;
        (((n - df + 0.5) / (df + 0.5)) + 1.0).ln()
    }

    fn term_weight(&self, tf: usize, len: usize) -> f64 {
        let tf = tf as f64;
        let norm = 1.0 - self.b + self.b * len as f64 / self.avg_len;
        tf * (self.k1 + 1.0) / (tf + self.k1 * norm)
    }

    /// BM25 score of one passage for a tokenized query. Each query token
    /// occurrence contributes (repeated tokens count repeatedly).
    pub fn score(&self, query_tokens: &[String], passage_idx: usize) -> f64 {
        let len = self.lengths[passage_idx];
        let mut score = 0.0;
        for term in query_tokens {
            if let Some(plist) = self.postings.get(term) {
                if let Ok(pos) = plist.binary_search_by_key(&passage_idx, |e| e.0) {
                    score += self.idf(term) * self.term_weight(plist[pos].1, len);
                }
            }
        }
        score
    }

    /// Score all passages containing at least one query term.
    fn scan(&self, query: &str) -> Vec<(String, f64)> {
        let query_tokens = tokenize(query);
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for term in &query_tokens {
            if let Some(plist) = self.postings.get(term) {
                let idf = self.idf(term);
                for &(pidx, tf) in plist {
                    *acc.entry(pidx).or_default() += idf * self.term_weight(tf, self.lengths[pidx]);
                }
            }
        }
        acc.into_iter()
            .filter(|&(_, s)| s > 0.0)
            .map(|(pidx, s)| (self.passage_ids[pidx].clone(), s))
            .collect()
    }
}

/// Results ranked `lo_rank..=hi_rank` (1-based) under full-corpus BM25
/// ordering. Ties break by ascending passage id; zero-score passages are
/// never returned; short result lists truncate.
pub fn bm25_rank(
    index: &Bm25Index,
    query: &str,
    lo_rank: usize,
    hi_rank: usize,
) -> Result<Vec<RetrievalResult>> {
    if lo_rank < 1 || lo_rank > hi_rank {
        return Err(CoreError::InvalidInput(format!(
            "rank window requires 1 <= lo <= hi, got {lo_rank}..{hi_rank}"
        )));
    }
    let ranked = rank_scored(index.scan(query));
    Ok(ranked
        .into_iter()
        .filter(|r| r.rank >= lo_rank && r.rank <= hi_rank)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_index() -> Bm25Index {
        build_bm25_index(
            [
                ("p0", "the cat sat on the mat"),
                ("p1", "the dog barked at the cat"),
                ("p2", "a bird flew over the harbor"),
            ],
            1.2,
            0.75,
        )
        .unwrap()
    }

    #[test]
    fn empty_index_returns_empty() {
        let idx = build_bm25_index(std::iter::empty::<(&str, &str)>(), 1.2, 0.75).unwrap();
        assert!(bm25_rank(&idx, "anything", 1, 10).unwrap().is_empty());
    }

    #[test]
    fn idf_matches_hand_computation() {
        let idx = build_bm25_index([("a", "x y"), ("b", "y z")], 1.2, 0.75).unwrap();
        // term in exactly 1 of 2 passages: ln((2-1+0.5)/(1+0.5)+1) = ln 2
        assert!((idx.idf("x") - 2.0f64.ln()).abs() < 1e-12);
        // term in all passages stays positive
        assert!(idx.idf("y") > 0.0);
        assert!((idx.idf("y") - (0.5f64 / 2.5 + 1.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn no_query_term_scores_zero_and_is_filtered() {
        let idx = toy_index();
        let toks = tokenize("bird");
        assert_eq!(idx.score(&toks, 0), 0.0);
        assert!(bm25_rank(&idx, "zzz unseen", 1, 10).unwrap().is_empty());
        // "bird" only matches p2
        let hits = bm25_rank(&idx, "bird", 1, 10).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].passage_id, "p2");
        assert_eq!(hits[0].rank, 1);
    }

    #[test]
    fn rank_window_truncates_and_matches_full_scan() {
        let idx = toy_index();
        let all = bm25_rank(&idx, "the cat", 1, 100).unwrap();
        assert!(all.len() >= 2);
        for w in all.windows(2) {
            assert!(w[0].score >= w[1].score);
            assert_eq!(w[0].rank + 1, w[1].rank);
        }
        let second = bm25_rank(&idx, "the cat", 2, 2).unwrap();
        assert_eq!(second, vec![all[1].clone()]);
        // lo beyond the list truncates to empty
        assert!(bm25_rank(&idx, "the cat", 50, 60).unwrap().is_empty());
    }

    #[test]
    fn ties_break_by_ascending_passage_id() {
        let idx = build_bm25_index(
            [("pb", "alpha beta"), ("pa", "alpha beta"), ("pc", "gamma")],
            1.2,
            0.75,
        )
        .unwrap();
        let hits = bm25_rank(&idx, "alpha", 1, 10).unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].passage_id, "pa");
        assert_eq!(hits[1].passage_id, "pb");
        assert!((hits[0].score - hits[1].score).abs() < 1e-12);
    }

    #[test]
    fn rebuild_is_deterministic() {
        let a = toy_index();
        let b = toy_index();
        let qa = bm25_rank(&a, "the cat sat", 1, 10).unwrap();
        let qb = bm25_rank(&b, "the cat sat", 1, 10).unwrap();
        assert_eq!(qa, qb);
    }

    #[test]
    fn brute_force_oracle_agreement() {
        // Independent scorer: count tf by scanning text, df by scanning
        // all passages.
        let texts = [
            ("p0", "the cat sat on the mat"),
            ("p1", "the dog barked at the cat"),
            ("p2", "a bird flew over the harbor"),
            ("p3", "the cat and the cat again"),
        ];
        let idx = build_bm25_index(texts, 1.2, 0.75).unwrap();
        let query = "the cat harbor";
        let qtoks = tokenize(query);
        let n = texts.len() as f64;
        let lens: Vec<usize> = texts.iter().map(|(_, t)| tokenize(t).len()).collect();
        let avg = lens.iter().sum::<usize>() as f64 / n;
        let mut expected: Vec<(String, f64)> = Vec::new();
        for (i, (id, text)) in texts.iter().enumerate() {
            let ptoks = tokenize(text);
            let mut s = 0.0;
            for q in &qtoks {
                let tf = ptoks.iter().filter(|t| *t == q).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let df = texts
                    .iter()
                    .filter(|(_, t)| tokenize(t).contains(q))
                    .count() as f64;
                let idf = (((n - df + 0.5) / (df + 0.5)) + 1.0).ln();
                let denom = tf + 1.2 * (1.0 - 0.75 + 0.75 * lens[i] as f64 / avg);
                s += idf * tf * 2.2 / denom;
            }
            if s > 0.0 {
                expected.push((id.to_string(), s));
            }
        }
        expected.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let got = bm25_rank(&idx, query, 1, 100).unwrap();
        assert_eq!(got.len(), expected.len());
        for (g, e) in got.iter().zip(&expected) {
            assert_eq!(g.passage_id, e.0);
            assert!((g.score - e.1).abs() < 1e-9);
        }
    }
}
