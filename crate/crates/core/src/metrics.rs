//! Evaluation: token F1, corpus BLEU (13a tokenization, exp smoothing),
//! ROUGE-L, evidence-span exact match, and review-score aggregation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusStore, EvidenceKind, GenerationRow, Role};
use crate::error::{CoreError, Result};

// ---------------------------------------------------------------------------
// Normalization

/// SQuAD-style answer tokens: lowercase, strip ASCII punctuation, drop the
/// articles a/an/the, split on whitespace.
fn squad_tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// Case/whitespace-normalized tokens (punctuation kept) for ROUGE-L.
fn simple_tokens(s: &str) -> Vec<String> {
    s.to_lowercase().split_whitespace().map(str::to_string).collect()
}

struct Tok13a {
    punct: Regex,
    pre_num: Regex,
    post_num: Regex,
    dash: Regex,
}

fn tok13a_res() -> &'static Tok13a {
    static RES: OnceLock<Tok13a> = OnceLock::new();
    RES.get_or_init(|| Tok13a {
        // Punctuation except period, comma, dash, apostrophe.
        punct: Regex::new(r"([\{-\~\[-` -&\(-\+:-@/])").expect("static regex"),
        // Period/comma split off unless inside a number.
        pre_num: Regex::new(r"([^0-9])([\.,])").expect("static regex"),
        post_num: Regex::new(r"([\.,])([^0-9])").expect("static regex"),
        // Dash split off after a digit.
        dash: Regex::new(r"([0-9])(-)").expect("static regex"),
    })
}

/// mteval-v13a tokenization as used for BLEU.
pub fn tokenize_13a(line: &str) -> Vec<String> {
    let line = line
        .replace("<skipped>", "")
        .replace("-\n", "")
        .replace('\n', " ")
        .replace("&quot;", "\"")
        .replace("&amp;", "&")
        .replace("&lt;", "<")
        .replace("&gt;", ">");
    let re = tok13a_res();
    let line = format!(" {line} ");
    let line = re.punct.replace_all(&line, " $1 ");
    let line = re.pre_num.replace_all(&line, "$1 $2 ");
    let line = re.post_num.replace_all(&line, " $1 $2");
    let line = re.dash.replace_all(&line, "$1 - ");
    line.split_whitespace().map(str::to_string).collect()
}

// ---------------------------------------------------------------------------
// Token F1

/// SQuAD-style token F1 over normalized bags of tokens. Both sides empty
/// after normalization -> 1; exactly one empty -> 0.
pub fn token_f1(prediction: &str, reference: &str) -> f64 {
    let p = squad_tokens(prediction);
    let r = squad_tokens(reference);
    if p.is_empty() && r.is_empty() {
        return 1.0;
    }
    if p.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for t in &r {
        *ref_counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = ref_counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / r.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

// ---------------------------------------------------------------------------
// BLEU

const BLEU_ORDER: usize = 4;
/// Stand-in for ln 0 in the BLEU geometric mean (drives exp() to zero).
const LOG_ZERO: f64 = -9_999_999_999.0;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut map = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *map.entry(w).or_insert(0) += 1;
        }
    }
    map
}

/// Corpus BLEU x100: 13a tokenization, n-grams 1..=4, exponential smoothing
/// of zero counts, brevity penalty.
pub fn sacre_bleu(predictions: &[String], references: &[String]) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(CoreError::InvalidInput(format!(
            "BLEU needs equal list lengths, got {} predictions and {} references",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(CoreError::InvalidInput("BLEU needs at least one pair".into()));
    }
    let mut correct = [0usize; BLEU_ORDER];
    let mut total = [0usize; BLEU_ORDER];
    let mut sys_len = 0usize;
    let mut ref_len = 0usize;
    for (h, r) in predictions.iter().zip(references) {
        let ht = tokenize_13a(h);
        let rt = tokenize_13a(r);
        sys_len += ht.len();
        ref_len += rt.len();
        for n in 1..=BLEU_ORDER {
            total[n - 1] += ht.len().saturating_sub(n - 1);
            let hc = ngram_counts(&ht, n);
            let rc = ngram_counts(&rt, n);
            for (g, c) in &hc {
                correct[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
            }
        }
    }
    let mut precisions = [0.0f64; BLEU_ORDER];
    let mut smooth = 1.0f64;
    for n in 1..=BLEU_ORDER {
        if total[n - 1] == 0 {
            break;
        }
        if correct[n - 1] == 0 {
            smooth *= 2.0;
            precisions[n - 1] = 100.0 / (smooth * total[n - 1] as f64);
        } else {
            precisions[n - 1] = 100.0 * correct[n - 1] as f64 / total[n - 1] as f64;
        }
    }
    let bp = if sys_len < ref_len {
        if sys_len == 0 {
            0.0
        } else {
            (1.0 - ref_len as f64 / sys_len as f64).exp()
        }
    } else {
        1.0
    };
    let log_sum: f64 = precisions
        .iter()
        .map(|&p| if p == 0.0 { LOG_ZERO } else { p.ln() })
        .sum();
    Ok(bp * (log_sum / BLEU_ORDER as f64).exp())
}

// ---------------------------------------------------------------------------
// ROUGE-L

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 (beta = 1) over case-normalized whitespace tokens.
pub fn rouge_l(prediction: &str, reference: &str) -> f64 {
    let p = simple_tokens(prediction);
    let r = simple_tokens(reference);
    if p.is_empty() && r.is_empty() {
        return 1.0;
    }
    if p.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&p, &r);
    if lcs == 0 {
        return 0.0;
    }
    let precision = lcs as f64 / p.len() as f64;
    let recall = lcs as f64 / r.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

// ---------------------------------------------------------------------------
// Span exact match

/// Char-offset span within a passage.
pub type SpanKey = (String, usize, usize);

/// Fraction of turns whose predicted span set equals the gold set exactly.
/// No turns -> 1.0 (vacuously exact).
pub fn span_exact_match(turns: &[(BTreeSet<SpanKey>, BTreeSet<SpanKey>)]) -> f64 {
    if turns.is_empty() {
        return 1.0;
    }
    let hits = turns.iter().filter(|(p, g)| p == g).count();
    hits as f64 / turns.len() as f64
}

// ---------------------------------------------------------------------------
// Review-score aggregation

/// One human/LLM review row: three dimensions scored -1, 0, or 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRow {
    pub case_id: String,
    pub kind: EvidenceKind,
    pub factuality: i8,
    pub relevance: i8,
    pub helpfulness: i8,
}

/// Mean score per dimension for one evidence kind; `None` when no rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KindMeans {
    pub n: usize,
    pub factuality: Option<f64>,
    pub relevance: Option<f64>,
    pub helpfulness: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewAggregate {
    pub current_related: KindMeans,
    pub historical_related: KindMeans,
}

fn fmt_mean(m: Option<f64>) -> String {
    m.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"))
}

impl ReviewAggregate {
    /// Two-decimal table, one row per evidence kind.
    pub fn format_table(&self) -> String {
        let mut out = String::from(
            "kind                  factuality  relevance  helpfulness  n\n",
        );
        for (name, k) in [
            ("current_related", &self.current_related),
            ("historical_related", &self.historical_related),
        ] {
            out.push_str(&format!(
                "{name:<20}  {:<10}  {:<9}  {:<11}  {}\n",
                fmt_mean(k.factuality),
                fmt_mean(k.relevance),
                fmt_mean(k.helpfulness),
                k.n
            ));
        }
        out
    }
}

/// Mean per (kind, dimension) over review rows.
pub fn aggregate_review_scores(rows: &[ReviewRow]) -> Result<ReviewAggregate> {
    let mut sums: BTreeMap<EvidenceKind, (usize, i64, i64, i64)> = BTreeMap::new();
    for row in rows {
        for (dim, v) in [
            ("factuality", row.factuality),
            ("relevance", row.relevance),
            ("helpfulness", row.helpfulness),
        ] {
            if !(-1..=1).contains(&v) {
                return Err(CoreError::InvalidInput(format!(
                    "review case `{}`: {dim} score {v} outside -1..=1",
                    row.case_id
                )));
            }
        }
        if row.kind == EvidenceKind::Gold {
            return Err(CoreError::InvalidInput(format!(
                "review case `{}`: only current_related/historical_related rows are reviewable",
                row.case_id
            )));
        }
        let e = sums.entry(row.kind).or_insert((0, 0, 0, 0));
        e.0 += 1;
        e.1 += row.factuality as i64;
        e.2 += row.relevance as i64;
        e.3 += row.helpfulness as i64;
    }
    let means = |kind: EvidenceKind| -> KindMeans {
        match sums.get(&kind) {
            Some(&(n, f, r, h)) => KindMeans {
                n,
                factuality: Some(f as f64 / n as f64),
                relevance: Some(r as f64 / n as f64),
                helpfulness: Some(h as f64 / n as f64),
            },
            None => KindMeans::default(),
        }
    };
    Ok(ReviewAggregate {
        current_related: means(EvidenceKind::CurrentRelated),
        historical_related: means(EvidenceKind::HistoricalRelated),
    })
}

// ---------------------------------------------------------------------------
// Run evaluation

/// Full generation-quality report for one predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub token_f1: f64,
    pub sacre_bleu: f64,
    pub rouge_l: f64,
    pub span_exact_match: Option<f64>,
    pub n_examples: usize,
}

/// Score generated responses against the corpus gold agent turns: macro
/// token F1 and ROUGE-L, corpus BLEU.
pub fn evaluate_run(predictions: &[GenerationRow], store: &CorpusStore) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(CoreError::InvalidInput("no predictions to evaluate".into()));
    }
    let mut missing: Vec<String> = Vec::new();
    let mut hyps = Vec::with_capacity(predictions.len());
    let mut refs = Vec::with_capacity(predictions.len());
    for row in predictions {
        let gold = store
            .dialogue(&row.dial_id)
            .and_then(|d| d.turns.get(row.turn_index))
            .filter(|t| t.role == Role::Agent);
        match gold {
            Some(turn) => {
                hyps.push(row.response.clone());
                refs.push(turn.text.clone());
            }
            None => missing.push(format!("{}#{}", row.dial_id, row.turn_index)),
        }
    }
    if !missing.is_empty() {
        return Err(CoreError::InvalidInput(format!(
            "predictions without a gold agent turn: {}",
            missing.join(", ")
        )));
    }
    let n = hyps.len();
    let f1 = hyps.iter().zip(&refs).map(|(h, r)| token_f1(h, r)).sum::<f64>() / n as f64;
    let rl = hyps.iter().zip(&refs).map(|(h, r)| rouge_l(h, r)).sum::<f64>() / n as f64;
    Ok(EvalReport {
        token_f1: f1,
        sacre_bleu: sacre_bleu(&hyps, &refs)?,
        rouge_l: rl,
        span_exact_match: None,
        n_examples: n,
    })
}
