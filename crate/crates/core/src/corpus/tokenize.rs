//! Deterministic whitespace-plus-punctuation tokenizer and the corpus-built
//! vocabulary used by every model in the pipeline.
//!
//! Tokens are lowercased alphanumeric runs; every other non-whitespace
//! character is its own single-character token. Offsets are Unicode
//! scalar-value indices into the original (un-lowercased) text.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

/// A token together with its `[start, end)` char-offset range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSpan {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Tokenize keeping char offsets into the original text.
pub fn tokenize_with_offsets(text: &str) -> Vec<TokenSpan> {
    let mut out = Vec::new();
    let mut run = String::new();
    let mut run_start = 0usize;
    for (i, ch) in text.chars().enumerate() {
        if ch.is_alphanumeric() {
            if run.is_empty() {
                run_start = i;
            }
            run.extend(ch.to_lowercase());
        } else {
            if !run.is_empty() {
                out.push(TokenSpan {
                    text: std::mem::take(&mut run),
                    start: run_start,
                    end: i,
                });
            }
            if !ch.is_whitespace() {
                out.push(TokenSpan {
                    text: ch.to_lowercase().collect(),
                    start: i,
                    end: i + 1,
                });
            }
        }
    }
    if !run.is_empty() {
        let end = text.chars().count();
        out.push(TokenSpan {
            text: run,
            start: run_start,
            end,
        });
    }
    out
}

/// Token strings only.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_offsets(text).into_iter().map(|t| t.text).collect()
}

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const CLS: &str = "<cls>";
pub const SEP: &str = "<sep>";
pub const CTX: &str = "<ctx>";
pub const PSG: &str = "<psg>";

const SPECIALS: [&str; 8] = [PAD, UNK, BOS, EOS, CLS, SEP, CTX, PSG];

/// Corpus vocabulary: fixed special tokens followed by the sorted unique
/// tokens of the corpus. Unknown tokens map to `<unk>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Build from corpus texts; deterministic regardless of input order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocab {
        let mut uniq: BTreeSet<String> = BTreeSet::new();
        for text in texts {
            for tok in tokenize(text) {
                uniq.insert(tok);
            }
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(uniq.into_iter().filter(|t| !SPECIALS.contains(&t.as_str())));
        let mut v = Vocab {
            tokens,
            ids: HashMap::new(),
        };
        v.rebuild_index();
        v
    }

    fn rebuild_index(&mut self) {
        self.ids = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of a token, or the `<unk>` id.
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(1)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn unk_id(&self) -> usize {
        1
    }

    pub fn bos_id(&self) -> usize {
        self.id(BOS)
    }

    pub fn eos_id(&self) -> usize {
        self.id(EOS)
    }

    pub fn cls_id(&self) -> usize {
        self.id(CLS)
    }

    pub fn sep_id(&self) -> usize {
        self.id(SEP)
    }

    pub fn ctx_id(&self) -> usize {
        self.id(CTX)
    }

    pub fn psg_id(&self) -> usize {
        self.id(PSG)
    }

    /// Tokenize and map to ids.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Join tokens with single spaces, dropping special tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .map(|&i| self.token(i))
            .filter(|t| !SPECIALS.contains(t))
            .collect();
        words.join(" ")
    }

    pub fn save(&self, path: &std::path::Path) -> crate::error::Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> crate::error::Result<Vocab> {
        let f = std::fs::File::open(path)?;
        let mut v: Vocab = serde_json::from_reader(std::io::BufReader::new(f))?;
        v.rebuild_index();
        Ok(v)
    }
}
