//! Versioned prompt templates and the section-structured prompt format
//! shared by the LLM backends and the deterministic mock.

use crate::error::{CoreError, Result};

use super::EvidenceChain;

pub const GENERATION_TEMPLATE_V1: &str =
    include_str!("../../prompts/evidence_generation_v1.txt");
pub const VERIFICATION_TEMPLATE_V1: &str =
    include_str!("../../prompts/coherence_verification_v1.txt");

/// First line of each template; the mock dispatches on it.
pub const GENERATION_HEADER_V1: &str = "EVIDENCE GENERATION PROMPT v1";
pub const VERIFICATION_HEADER_V1: &str = "COHERENCE VERIFICATION PROMPT v1";

pub const TEMPLATE_VERSION: &str = "v1";

/// Flatten text to a single prompt line.
fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn chain_section(chain: &EvidenceChain) -> String {
    if chain.entries.is_empty() {
        return "none".to_string();
    }
    chain
        .entries
        .iter()
        .map(|e| format!("- turn {}: {}", e.turn_index, one_line(&e.text)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// STEP-1 prompt: instructions, chain, context, query, and the numbered
/// passage batch. Same inputs produce byte-identical text.
pub fn build_generation_prompt(
    chain: &EvidenceChain,
    context: &str,
    query: &str,
    turn_index: usize,
    passages: &[(String, String)],
) -> Result<String> {
    if passages.is_empty() {
        return Err(CoreError::InvalidInput(
            "generation prompt needs at least one passage".into(),
        ));
    }
    let rendered: Vec<String> = passages
        .iter()
        .enumerate()
        .map(|(i, (id, text))| format!("[{}] passage {id}\n{}", i + 1, one_line(text)))
        .collect();
    let context = if context.trim().is_empty() {
        "none".to_string()
    } else {
        one_line(context)
    };
    Ok(GENERATION_TEMPLATE_V1
        .replace("{turn}", &turn_index.to_string())
        .replace("{chain}", &chain_section(chain))
        .replace("{context}", &context)
        .replace("{query}", &one_line(query))
        .replace("{passages}", &rendered.join("\n\n")))
}

/// STEP-2 prompt: chain, query, the gold target response, and the
/// numbered aligned candidates.
pub fn build_verification_prompt(
    chain: &EvidenceChain,
    query: &str,
    target_response: &str,
    candidates: &[(String, String, String)], // (passage_id, kind word, snippet)
) -> Result<String> {
    if candidates.is_empty() {
        return Err(CoreError::InvalidInput(
            "verification prompt needs at least one candidate".into(),
        ));
    }
    let rendered: Vec<String> = candidates
        .iter()
        .enumerate()
        .map(|(i, (id, kind, snippet))| {
            format!("[{}] passage {id} kind {kind}\n{}", i + 1, one_line(snippet))
        })
        .collect();
    Ok(VERIFICATION_TEMPLATE_V1
        .replace("{chain}", &chain_section(chain))
        .replace("{query}", &one_line(query))
        .replace("{response}", &one_line(target_response))
        .replace("{candidates}", &rendered.join("\n\n")))
}

/// Split a section-structured prompt into `(name, body)` pairs. Sections
/// are delimited by `== name ==` lines; text before the first marker is
/// ignored.
pub fn parse_sections(prompt: &str) -> Vec<(String, String)> {
    let mut sections = Vec::new();
    let mut name: Option<String> = None;
    let mut body: Vec<&str> = Vec::new();
    for line in prompt.lines() {
        let trimmed = line.trim();
        if trimmed.len() > 4 && trimmed.starts_with("== ") && trimmed.ends_with(" ==") {
            if let Some(n) = name.take() {
                sections.push((n, body.join("\n").trim().to_string()));
            }
            name = Some(trimmed[3..trimmed.len() - 3].to_string());
            body.clear();
        } else if name.is_some() {
            body.push(line);
        }
    }
    if let Some(n) = name {
        sections.push((n, body.join("\n").trim().to_string()));
    }
    sections
}

pub fn section<'a>(sections: &'a [(String, String)], name: &str) -> Result<&'a str> {
    sections
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, b)| b.as_str())
        .ok_or_else(|| CoreError::Schema(format!("prompt is missing the `{name}` section")))
}

/// Parse a numbered-item section body (`[n] header` followed by body
/// lines) into `(header, body)` per item, in numbering order.
pub fn parse_numbered_items(body: &str) -> Result<Vec<(String, String)>> {
    let mut items: Vec<(String, Vec<&str>)> = Vec::new();
    for line in body.lines() {
        let trimmed = line.trim_start();
        if trimmed.starts_with('[') {
            if let Some(close) = trimmed.find(']') {
                if trimmed[1..close].chars().all(|c| c.is_ascii_digit())
                    && !trimmed[1..close].is_empty()
                {
                    let n: usize = trimmed[1..close].parse().expect("digits");
                    if n != items.len() + 1 {
                        return Err(CoreError::Schema(format!(
                            "numbered item {n} out of order (expected {})",
                            items.len() + 1
                        )));
                    }
                    items.push((trimmed[close + 1..].trim().to_string(), Vec::new()));
                    continue;
                }
            }
        }
        if let Some(last) = items.last_mut() {
            last.1.push(line);
        }
    }
    if items.is_empty() {
        return Err(CoreError::Schema("no numbered items found".into()));
    }
    Ok(items
        .into_iter()
        .map(|(h, b)| (h, b.join("\n").trim().to_string()))
        .collect())
}

/// Parse the chain section into `(turn_index, text)` entries; `none`
/// yields the empty list.
pub fn parse_chain_section(body: &str) -> Result<Vec<(usize, String)>> {
    if body == "none" {
        return Ok(Vec::new());
    }
    let mut entries = Vec::new();
    for line in body.lines() {
        let rest = line
            .trim()
            .strip_prefix("- turn ")
            .ok_or_else(|| CoreError::Schema(format!("malformed chain line `{line}`")))?;
        let (num, text) = rest
            .split_once(": ")
            .ok_or_else(|| CoreError::Schema(format!("malformed chain line `{line}`")))?;
        let turn: usize = num
            .parse()
            .map_err(|_| CoreError::Schema(format!("bad chain turn `{num}`")))?;
        entries.push((turn, text.to_string()));
    }
    Ok(entries)
}
