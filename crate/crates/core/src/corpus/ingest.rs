//! JSONL ingestion and export. Export writes fields in struct order with
//! LF endings so that export → ingest → export is byte-identical.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{ChunkParams, CorpusStore, Dialogue, Document, EvidenceLabel};
use crate::error::{CoreError, Result};

/// Parse one JSON object per line, reporting the 1-based line number of
/// any malformed line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| {
        CoreError::InvalidInput(format!("cannot open {}: {e}", path.display()))
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: T = serde_json::from_str(&line).map_err(|e| CoreError::Parse {
            file: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Load documents.jsonl + dialogues.jsonl, chunk, and cross-validate.
pub fn ingest_corpus(
    doc_file: &Path,
    dialogue_file: &Path,
    chunk_params: &ChunkParams,
) -> Result<CorpusStore> {
    let documents: Vec<Document> = read_jsonl(doc_file)?;
    let dialogues: Vec<Dialogue> = read_jsonl(dialogue_file)?;
    CorpusStore::from_parts(documents, dialogues, chunk_params)
}

/// Write the store back out in ingestion order.
pub fn export_corpus(store: &CorpusStore, doc_file: &Path, dialogue_file: &Path) -> Result<()> {
    let docs: Vec<&Document> = store.documents().collect();
    let dlgs: Vec<&Dialogue> = store.dialogues().collect();
    write_jsonl(doc_file, &docs)?;
    write_jsonl(dialogue_file, &dlgs)?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<EvidenceLabel>> {
    read_jsonl(path)
}

pub fn write_labels(path: &Path, labels: &[EvidenceLabel]) -> Result<()> {
    write_jsonl(path, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::{synthesize_corpus, SynthConfig};

    #[test]
    fn empty_dialogue_file_gives_empty_store_side() {
        let dir = tempfile::tempdir().unwrap();
        let docs = dir.path().join("documents.jsonl");
        let dlgs = dir.path().join("dialogues.jsonl");
        std::fs::write(
            &docs,
            "{\"doc_id\":\"d0\",\"title\":\"t\",\"text\":\"alpha beta gamma\",\"domain_tag\":\"g\"}\n",
        )
        .unwrap();
        std::fs::write(&dlgs, "").unwrap();
        let store = ingest_corpus(&docs, &dlgs, &ChunkParams::default()).unwrap();
        assert_eq!(store.n_documents(), 1);
        assert_eq!(store.n_dialogues(), 0);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let docs = dir.path().join("documents.jsonl");
        std::fs::write(
            &docs,
            "{\"doc_id\":\"d0\",\"title\":\"t\",\"text\":\"x\",\"domain_tag\":\"g\"}\nnot json\n",
        )
        .unwrap();
        let err = read_jsonl::<Document>(&docs).unwrap_err();
        match err {
            CoreError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn dangling_reference_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let docs = dir.path().join("documents.jsonl");
        let dlgs = dir.path().join("dialogues.jsonl");
        std::fs::write(
            &docs,
            "{\"doc_id\":\"d0\",\"title\":\"t\",\"text\":\"alpha beta\",\"domain_tag\":\"g\"}\n",
        )
        .unwrap();
        std::fs::write(
            &dlgs,
            concat!(
                "{\"dial_id\":\"c0\",\"turns\":[",
                "{\"index\":0,\"role\":\"user\",\"text\":\"q\",\"gold_evidence\":[]},",
                "{\"index\":1,\"role\":\"agent\",\"text\":\"a\",\"gold_evidence\":[",
                "{\"passage_id\":\"missing::p0\",\"span_start\":0,\"span_end\":1}]}]}\n"
            ),
        )
        .unwrap();
        let err = ingest_corpus(&docs, &dlgs, &ChunkParams::default()).unwrap_err();
        assert!(matches!(err, CoreError::Integrity(_)));
    }

    #[test]
    fn export_ingest_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let docs = dir.path().join("documents.jsonl");
        let dlgs = dir.path().join("dialogues.jsonl");
        let cfg = SynthConfig {
            seed: 5,
            n_docs: 3,
            n_dialogues: 2,
            ..SynthConfig::default()
        };
        synthesize_corpus(&cfg, &docs, &dlgs).unwrap();
        let bytes_docs = std::fs::read(&docs).unwrap();
        let bytes_dlgs = std::fs::read(&dlgs).unwrap();

        let store = ingest_corpus(&docs, &dlgs, &cfg.chunk).unwrap();
        let docs2 = dir.path().join("documents2.jsonl");
        let dlgs2 = dir.path().join("dialogues2.jsonl");
        export_corpus(&store, &docs2, &dlgs2).unwrap();
        assert_eq!(bytes_docs, std::fs::read(&docs2).unwrap());
        assert_eq!(bytes_dlgs, std::fs::read(&dlgs2).unwrap());
    }
}
