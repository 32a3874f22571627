//! Text ingestion, vocabulary, batching and dynamic masking.

mod batch;
mod masking;
pub mod synthetic;
mod vocab;

use std::fs;
use std::path::Path;

pub use batch::{make_batches, Batch, BatchPlan};
pub use masking::{apply_dynamic_masking, mask_count, Corruption, MaskedBatch, MaskingConfig};
pub use vocab::{
    is_special, tokenize, Vocabulary, CLS, MASK, NUM_SPECIAL, PAD, SEP, SPECIAL_TOKENS, UNK,
};

use crate::error::{Error, Result};

/// Reads a UTF-8 corpus, one document per line; blank lines are dropped.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if lines.is_empty() {
        return Err(Error::Ingestion(format!("{} is empty", path.display())));
    }
    Ok(lines)
}

pub fn encode_all(vocab: &Vocabulary, lines: &[String], max_len: usize) -> Vec<Vec<usize>> {
    lines.iter().map(|l| vocab.encode(l, max_len)).collect()
}

/// Parses a pair file: `word1<TAB>word2` per line, `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t').map(str::trim).filter(|s| !s.is_empty());
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => pairs.push((a.to_lowercase(), b.to_lowercase())),
            _ => {
                return Err(Error::Input(format!(
                    "pair file line {}: expected `word1<TAB>word2`",
                    n + 1
                )))
            }
        }
    }
    Ok(pairs)
}

pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text)
}
