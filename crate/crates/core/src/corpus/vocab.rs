use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]"];
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();

/// Lowercases and splits on whitespace; every punctuation character becomes
/// a token of its own.
pub fn tokenize(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in line.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_whitespace()) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Word-level vocabulary. Ids are dense; the five special tokens hold ids 0–4.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Input(format!(
                    "vocabulary must start with the special tokens {SPECIAL_TOKENS:?}"
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Ranks tokens by descending count, breaking ties lexicographically.
    /// `max_size` caps the total size including the special tokens.
    pub fn from_lines<'a, I>(lines: I, max_size: usize, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in lines {
            for tok in tokenize(line) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Ingestion("corpus contains no tokens".into()));
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !SPECIAL_TOKENS.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = max_size.saturating_sub(NUM_SPECIAL);
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(room).map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn build(corpus_path: &Path, max_size: usize, min_count: usize) -> Result<Self> {
        let text = fs::read_to_string(corpus_path).map_err(|e| Error::io(corpus_path, e))?;
        Self::from_lines(text.lines(), max_size, min_count)
    }

    /// Reads a vocabulary file: one token per line, line number = id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `[CLS] tokens… [SEP]`, truncated to `max_len` while keeping both markers.
    pub fn encode(&self, line: &str, max_len: usize) -> Vec<usize> {
        let body = max_len.saturating_sub(2);
        let mut ids = Vec::with_capacity(body + 2);
        ids.push(CLS);
        ids.extend(tokenize(line).iter().take(body).map(|t| self.id_or_unk(t)));
        ids.push(SEP);
        ids
    }
}

pub fn is_special(id: usize) -> bool {
    id < NUM_SPECIAL && id != UNK
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order_then_specials_first() {
        let v = Vocabulary::from_lines(["a b b"], 100, 1).unwrap();
        assert_eq!(&v.tokens()[..5], &SPECIAL_TOKENS.map(String::from));
        assert_eq!(v.id("b"), Some(5));
        assert_eq!(v.id("a"), Some(6));
    }

    #[test]
    fn min_count_cutoff_maps_rare_tokens_to_unk() {
        let v = Vocabulary::from_lines(["a b b"], 100, 2).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), None);
        assert_eq!(v.encode("a b", 16), vec![CLS, UNK, 5, SEP]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = Vocabulary::from_lines(["zeta alpha mid"], 100, 1).unwrap();
        assert_eq!(v.id("alpha"), Some(5));
        assert_eq!(v.id("mid"), Some(6));
        assert_eq!(v.id("zeta"), Some(7));
    }

    #[test]
    fn max_size_counts_specials() {
        let v = Vocabulary::from_lines(["a a a b b c"], 7, 1).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("c"), None);
    }

    #[test]
    fn empty_corpus_is_an_ingestion_error() {
        assert!(matches!(
            Vocabulary::from_lines(["", "   "], 10, 1),
            Err(Error::Ingestion(_))
        ));
    }

    #[test]
    fn tokenizer_splits_punctuation_and_lowercases() {
        assert_eq!(tokenize("Hello, World!"), vec!["hello", ",", "world", "!"]);
    }

    #[test]
    fn encode_truncates_but_keeps_markers() {
        let v = Vocabulary::from_lines(["a b c d e"], 100, 1).unwrap();
        let ids = v.encode("a b c d e", 4);
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[0], CLS);
        assert_eq!(ids[3], SEP);
    }

    #[test]
    fn file_round_trip() {
        let v = Vocabulary::from_lines(["the cat sat on the mat"], 100, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }
}
