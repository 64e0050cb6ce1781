//! Vocabulary with a reserved-id block and simple tokenization modes.
//!
//! Reserved ids occupy the lowest range: PAD, MASK, BOS, EOS, UNK, then a
//! configurable run of sentinel ids used by span-corruption targets. Corpus
//! tokens start right after the reserved block.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const MASK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const UNK: TokenId = 4;
const FIXED_RESERVED: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocabMode {
    /// One token per unicode character.
    Char,
    /// Whitespace-separated words.
    Word,
    /// Whitespace-separated words, keeping only the `size_cap` most frequent.
    UnigramCountCap,
}

impl VocabMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(Self::Char),
            "word" => Ok(Self::Word),
            "unigram-count-cap" => Ok(Self::UnigramCountCap),
            other => Err(Error::Config(format!(
                "vocab mode: expected char|word|unigram-count-cap, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for VocabMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Char => "char",
            Self::Word => "word",
            Self::UnigramCountCap => "unigram-count-cap",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct Vocab {
    mode: VocabMode,
    sentinels: usize,
    tokens: Vec<String>,            // corpus tokens, id = reserved_len + index
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Build from an in-memory corpus (one document per string).
    pub fn build(docs: &[String], mode: VocabMode, size_cap: Option<usize>, sentinels: usize) -> Result<Self> {
        if docs.iter().all(|d| d.trim().is_empty()) {
            return Err(Error::Ingestion("empty corpus: no tokens to build a vocabulary from".into()));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for doc in docs {
            match mode {
                VocabMode::Char => {
                    for ch in doc.chars().filter(|c| !c.is_whitespace()) {
                        *counts.entry(ch.to_string()).or_insert(0) += 1;
                    }
                }
                VocabMode::Word | VocabMode::UnigramCountCap => {
                    for w in doc.split_whitespace() {
                        *counts.entry(w.to_string()).or_insert(0) += 1;
                    }
                }
            }
        }
        // frequency descending, ties broken lexicographically ascending
        let mut entries: Vec<(String, u64)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let cap = match (mode, size_cap) {
            (VocabMode::UnigramCountCap, None) => {
                return Err(Error::Config(
                    "vocab mode unigram-count-cap requires a size cap".into(),
                ))
            }
            (_, Some(c)) => c.min(entries.len()),
            (_, None) => entries.len(),
        };
        entries.truncate(cap);
        let tokens: Vec<String> = entries.into_iter().map(|(t, _)| t).collect();
        Ok(Self::from_tokens(tokens, mode, sentinels))
    }

    pub fn build_from_file(path: &Path, mode: VocabMode, size_cap: Option<usize>, sentinels: usize) -> Result<Self> {
        let docs = read_corpus(path)?;
        Self::build(&docs, mode, size_cap, sentinels)
    }

    fn from_tokens(tokens: Vec<String>, mode: VocabMode, sentinels: usize) -> Self {
        let reserved = FIXED_RESERVED + sentinels;
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            index.insert(t.clone(), (reserved + i) as TokenId);
        }
        Self { mode, sentinels, tokens, index }
    }

    pub fn mode(&self) -> VocabMode {
        self.mode
    }

    pub fn sentinel_count(&self) -> usize {
        self.sentinels
    }

    /// Id of the k-th sentinel.
    pub fn sentinel(&self, k: usize) -> Result<TokenId> {
        if k >= self.sentinels {
            return Err(Error::Config(format!(
                "span corruption needs sentinel {k} but only {} are configured",
                self.sentinels
            )));
        }
        Ok((FIXED_RESERVED + k) as TokenId)
    }

    pub fn is_sentinel(&self, id: TokenId) -> bool {
        (id as usize) >= FIXED_RESERVED && (id as usize) < self.reserved_len()
    }

    pub fn reserved_len(&self) -> usize {
        FIXED_RESERVED + self.sentinels
    }

    pub fn len(&self) -> usize {
        self.reserved_len() + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        (id as usize) < self.reserved_len()
    }

    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Encode text; unknown tokens map to UNK.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        match self.mode {
            VocabMode::Char => text
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(|c| self.token_id(&c.to_string()).unwrap_or(UNK))
                .collect(),
            VocabMode::Word | VocabMode::UnigramCountCap => text
                .split_whitespace()
                .map(|w| self.token_id(w).unwrap_or(UNK))
                .collect(),
        }
    }

    pub fn decode_one(&self, id: TokenId) -> String {
        let id = id as usize;
        match id {
            0 => "[PAD]".into(),
            1 => "[M]".into(),
            2 => "[BOS]".into(),
            3 => "[EOS]".into(),
            4 => "[UNK]".into(),
            _ if id < self.reserved_len() => format!("[M]^{{{}}}", id - FIXED_RESERVED),
            _ => self
                .tokens
                .get(id - self.reserved_len())
                .cloned()
                .unwrap_or_else(|| "[?]".into()),
        }
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        let parts: Vec<String> = ids.iter().map(|&i| self.decode_one(i)).collect();
        match self.mode {
            VocabMode::Char => parts.join(""),
            _ => parts.join(" "),
        }
    }

    /// One corpus token per line; reserved ids are implicit.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path, mode: VocabMode, sentinels: usize) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.is_empty() {
            return Err(Error::Ingestion(format!("vocab file {} is empty", path.display())));
        }
        Ok(Self::from_tokens(tokens, mode, sentinels))
    }
}

/// Read a UTF-8 corpus, one document per line. Blank lines are dropped.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Ingestion(format!("cannot read corpus {}: {e}", path.display())))?;
    let docs: Vec<String> = text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if docs.is_empty() {
        return Err(Error::Ingestion(format!("empty corpus: {}", path.display())));
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn word_mode_orders_by_frequency() {
        let v = Vocab::build(&docs(&["ab ab ba"]), VocabMode::Word, None, 2).unwrap();
        assert_eq!(v.reserved_len(), 7);
        assert_eq!(v.token_id("ab"), Some(7));
        assert_eq!(v.token_id("ba"), Some(8));
    }

    #[test]
    fn char_mode_over_aab() {
        let v = Vocab::build(&docs(&["aab"]), VocabMode::Char, None, 0).unwrap();
        assert_eq!(v.len(), 5 + 2);
        assert_eq!(v.token_id("a"), Some(5));
        assert_eq!(v.token_id("b"), Some(6));
    }

    #[test]
    fn frequency_tie_broken_lexicographically() {
        let v = Vocab::build(&docs(&["y x", "x y"]), VocabMode::Word, None, 0).unwrap();
        assert!(v.token_id("x").unwrap() < v.token_id("y").unwrap());
    }

    #[test]
    fn empty_corpus_is_an_ingestion_error() {
        let err = Vocab::build(&docs(&["", "  "]), VocabMode::Word, None, 0).unwrap_err();
        assert!(matches!(err, Error::Ingestion(_)));
    }

    #[test]
    fn unigram_cap_keeps_top_tokens() {
        let v = Vocab::build(&docs(&["a a a b b c"]), VocabMode::UnigramCountCap, Some(2), 0).unwrap();
        assert!(v.token_id("a").is_some());
        assert!(v.token_id("b").is_some());
        assert_eq!(v.token_id("c"), None);
        assert_eq!(v.encode("a c"), vec![5, UNK]);
    }

    #[test]
    fn encode_decode_bijection_on_vocab_tokens() {
        let v = Vocab::build(&docs(&["alpha beta gamma"]), VocabMode::Word, None, 3).unwrap();
        for tok in ["alpha", "beta", "gamma"] {
            let id = v.token_id(tok).unwrap();
            assert_eq!(v.decode_one(id), tok);
        }
    }

    #[test]
    fn save_load_roundtrip(){
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::build(&docs(&["one two two three"]), VocabMode::Word, None, 4).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path, VocabMode::Word, 4).unwrap();
        assert_eq!(loaded.len(), v.len());
        for tok in ["one", "two", "three"] {
            assert_eq!(loaded.token_id(tok), v.token_id(tok));
        }
    }

    #[test]
    fn sentinel_ids_sit_between_fixed_reserved_and_corpus() {
        let v = Vocab::build(&docs(&["z"]), VocabMode::Word, None, 2).unwrap();
        assert_eq!(v.sentinel(0).unwrap(), 5);
        assert_eq!(v.sentinel(1).unwrap(), 6);
        assert!(v.sentinel(2).is_err());
        assert_eq!(v.token_id("z"), Some(7));
        assert!(v.is_reserved(6));
        assert!(!v.is_reserved(7));
    }
}
