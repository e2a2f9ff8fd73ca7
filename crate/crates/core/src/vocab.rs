//! Word-level vocabulary shared by the language model and the QAVA
//! question embedder.
//!
//! Text is split on whitespace and every ASCII punctuation character becomes
//! its own token. Words are lowercased, except the verdict tokens `Real` and
//! `Fake`, which stay case-sensitive.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
pub const VERDICT_TOKENS: [&str; 2] = ["Real", "Fake"];

#[derive(Debug, Error, PartialEq)]
pub enum VocabError {
    #[error("vocabulary file line {line}: expected {expected:?}, found {found:?}")]
    Reserved {
        line: usize,
        expected: &'static str,
        found: String,
    },
    #[error("vocabulary file line {0}: duplicate token {1:?}")]
    Duplicate(usize, String),
    #[error("vocabulary is missing the verdict token {0:?}")]
    MissingVerdict(&'static str),
}

/// Splits and normalizes text into word tokens.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() {
                if !word.is_empty() {
                    out.push(normalize(&word));
                    word.clear();
                }
                out.push(ch.to_string());
            } else {
                word.push(ch);
            }
        }
        if !word.is_empty() {
            out.push(normalize(&word));
        }
    }
    out
}

fn normalize(word: &str) -> String {
    if VERDICT_TOKENS.contains(&word) {
        word.to_string()
    } else {
        word.to_lowercase()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved ids first, then the verdict tokens, then every other word of
    /// `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            words.extend(split_words(t));
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(VERDICT_TOKENS.iter().map(|s| s.to_string()));
        for w in words {
            if !RESERVED.contains(&w.as_str()) && !VERDICT_TOKENS.contains(&w.as_str()) {
                tokens.push(w);
            }
        }
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
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

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    /// Token ids; out-of-vocabulary words map to [`UNK`].
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Joins tokens with single spaces, skipping pad/bos/eos.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, reserved ids first.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            let _ = writeln!(s, "{t}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, VocabError> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        for (i, expected) in RESERVED.iter().enumerate() {
            let found = tokens.get(i).cloned().unwrap_or_default();
            if found != *expected {
                return Err(VocabError::Reserved {
                    line: i + 1,
                    expected,
                    found,
                });
            }
        }
        let mut seen = BTreeSet::new();
        for (i, t) in tokens.iter().enumerate() {
            if !seen.insert(t.as_str()) {
                return Err(VocabError::Duplicate(i + 1, t.clone()));
            }
        }
        let v = Self::from_tokens(tokens);
        for t in VERDICT_TOKENS {
            if v.id(t).is_none() {
                return Err(VocabError::MissingVerdict(t));
            }
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_tokens_are_single_and_case_sensitive() {
        let v = Vocab::build(["the claim is real"]);
        let ids = v.tokenize("Real");
        assert_eq!(ids.len(), 1);
        assert_eq!(v.detokenize(&ids), "Real");
        assert_ne!(v.tokenize("real"), ids);
    }

    #[test]
    fn empty_text_has_no_tokens() {
        let v = Vocab::build(["a b"]);
        assert!(v.tokenize("").is_empty());
    }

    #[test]
    fn punctuation_splits() {
        assert_eq!(split_words("Fake."), vec!["Fake", "."]);
        assert_eq!(split_words("Caption: The Car"), vec!["caption", ":", "the", "car"]);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocab::build(["alpha beta"]);
        assert_eq!(v.tokenize("alpha gamma"), vec![v.id("alpha").unwrap(), UNK]);
    }

    #[test]
    fn file_round_trip_and_validation() {
        let v = Vocab::build(["one two three"]);
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert!(matches!(Vocab::from_text("a\nb\n"), Err(VocabError::Reserved { .. })));
    }
}
