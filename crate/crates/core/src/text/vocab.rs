//! Word-level vocabulary built from the training corpus.
//!
//! Lowercased whitespace/punctuation splitting with an unknown-word bucket.
//! The on-disk format is one token per line, line number = id, with the
//! special tokens on the first four lines.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SENTINEL: usize = 3;
pub const UNK: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sentinel>", "<unk>"];

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

/// Lowercases and splits into word and single-character punctuation tokens.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(|c| c.to_lowercase()) {
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

impl Vocab {
    /// Builds from a corpus: specials first, then the unique corpus tokens in
    /// lexicographic order.
    pub fn build<S: AsRef<str>>(corpus: impl IntoIterator<Item = S>) -> Vocab {
        let mut words: Vec<String> = corpus
            .into_iter()
            .flat_map(|text| split_tokens(text.as_ref()))
            .collect();
        words.sort_unstable();
        words.dedup();
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())));
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        *self.ids.get(token).unwrap_or(&UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// `BOS + ids + EOS`, truncated and padded to `max_len`. An empty text
    /// encodes as a single EOS.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        let words = split_tokens(text);
        let mut ids = Vec::with_capacity(max_len);
        if words.is_empty() {
            ids.push(EOS);
        } else {
            ids.push(BOS);
            for w in words.iter().take(max_len.saturating_sub(2)) {
                ids.push(self.id(w));
            }
            ids.push(EOS);
        }
        ids.resize(max_len, PAD);
        ids
    }

    /// Inverse of `encode` up to normalization: tokens joined by single
    /// spaces, with PAD/BOS/EOS dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id))
            .collect();
        words.join(" ")
    }

    /// Normalized form of a text: what `decode(encode(text))` returns for
    /// fully in-vocabulary input.
    pub fn normalize(text: &str) -> String {
        split_tokens(text).join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let f = std::fs::File::open(path)?;
        let tokens: Vec<String> = BufReader::new(f)
            .lines()
            .collect::<std::io::Result<_>>()?;
        for (i, special) in SPECIALS.iter().take(4).enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::invalid(format!(
                    "vocab file {}: line {} must be {special:?}",
                    path.display(),
                    i + 1
                )));
            }
        }
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab { tokens, ids })
    }
}
