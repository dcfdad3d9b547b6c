use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::load::RawCorpus;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token/id map. Ids 0..4 are reserved for PAD, BOS, EOS and UNK.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!(
                    "duplicate vocabulary entry `{t}`"
                )));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Ranks tokens by frequency, breaking ties lexicographically. `max_size`
    /// includes the four reserved entries.
    pub fn build(corpus: &RawCorpus, max_size: usize, min_freq: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for tok in corpus.conversations.iter().flatten().flatten() {
            if !RESERVED.contains(&tok.as_str()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_freq.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let room = max_size.saturating_sub(RESERVED.len());
        tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t.to_string()));
        Self::from_tokens(tokens).expect("ranked tokens are unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(String::from).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::InvalidInput(format!(
                "vocabulary must start with the reserved entries {RESERVED:?}"
            )));
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// SHA-256 of the persisted form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
