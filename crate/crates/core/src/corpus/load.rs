use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentinel that replaces numerals.
pub const NUM_TOKEN: &str = "NUM";
const EOU: &str = "__eou__";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    /// One conversation per line, utterances separated by `__eou__`.
    #[default]
    Eou,
    /// One utterance per line, conversations separated by blank lines.
    BlankLine,
}

/// Tokenized conversations before vocabulary mapping.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawCorpus {
    pub conversations: Vec<Vec<Vec<String>>>,
    /// Conversations dropped for having fewer than two utterances.
    pub skipped: usize,
}

impl RawCorpus {
    pub fn num_utterances(&self) -> usize {
        self.conversations.iter().map(Vec::len).sum()
    }

    fn push(&mut self, conversation: Vec<Vec<String>>) {
        if conversation.len() >= 2 {
            self.conversations.push(conversation);
        } else {
            self.skipped += 1;
        }
    }
}

fn is_numeral(tok: &str) -> bool {
    tok.chars().any(|c| c.is_ascii_digit())
        && tok
            .chars()
            .all(|c| c.is_ascii_digit() || ".,:/-".contains(c))
}

/// Whitespace tokenization with lowercasing; numerals become [`NUM_TOKEN`].
/// Idempotent, so generated text can be re-tokenized for evaluation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|tok| {
            if tok == NUM_TOKEN || is_numeral(tok) {
                NUM_TOKEN.to_string()
            } else {
                tok.to_lowercase()
            }
        })
        .collect()
}

pub fn parse_eou(text: &str) -> RawCorpus {
    let mut corpus = RawCorpus::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let conversation: Vec<Vec<String>> = line
            .split(EOU)
            .map(tokenize)
            .filter(|u| !u.is_empty())
            .collect();
        corpus.push(conversation);
    }
    corpus
}

pub fn parse_blank_line(text: &str) -> RawCorpus {
    let mut corpus = RawCorpus::default();
    let mut current = Vec::new();
    for line in text.lines() {
        let toks = tokenize(line);
        if toks.is_empty() {
            if !current.is_empty() {
                corpus.push(std::mem::take(&mut current));
            }
        } else {
            current.push(toks);
        }
    }
    if !current.is_empty() {
        corpus.push(current);
    }
    corpus
}

pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<RawCorpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(match format {
        CorpusFormat::Eou => parse_eou(&text),
        CorpusFormat::BlankLine => parse_blank_line(&text),
    })
}
