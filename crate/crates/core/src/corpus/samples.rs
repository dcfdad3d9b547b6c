use std::collections::HashSet;

use super::load::RawCorpus;
use super::vocab::Vocabulary;

/// Conversations as token ids (BOS/EOS are added when batching).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DialogCorpus {
    pub conversations: Vec<Vec<Vec<usize>>>,
}

impl DialogCorpus {
    /// Encodes a raw corpus, truncating utterances to `max_len` tokens.
    pub fn encode(raw: &RawCorpus, vocab: &Vocabulary, max_len: usize) -> Self {
        let conversations = raw
            .conversations
            .iter()
            .map(|conv| {
                conv.iter()
                    .map(|u| vocab.encode(&u[..u.len().min(max_len)]))
                    .collect()
            })
            .collect();
        DialogCorpus { conversations }
    }

    pub fn utterances(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.conversations.iter().flatten()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TurnSample {
    /// Utterances before the query, oldest first; empty in single-turn mode.
    pub context: Vec<Vec<usize>>,
    pub query: Vec<usize>,
    pub response: Vec<usize>,
}

/// Every pair of consecutive utterances.
pub fn make_single_turn(corpus: &DialogCorpus) -> Vec<TurnSample> {
    make_multi_turn(corpus, 0)
}

/// Every utterance with up to `max_context_turns` utterances preceding it
/// as context, paired with the utterance that follows.
pub fn make_multi_turn(corpus: &DialogCorpus, max_context_turns: usize) -> Vec<TurnSample> {
    let mut out = Vec::new();
    for conv in &corpus.conversations {
        for i in 0..conv.len().saturating_sub(1) {
            let start = i.saturating_sub(max_context_turns);
            out.push(TurnSample {
                context: conv[start..i].to_vec(),
                query: conv[i].clone(),
                response: conv[i + 1].clone(),
            });
        }
    }
    out
}

/// Keeps the first occurrence of every exact (context, query, response).
pub fn deduplicate(samples: Vec<TurnSample>) -> Vec<TurnSample> {
    let mut seen = HashSet::with_capacity(samples.len());
    samples
        .into_iter()
        .filter(|s| seen.insert(s.clone()))
        .collect()
}
