//! Dialog corpora: loading, vocabulary, sample extraction and batching.

mod batch;
mod load;
mod samples;
mod vocab;

pub use batch::{batch, pad_batch, PaddedBatch, SampleBatch};
pub use load::{
    load_corpus, parse_blank_line, parse_eou, tokenize, CorpusFormat, RawCorpus, NUM_TOKEN,
};
pub use samples::{deduplicate, make_multi_turn, make_single_turn, DialogCorpus, TurnSample};
pub use vocab::{Vocabulary, BOS, EOS, PAD, RESERVED, UNK};

/// Default cap on utterance length, in content tokens.
pub const DEFAULT_MAX_UTTERANCE_LEN: usize = 30;
