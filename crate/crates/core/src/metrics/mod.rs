//! Response quality metrics: smoothed BLEU against a reference, distinct-n
//! diversity, length, type-token ratio and trigram perplexity.

mod bleu;
mod diversity;
mod lm;
mod report;

pub use bleu::{bleu_aggregate, bleu_smoothed, bleu_stats, BleuStats, DEFAULT_MAX_ORDER};
pub use diversity::{asl, inter_distinct, intra_distinct, ttr};
pub use lm::{perplexity, LanguageModel, NgramLm, KN_DISCOUNT};
pub use report::{evaluate_responses, MetricReport, QueryResponses};
