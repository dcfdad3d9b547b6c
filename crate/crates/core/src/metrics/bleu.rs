use std::collections::HashMap;
use std::hash::Hash;

pub const DEFAULT_MAX_ORDER: usize = 4;

/// Clipped n-gram matches and hypothesis n-gram totals for orders
/// `1..=max_order`, plus both lengths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

pub(crate) fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

pub fn bleu_stats<T: Eq + Hash>(hypothesis: &[T], reference: &[T], max_order: usize) -> BleuStats {
    let mut matches = Vec::with_capacity(max_order);
    let mut totals = Vec::with_capacity(max_order);
    for n in 1..=max_order {
        let hyp = ngram_counts(hypothesis, n);
        let refs = ngram_counts(reference, n);
        matches.push(
            hyp.iter()
                .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
                .sum(),
        );
        totals.push(hypothesis.len().saturating_sub(n - 1));
    }
    BleuStats {
        matches,
        totals,
        hyp_len: hypothesis.len(),
        ref_len: reference.len(),
    }
}

impl BleuStats {
    /// Smoothed sentence BLEU.
    ///
    /// A precision with no matches counts as `1 / (2 * total)`. Orders with
    /// no hypothesis n-grams at all (hypothesis shorter than the order) are
    /// left out of the geometric mean. The brevity penalty is
    /// `exp(1 - ref_len / hyp_len)` when the hypothesis is not longer than
    /// the reference. An empty hypothesis scores 0.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut orders = 0;
        for (&m, &t) in self.matches.iter().zip(&self.totals) {
            if t == 0 {
                continue;
            }
            let p = if m == 0 {
                1.0 / (2.0 * t as f64)
            } else {
                m as f64 / t as f64
            };
            log_sum += p.ln();
            orders += 1;
        }
        if orders == 0 {
            return 0.0;
        }
        let bp = if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        bp * (log_sum / orders as f64).exp()
    }
}

/// Smoothed sentence BLEU up to 4-grams against a single reference.
pub fn bleu_smoothed<T: Eq + Hash>(hypothesis: &[T], reference: &[T]) -> f64 {
    bleu_stats(hypothesis, reference, DEFAULT_MAX_ORDER).score()
}

/// Average, maximum and harmonic mean of the two over one query's scores.
/// The harmonic mean is 0 when both are 0; no scores gives all zeros.
pub fn bleu_aggregate(scores: &[f64]) -> (f64, f64, f64) {
    if scores.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let avg = scores.iter().sum::<f64>() / scores.len() as f64;
    let max = scores.iter().copied().fold(0.0, f64::max);
    let hm = if avg + max == 0.0 {
        0.0
    } else {
        2.0 * avg * max / (avg + max)
    };
    (avg, max, hm)
}
