use std::collections::HashMap;

use crate::corpus::{BOS, EOS, RESERVED, UNK};
use crate::error::{Error, Result};

pub const KN_DISCOUNT: f64 = 0.75;

/// Conditional next-token probabilities given the two previous tokens.
pub trait LanguageModel {
    fn prob(&self, prev2: &str, prev1: &str, word: &str) -> f64;
}

/// Interpolated Kneser-Ney trigram model.
///
/// Sentences are padded as `<s> <s> w1 .. wn </s>`. The predictable
/// vocabulary is every training token plus `</s>` and `<unk>`; unseen
/// tokens are scored as `<unk>`. The lowest order interpolates continuation
/// counts with a uniform distribution over that vocabulary, so every
/// probability is positive and each conditional sums to one.
#[derive(Clone, Debug)]
pub struct NgramLm {
    discount: f64,
    ids: HashMap<String, u32>,
    tokens: Vec<String>,
    /// Number of predictable tokens (every id except `<s>`).
    vocab_size: usize,
    trigram: HashMap<(u32, u32, u32), usize>,
    /// Per (u, v): total trigram count and number of distinct followers.
    trigram_context: HashMap<(u32, u32), (usize, usize)>,
    /// Distinct left words u for each (v, w).
    bigram_cont: HashMap<(u32, u32), usize>,
    /// Per v: summed continuation counts and number of distinct followers.
    bigram_context: HashMap<u32, (usize, usize)>,
    /// Distinct left words v for each w.
    unigram_cont: HashMap<u32, usize>,
    unigram_total: usize,
}

impl NgramLm {
    pub fn train<S: AsRef<str>, T: AsRef<[S]>>(sentences: &[T], discount: f64) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::InvalidInput(
                "language model needs training sentences".into(),
            ));
        }
        if !(0.0..=1.0).contains(&discount) {
            return Err(Error::InvalidInput(format!(
                "discount {discount} outside [0, 1]"
            )));
        }
        let mut lm = NgramLm {
            discount,
            ids: HashMap::new(),
            tokens: Vec::new(),
            vocab_size: 0,
            trigram: HashMap::new(),
            trigram_context: HashMap::new(),
            bigram_cont: HashMap::new(),
            bigram_context: HashMap::new(),
            unigram_cont: HashMap::new(),
            unigram_total: 0,
        };
        for special in [BOS, EOS, UNK] {
            lm.intern(RESERVED[special]);
        }
        for s in sentences {
            let ids: Vec<u32> = s.as_ref().iter().map(|t| lm.intern(t.as_ref())).collect();
            for tri in padded(&ids, lm.bos(), lm.eos()).windows(3) {
                *lm.trigram.entry((tri[0], tri[1], tri[2])).or_insert(0) += 1;
            }
        }
        lm.vocab_size = lm.tokens.len() - 1;
        for (&(u, v, w), &c) in &lm.trigram {
            let ctx = lm.trigram_context.entry((u, v)).or_insert((0, 0));
            ctx.0 += c;
            ctx.1 += 1;
            *lm.bigram_cont.entry((v, w)).or_insert(0) += 1;
        }
        for (&(v, w), &c) in &lm.bigram_cont {
            let ctx = lm.bigram_context.entry(v).or_insert((0, 0));
            ctx.0 += c;
            ctx.1 += 1;
            *lm.unigram_cont.entry(w).or_insert(0) += 1;
        }
        lm.unigram_total = lm.unigram_cont.values().sum();
        Ok(lm)
    }

    fn intern(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.ids.insert(token.to_string(), id);
        self.tokens.push(token.to_string());
        id
    }

    fn bos(&self) -> u32 {
        self.ids[RESERVED[BOS]]
    }

    fn eos(&self) -> u32 {
        self.ids[RESERVED[EOS]]
    }

    fn lookup(&self, token: &str) -> u32 {
        self.ids
            .get(token)
            .copied()
            .unwrap_or_else(|| self.ids[RESERVED[UNK]])
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Every token the model can predict.
    pub fn vocabulary(&self) -> Vec<&str> {
        let bos = self.bos();
        (0..self.tokens.len() as u32)
            .filter(|&i| i != bos)
            .map(|i| self.tokens[i as usize].as_str())
            .collect()
    }

    /// Every context token seen in training, `<s>` included.
    pub fn context_tokens(&self) -> Vec<&str> {
        self.tokens.iter().map(String::as_str).collect()
    }

    fn p_unigram(&self, w: u32) -> f64 {
        let uniform = 1.0 / self.vocab_size as f64;
        if self.unigram_total == 0 {
            return uniform;
        }
        let total = self.unigram_total as f64;
        let c = self.unigram_cont.get(&w).copied().unwrap_or(0) as f64;
        let backoff = self.discount * self.unigram_cont.len() as f64 / total;
        (c - self.discount).max(0.0) / total + backoff * uniform
    }

    fn p_bigram(&self, v: u32, w: u32) -> f64 {
        let lower = self.p_unigram(w);
        let Some(&(total, followers)) = self.bigram_context.get(&v) else {
            return lower;
        };
        let total = total as f64;
        let c = self.bigram_cont.get(&(v, w)).copied().unwrap_or(0) as f64;
        (c - self.discount).max(0.0) / total + self.discount * followers as f64 / total * lower
    }

    fn p_trigram(&self, u: u32, v: u32, w: u32) -> f64 {
        let lower = self.p_bigram(v, w);
        let Some(&(total, followers)) = self.trigram_context.get(&(u, v)) else {
            return lower;
        };
        let total = total as f64;
        let c = self.trigram.get(&(u, v, w)).copied().unwrap_or(0) as f64;
        (c - self.discount).max(0.0) / total + self.discount * followers as f64 / total * lower
    }
}

fn padded(ids: &[u32], bos: u32, eos: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len() + 3);
    out.extend([bos, bos]);
    out.extend_from_slice(ids);
    out.push(eos);
    out
}

impl LanguageModel for NgramLm {
    fn prob(&self, prev2: &str, prev1: &str, word: &str) -> f64 {
        let w = self.lookup(word);
        if w == self.bos() {
            return 0.0;
        }
        self.p_trigram(self.lookup(prev2), self.lookup(prev1), w)
    }
}

/// `exp(-(1/T) sum log p)` over every token of every response plus one
/// end-of-sentence token each.
pub fn perplexity<L: LanguageModel, S: AsRef<str>, T: AsRef<[S]>>(
    lm: &L,
    responses: &[T],
) -> Result<f64> {
    let (bos, eos) = (RESERVED[BOS], RESERVED[EOS]);
    let mut log_sum = 0.0;
    let mut count = 0usize;
    for r in responses {
        let mut seq: Vec<&str> = vec![bos, bos];
        seq.extend(r.as_ref().iter().map(AsRef::as_ref));
        seq.push(eos);
        for w in seq.windows(3) {
            let p = lm.prob(w[0], w[1], w[2]);
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "language model gave probability {p} to {:?} after {:?} {:?}",
                    w[2], w[0], w[1]
                )));
            }
            log_sum += p.ln();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("no responses to score".into()));
    }
    Ok((-log_sum / count as f64).exp())
}
