//! Small generated datasets for smoke tests and desk-scale experiments.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

const NOUNS: &[&str] = &[
    "cat", "dog", "bird", "house", "car", "tree", "book", "friend", "teacher", "garden", "river",
    "apple",
];
/// One adjective per noun, at the same index: a noun only ever appears with
/// its own adjective, which keeps the grammar's entropy low.
const ADJECTIVES: &[&str] = &[
    "small", "old", "red", "tall", "fast", "green", "heavy", "kind", "quiet", "wide", "sweet",
    "big",
];
const VERBS: &[&str] = &[
    "sees", "likes", "finds", "takes", "wants", "helps", "reads", "paints", "follows",
];
const PRONOUNS: &[&str] = &["he", "she", "it", "we", "they"];
const ADVERBS: &[&str] = &["today", "again", "slowly", "quickly", "often"];
const PREPOSITIONS: &[&str] = &["near", "behind", "under"];

/// Number of distinct words [`toy_sentence`] can produce.
pub fn toy_grammar_vocab_size() -> usize {
    1 + [NOUNS, ADJECTIVES, VERBS, PRONOUNS, ADVERBS]
        .iter()
        .map(|ws| ws.len())
        .sum::<usize>()
}

fn pick<'a>(words: &[&'a str], rng: &mut impl Rng) -> &'a str {
    words.choose(rng).expect("word lists are nonempty")
}

fn noun_phrase(rng: &mut impl Rng) -> Vec<String> {
    let noun = rng.gen_range(0..NOUNS.len());
    let mut np = vec!["the".to_string()];
    if rng.gen_bool(0.5) {
        np.push(ADJECTIVES[noun].to_string());
    }
    np.push(NOUNS[noun].to_string());
    np
}

/// One sentence of at most 8 tokens: subject, verb, object and an optional
/// adverb, e.g. `the red bird follows the dog today`.
pub fn toy_sentence(rng: &mut impl Rng) -> Vec<String> {
    let mut s = if rng.gen_bool(0.4) {
        vec![pick(PRONOUNS, rng).to_string()]
    } else {
        noun_phrase(rng)
    };
    s.push(pick(VERBS, rng).to_string());
    s.extend(noun_phrase(rng));
    if rng.gen_bool(0.5) {
        s.push(pick(ADVERBS, rng).to_string());
    }
    s
}

/// `n` distinct toy-grammar sentences.
pub fn toy_grammar_corpus(n: usize, rng: &mut impl Rng) -> Vec<Vec<String>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s = toy_sentence(rng);
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

/// A toy conversation of 2 to 4 turns. Every reply is determined by the
/// turn before it, so a conditional model can learn the mapping.
pub fn toy_conversation(rng: &mut impl Rng) -> Vec<Vec<String>> {
    let turns = rng.gen_range(2..=4);
    let mut conv: Vec<Vec<String>> = Vec::with_capacity(turns);
    let words = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let noun = pick(NOUNS, rng);
    let adj = pick(ADJECTIVES, rng);
    conv.push(match rng.gen_range(0..4) {
        0 => words(&format!("do you like the {noun} ?")),
        1 => words(&format!("where is the {adj} {noun} ?")),
        2 => words(&format!("i have a {adj} {noun} .")),
        _ => words("hello , how are you ?"),
    });
    while conv.len() < turns {
        let prev = conv.last().expect("conversation starts nonempty").join(" ");
        let reply = toy_reply(&prev, rng);
        conv.push(words(&reply));
    }
    conv
}

fn toy_reply(prev: &str, rng: &mut impl Rng) -> String {
    let toks: Vec<&str> = prev.split_whitespace().collect();
    let last_noun = toks.iter().rev().find(|t| NOUNS.contains(t)).copied();
    let adj = toks.iter().find(|t| ADJECTIVES.contains(t)).copied();
    match (toks.first().copied(), last_noun, adj) {
        (Some("do"), Some(n), _) => format!("yes , i like the {n} ."),
        (Some("where"), Some(n), Some(a)) => {
            format!(
                "the {a} {n} is {} the {} .",
                pick(PREPOSITIONS, rng),
                pick(NOUNS, rng)
            )
        }
        (Some("i"), Some(n), Some(a)) => format!("is your {n} really {a} ?"),
        (Some("is"), Some(n), Some(a)) => format!("yes , my {n} is very {a} ."),
        (Some("hello"), _, _) => "i am fine , thank you .".to_string(),
        (_, Some(n), _) => format!("do you like the {n} ?"),
        _ => format!(
            "where is the {} {} ?",
            pick(ADJECTIVES, rng),
            pick(NOUNS, rng)
        ),
    }
}

pub fn toy_dialog_corpus(conversations: usize, rng: &mut impl Rng) -> Vec<Vec<Vec<String>>> {
    (0..conversations).map(|_| toy_conversation(rng)).collect()
}

/// Renders conversations in the `__eou__`-delimited one-per-line format.
pub fn to_eou_text(conversations: &[Vec<Vec<String>>]) -> String {
    conversations
        .iter()
        .map(|c| {
            let turns: Vec<String> = c.iter().map(|u| u.join(" ")).collect();
            format!("{} __eou__\n", turns.join(" __eou__ "))
        })
        .collect()
}

/// Query/response latent pairs related by a fixed affine map.
#[derive(Clone, Debug)]
pub struct LinearMapTask {
    pub matrix: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub queries: Vec<Vec<f64>>,
    pub responses: Vec<Vec<f64>>,
}

impl LinearMapTask {
    /// `responses[i] = A queries[i] + b` with standard normal queries, `A`
    /// scaled by `1/sqrt(dim)` and `b ~ N(0, 0.25 I)`.
    pub fn generate(dim: usize, pairs: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let matrix: Vec<Vec<f64>> = (0..dim)
            .map(|_| {
                (0..dim)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let bias: Vec<f64> = (0..dim)
            .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let queries: Vec<Vec<f64>> = (0..pairs)
            .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let responses = queries.iter().map(|q| affine(&matrix, &bias, q)).collect();
        LinearMapTask {
            matrix,
            bias,
            queries,
            responses,
        }
    }

    /// Mean squared norm of the responses.
    pub fn response_energy(&self) -> f64 {
        mean_sq_norm(&self.responses)
    }
}

pub fn affine(matrix: &[Vec<f64>], bias: &[f64], x: &[f64]) -> Vec<f64> {
    matrix
        .iter()
        .zip(bias)
        .map(|(row, b)| row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b)
        .collect()
}

pub fn mean_sq_norm(rows: &[Vec<f64>]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / rows.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn toy_grammar_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let corpus = toy_grammar_corpus(500, &mut rng);
        assert_eq!(corpus.len(), 500);
        assert!(corpus.iter().all(|s| (2..=8).contains(&s.len())));
        let vocab: HashSet<&String> = corpus.iter().flatten().collect();
        assert!(vocab.len() <= toy_grammar_vocab_size());
        assert!((40..=60).contains(&toy_grammar_vocab_size()));
    }

    #[test]
    fn toy_dialogs_are_multi_turn() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let convs = toy_dialog_corpus(50, &mut rng);
        assert!(convs.iter().all(|c| (2..=4).contains(&c.len())));
        let text = to_eou_text(&convs);
        assert_eq!(text.lines().count(), 50);
    }

    #[test]
    fn linear_map_pairs_satisfy_the_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let task = LinearMapTask::generate(8, 10, &mut rng);
        for (q, r) in task.queries.iter().zip(&task.responses) {
            let again = affine(&task.matrix, &task.bias, q);
            assert_eq!(&again, r);
        }
        assert!(task.response_energy() > 0.0);
    }
}
