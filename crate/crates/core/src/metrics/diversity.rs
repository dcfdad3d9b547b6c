use std::collections::HashSet;
use std::hash::Hash;

/// Unique over total n-grams in one response. Responses shorter than `n`
/// score 1 when nonempty and 0 when empty.
pub fn intra_distinct<T: Eq + Hash>(response: &[T], n: usize) -> f64 {
    distinct_ratio(std::slice::from_ref(&response), n)
}

/// Unique over total n-grams pooled across one query's responses, with the
/// same short-response convention as [`intra_distinct`].
pub fn inter_distinct<T: Eq + Hash, S: AsRef<[T]>>(responses: &[S], n: usize) -> f64 {
    distinct_ratio(responses, n)
}

fn distinct_ratio<T: Eq + Hash, S: AsRef<[T]>>(responses: &[S], n: usize) -> f64 {
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        let r = r.as_ref();
        if n > 0 && r.len() >= n {
            for w in r.windows(n) {
                unique.insert(w);
                total += 1;
            }
        }
    }
    if total == 0 {
        let any_tokens = responses.iter().any(|r| !r.as_ref().is_empty());
        return if any_tokens { 1.0 } else { 0.0 };
    }
    unique.len() as f64 / total as f64
}

/// Mean response length in tokens; 0 for no responses.
pub fn asl<T, S: AsRef<[T]>>(responses: &[S]) -> f64 {
    if responses.is_empty() {
        return 0.0;
    }
    responses.iter().map(|r| r.as_ref().len()).sum::<usize>() as f64 / responses.len() as f64
}

/// Distinct word types over total tokens across every response, or `None`
/// when there are no tokens at all.
pub fn ttr<T: Eq + Hash, S: AsRef<[T]>>(responses: &[S]) -> Option<f64> {
    let mut types = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        for t in r.as_ref() {
            types.insert(t);
            total += 1;
        }
    }
    (total > 0).then(|| types.len() as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn intra_examples() {
        assert_eq!(intra_distinct(&toks("i do not know"), 1), 1.0);
        assert!((intra_distinct(&toks("no no no"), 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((intra_distinct(&toks("no no no"), 2) - 0.5).abs() < 1e-15);
        assert_eq!(intra_distinct(&toks("hi"), 2), 1.0);
        assert_eq!(intra_distinct::<&str>(&[], 1), 0.0);
    }

    #[test]
    fn inter_examples() {
        let rs = [toks("a b"), toks("a b")];
        assert_eq!(inter_distinct(&rs, 1), 0.5);
        let k = 5;
        let same: Vec<Vec<&str>> = (0..k).map(|_| toks("w x y z")).collect();
        assert!((inter_distinct(&same, 1) - 1.0 / k as f64).abs() < 1e-15);
    }

    #[test]
    fn length_and_type_token_examples() {
        assert_eq!(asl(&[toks("a b"), toks("a b c d")]), 3.0);
        assert_eq!(asl(&[Vec::<&str>::new()]), 0.0);
        assert_eq!(ttr(&[toks("a b a b")]), Some(0.5));
        assert_eq!(ttr(&[toks("a b"), toks("c d")]), Some(1.0));
        assert_eq!(ttr(&[Vec::<&str>::new()]), None);
    }
}
