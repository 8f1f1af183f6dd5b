//! Reference-based text metrics: sentence BLEU-4 and ROUGE-L.

use std::collections::HashMap;

use super::EvalError;

/// Floor applied to zero n-gram precisions before the geometric mean.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const BLEU_MAX_ORDER: usize = 4;

/// Lowercase whitespace tokens, shared by both metrics.
pub fn metric_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Reference length closest to `c`; ties go to the shorter reference.
fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .expect("at least one reference")
}

/// Sentence-level BLEU with uniform weights over n = 1..4.
///
/// Orders longer than the candidate have no n-grams and are left out of the
/// geometric mean, whose weights are spread over the remaining orders.
pub fn bleu4(candidate: &str, references: &[&str]) -> Result<f64, EvalError> {
    let cand = metric_tokens(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| metric_tokens(r)).collect();
    if cand.is_empty() || refs.is_empty() || refs.iter().any(Vec::is_empty) {
        return Err(EvalError::EmptyInput);
    }
    let orders = BLEU_MAX_ORDER.min(cand.len());
    let mut precisions = Vec::with_capacity(orders);
    for n in 1..=orders {
        let cand_counts = ngram_counts(&cand, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &refs {
            for (gram, count) in ngram_counts(r, n) {
                let slot = max_ref.entry(gram).or_insert(0);
                *slot = (*slot).max(count);
            }
        }
        let clipped: usize = cand_counts
            .iter()
            .map(|(gram, &count)| count.min(max_ref.get(gram).copied().unwrap_or(0)))
            .sum();
        let total = cand.len() + 1 - n;
        precisions.push((clipped as f64 / total as f64).max(BLEU_EPSILON));
    }
    let geo = if precisions.iter().all(|&p| p == precisions[0]) {
        precisions[0]
    } else {
        (precisions.iter().map(|p| p.ln()).sum::<f64>() / orders as f64).exp()
    };
    let c = cand.len();
    let r = closest_ref_len(c, &refs);
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok((bp * geo).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RougeL {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// Token-level longest common subsequence precision, recall and F1.
pub fn rouge_l(candidate: &str, reference: &str) -> Result<RougeL, EvalError> {
    let cand = metric_tokens(candidate);
    let refr = metric_tokens(reference);
    if cand.is_empty() || refr.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let lcs = lcs_len(&cand, &refr) as f64;
    let precision = lcs / cand.len() as f64;
    let recall = lcs / refr.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(RougeL { precision, recall, f1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bleu_identity_and_disjoint() {
        for x in ["rain", "light rain", "light rain later today", "a b c d e f g"] {
            assert_eq!(bleu4(x, &[x]).unwrap(), 1.0);
        }
        assert!(bleu4("sunny warm dry", &["cold wet windy"]).unwrap() <= 1e-9);
        assert!(bleu4("sunny", &["cold"]).unwrap() <= 1e-9);
        assert!(matches!(bleu4("", &["x"]), Err(EvalError::EmptyInput)));
        assert!(matches!(bleu4("x", &[]), Err(EvalError::EmptyInput)));
    }

    #[test]
    fn bleu_worked_example() {
        // p1 = 5/6, p2 = 3/5, p3 = 2/4, p4 = 1/3; equal lengths so no penalty
        let got = bleu4("the cat sat on the mat", &["the cat sat on a mat"]).unwrap();
        let want = ((5.0f64 / 6.0).ln() + 0.6f64.ln() + 0.5f64.ln() + (1.0f64 / 3.0).ln()) / 4.0;
        assert!((got - want.exp()).abs() < 1e-12);
    }

    #[test]
    fn bleu_brevity_penalty_uses_closest_reference() {
        // candidate of 2 tokens, references of 3 and 5 tokens: r = 3
        let got = bleu4("a b", &["a b c", "a b c d e"]).unwrap();
        assert!((got - (1.0f64 - 1.5).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_examples() {
        let r = rouge_l("a b c d", "a c d e").unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.75, 0.75, 0.75));
        let same = rouge_l("Rain Later", "rain later").unwrap();
        assert_eq!((same.precision, same.recall, same.f1), (1.0, 1.0, 1.0));
        let none = rouge_l("x y", "z").unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
    }

    proptest! {
        #[test]
        fn bleu_bounded_and_reference_order_free(
            c in prop::collection::vec("[a-d]", 1..12),
            r1 in prop::collection::vec("[a-d]", 1..12),
            r2 in prop::collection::vec("[a-d]", 1..12),
        ) {
            let (c, r1, r2) = (c.join(" "), r1.join(" "), r2.join(" "));
            let a = bleu4(&c, &[&r1, &r2]).unwrap();
            let b = bleu4(&c, &[&r2, &r1]).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(bleu4(&c, &[&c]).unwrap(), 1.0);
        }

        #[test]
        fn rouge_bounded_and_self_perfect(
            c in prop::collection::vec("[a-d]", 1..12),
            r in prop::collection::vec("[a-d]", 1..12),
        ) {
            let (c, r) = (c.join(" "), r.join(" "));
            let s = rouge_l(&c, &r).unwrap();
            for v in [s.precision, s.recall, s.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert_eq!(rouge_l(&c, &c).unwrap().f1, 1.0);
        }
    }
}
