//! Corpus-level BLEU with ε-smoothed zero counts.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Replaces a zero numerator or denominator in an n-gram precision.
pub const SMOOTHING_EPS: f64 = 1e-9;

fn ngrams<'a>(words: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Geometric mean of clipped n-gram precisions for `n = 1..=max_n`, pooled
/// over the corpus, times the brevity penalty. Sentences are split on
/// whitespace.
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[R], max_n: usize) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Invalid("BLEU of an empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Invalid("max_n must be positive".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let c: Vec<&str> = c.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngrams(&r, n);
            for (g, k) in ngrams(&c, n) {
                matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += k;
            }
        }
    }
    if cand_len == 0 {
        return Ok(if ref_len == 0 { 1.0 } else { 0.0 });
    }
    let log_p: f64 = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| {
            let m = if m == 0 { SMOOTHING_EPS } else { m as f64 };
            let t = if t == 0 { SMOOTHING_EPS } else { t as f64 };
            (m / t).ln()
        })
        .sum::<f64>()
        / max_n as f64;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_corpus_scores_one() {
        let c = ["animals require food", "plants do not use light to grow"];
        assert!((bleu(&c, &c, 4).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_vocabulary_scores_near_zero() {
        assert!(bleu(&["a b c d e"], &["v w x y z"], 4).unwrap() < 1e-6);
    }

    #[test]
    fn three_versus_four_tokens() {
        // p1..p3 = 1, no 4-grams on either side, BP = exp(1 − 4/3)
        let s = bleu(&["the cat sat"], &["the cat sat down"], 4).unwrap();
        assert!((s - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-9);
        assert!((s - 0.717).abs() < 1e-3);
    }

    #[test]
    fn clipping_limits_repeated_words() {
        // unigram precision 2/7 with clipping, BP = 1, higher orders ε-smoothed
        let s = bleu(&["the the the the the the the"], &["the cat is on the mat"], 1).unwrap();
        assert!((s - 2.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn input_errors() {
        let empty: [&str; 0] = [];
        assert!(bleu(&empty, &empty, 4).is_err());
        assert!(bleu(&["a"], &["a", "b"], 4).is_err());
    }

    proptest! {
        #[test]
        fn permutation_invariant_and_bounded(
            pairs in prop::collection::vec((prop::collection::vec(0u8..6, 0..8), prop::collection::vec(0u8..6, 1..8)), 1..12),
            seed in 0u64..1000,
        ) {
            let text = |v: &Vec<u8>| v.iter().map(|x| format!("w{x}")).collect::<Vec<_>>().join(" ");
            let mut p: Vec<(String, String)> = pairs.iter().map(|(c, r)| (text(c), text(r))).collect();
            let (c, r): (Vec<_>, Vec<_>) = p.iter().cloned().unzip();
            let a = bleu(&c, &r, 4).unwrap();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (c, r): (Vec<_>, Vec<_>) = p.into_iter().unzip();
            let b = bleu(&c, &r, 4).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
