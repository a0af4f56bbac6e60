//! Corpus-level BLEU-4 with a single reference per segment.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// 0 to 100.
    pub score: f64,
    /// Modified n-gram precisions for n = 1..=4, as fractions.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.precisions.map(|p| 100.0 * p);
        write!(
            f,
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.score,
            p[0],
            p[1],
            p[2],
            p[3],
            self.brevity_penalty,
            self.hyp_len as f64 / self.ref_len.max(1) as f64,
            self.hyp_len,
            self.ref_len
        )
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    counts
}

/// Geometric mean of clipped n-gram precisions times the brevity penalty
/// `min(1, exp(1 - r / h))`, with counts pooled over the corpus and no
/// smoothing.
pub fn corpus_bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::LengthMismatch { hyps: hyps.len(), refs: refs.len() });
    }
    if hyps.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut matched = [0usize; MAX_ORDER];
    let mut possible = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(r, n);
            for (gram, c) in ngram_counts(h, n) {
                matched[n - 1] += c.min(rc.get(&gram).copied().unwrap_or(0));
            }
            possible[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let precisions: [f64; MAX_ORDER] =
        std::array::from_fn(|i| if possible[i] == 0 { 0.0 } else { matched[i] as f64 / possible[i] as f64 });
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport { score, precisions, brevity_penalty, hyp_len, ref_len })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn identity_is_100() {
        let c = vec![toks("the cat sat on the mat"), toks("a b c d e")];
        let r = corpus_bleu(&c, &c).unwrap();
        assert_eq!(r.score, 100.0);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn no_four_gram_overlap_is_zero() {
        let r = corpus_bleu(&[toks("a b c")], &[toks("a b c")]).unwrap();
        assert_eq!(r.score, 0.0);
    }

    #[test]
    fn hand_computed_example() {
        // hyp: "the the the the the the the", ref: "the cat is on the mat"
        // unigram clipped 2/7, higher orders: "the the" vs ref bigrams -> 0
        let r = corpus_bleu(&[toks("the the the the the the the")], &[toks("the cat is on the mat")]).unwrap();
        assert!((r.precisions[0] - 2.0 / 7.0).abs() < 1e-12);
        assert_eq!(r.precisions[1], 0.0);
        assert_eq!(r.score, 0.0);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn short_hypothesis_is_penalized() {
        let h = toks("a b c d e f");
        let r = toks("a b c d e f g h");
        let rep = corpus_bleu(&[h], &[r]).unwrap();
        let bp = (1.0f64 - 8.0 / 6.0).exp();
        assert!((rep.brevity_penalty - bp).abs() < 1e-12);
        assert!((rep.score - 100.0 * bp).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        let a = vec![toks("x")];
        assert!(matches!(corpus_bleu(&a, &[]), Err(Error::LengthMismatch { hyps: 1, refs: 0 })));
        let e: Vec<Vec<String>> = Vec::new();
        assert!(matches!(corpus_bleu(&e, &e), Err(Error::EmptyCorpus)));
    }

    proptest::proptest! {
        #[test]
        fn bounded_and_order_free(
            pairs in proptest::collection::vec(
                (proptest::collection::vec(0u8..4, 0..12), proptest::collection::vec(0u8..4, 1..12)),
                1..8,
            ),
            rotate in 0usize..8,
        ) {
            let words = |v: &Vec<u8>| v.iter().map(|w| format!("w{w}")).collect::<Vec<_>>();
            let hyps: Vec<_> = pairs.iter().map(|(h, _)| words(h)).collect();
            let refs: Vec<_> = pairs.iter().map(|(_, r)| words(r)).collect();
            let a = corpus_bleu(&hyps, &refs).unwrap();
            proptest::prop_assert!((0.0..=100.0).contains(&a.score));
            proptest::prop_assert!((0.0..=1.0).contains(&a.brevity_penalty));

            let k = rotate % pairs.len();
            let mut h2 = hyps.clone();
            let mut r2 = refs.clone();
            h2.rotate_left(k);
            r2.rotate_left(k);
            let b = corpus_bleu(&h2, &r2).unwrap();
            proptest::prop_assert_eq!(a.score, b.score);
        }
    }
}
