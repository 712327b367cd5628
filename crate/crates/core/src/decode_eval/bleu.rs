use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Corpus-level BLEU with its ingredients.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// BLEU in percent, `0..=100`.
    pub bleu: f64,
    /// Clipped n-gram precisions, `precisions[n - 1]` for order `n`.
    pub precisions: Vec<f64>,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    /// Stable `key=value` rendering used by the CLI.
    pub fn to_line(&self) -> String {
        let mut s = format!("BLEU={:.2}", self.bleu);
        for (n, p) in self.precisions.iter().enumerate() {
            s.push_str(&format!(
                " p{}={:.6} ({}/{})",
                n + 1,
                p,
                self.matches[n],
                self.totals[n]
            ));
        }
        s.push_str(&format!(
            " BP={:.6} hyp_len={} ref_len={}",
            self.brevity_penalty, self.hyp_len, self.ref_len
        ));
        s
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU over `max_n`-grams with clipped counts and the multi-bleu
/// brevity penalty. Unsmoothed: any zero precision gives BLEU 0. With
/// `smooth`, orders above 1 use add-one counts.
pub fn corpus_bleu_with<H, R, T>(hypotheses: &[H], references: &[R], max_n: usize, smooth: bool) -> Result<BleuReport>
where
    H: AsRef<[T]>,
    R: AsRef<[T]>,
    T: Eq + Hash,
{
    if hypotheses.len() != references.len() {
        return Err(Error::LineCountMismatch {
            left_name: "hypotheses".into(),
            left: hypotheses.len(),
            right_name: "references".into(),
            right: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(Error::Empty("BLEU corpus"));
    }
    if max_n == 0 {
        return Err(Error::InvalidArgument("BLEU order must be at least 1".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (gram, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            let (m, t) = if smooth && i > 0 {
                (matches[i] + 1, totals[i] + 1)
            } else {
                (matches[i], totals[i])
            };
            if t == 0 {
                0.0
            } else {
                m as f64 / t as f64
            }
        })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Unsmoothed 4-gram corpus BLEU.
pub fn corpus_bleu<H, R, T>(hypotheses: &[H], references: &[R]) -> Result<BleuReport>
where
    H: AsRef<[T]>,
    R: AsRef<[T]>,
    T: Eq + Hash,
{
    corpus_bleu_with(hypotheses, references, MAX_ORDER, false)
}

/// Unsmoothed BLEU of a single pair, in percent. An empty hypothesis
/// scores 0.
pub fn sentence_bleu<T: Eq + Hash>(hypothesis: &[T], reference: &[T]) -> f64 {
    corpus_bleu(&[hypothesis], &[reference]).map(|r| r.bleu).unwrap_or(0.0)
}

/// Add-one smoothed sentence BLEU, for diagnostics.
pub fn sentence_bleu_smoothed<T: Eq + Hash>(hypothesis: &[T], reference: &[T]) -> f64 {
    corpus_bleu_with(&[hypothesis], &[reference], MAX_ORDER, true)
        .map(|r| r.bleu)
        .unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_corpus_is_exactly_100() {
        let c = vec![toks("a b c d e"), toks("x y z w v u")];
        let r = corpus_bleu(&c, &c).unwrap();
        assert_eq!(r.bleu, 100.0);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn clipped_unigram_precision() {
        let r = corpus_bleu(&[toks("the the the")], &[toks("the cat")]).unwrap();
        assert_eq!(r.matches[0], 1);
        assert_eq!(r.totals[0], 3);
        assert_eq!(r.precisions[0], 1.0 / 3.0);
    }

    #[test]
    fn no_shared_words_or_short_hypothesis_gives_zero() {
        assert_eq!(sentence_bleu(&toks("a b c d"), &toks("e f g h")), 0.0);
        assert_eq!(sentence_bleu(&toks("a b c"), &toks("a b c")), 0.0);
        assert!(sentence_bleu_smoothed(&toks("a b c"), &toks("a b c")) > 0.0);
    }

    #[test]
    fn brevity_penalty_only_for_short_output() {
        let r = corpus_bleu(&[toks("a b c d")], &[toks("a b c d e f g h")]).unwrap();
        assert!((r.brevity_penalty - (-1.0f64).exp()).abs() < 1e-15);
        let long = corpus_bleu(&[toks("a b c d e f")], &[toks("a b c d e")]).unwrap();
        assert_eq!(long.brevity_penalty, 1.0);
    }

    #[test]
    fn case_sensitive() {
        assert_eq!(sentence_bleu(&toks("The cat sat down"), &toks("the cat sat down")), 0.0);
    }

    #[test]
    fn count_mismatch_and_empty_are_errors() {
        let one = vec![toks("a")];
        let two = vec![toks("a"), toks("b")];
        assert!(corpus_bleu(&one, &two).unwrap_err().to_string().contains('2'));
        assert!(corpus_bleu::<Vec<&str>, Vec<&str>, &str>(&[], &[]).is_err());
    }

    #[test]
    fn hand_computed_partial_match() {
        // p1 = 5/6, p2 = 3/5, p3 = 2/4, p4 = 1/3; same length so BP = 1
        let r = corpus_bleu(&[toks("a b c d x f")], &[toks("a b c d e f")]).unwrap();
        assert_eq!(r.matches, vec![5, 3, 2, 1]);
        let expected = 100.0 * ((5.0 / 6.0) * (3.0 / 5.0) * (2.0 / 4.0) * (1.0 / 3.0f64)).powf(0.25);
        assert!((r.bleu - expected).abs() < 1e-12);
    }
}
