use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{SentencePair, TokenId, EOS, PAD};
use crate::error::{Error, Result};

/// Padded mini-batch. Targets carry a trailing EOS; masks are `true`
/// exactly on real tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub source: Vec<Vec<TokenId>>,
    pub target: Vec<Vec<TokenId>>,
    pub source_mask: Vec<Vec<bool>>,
    pub target_mask: Vec<Vec<bool>>,
}

fn pad_rows(rows: Vec<Vec<TokenId>>) -> (Vec<Vec<TokenId>>, Vec<Vec<bool>>) {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    rows.into_iter()
        .map(|mut r| {
            let mut mask = vec![true; r.len()];
            mask.resize(width, false);
            r.resize(width, PAD);
            (r, mask)
        })
        .unzip()
}

fn unpadded<'a>(row: &'a [TokenId], mask: &[bool]) -> &'a [TokenId] {
    &row[..mask.iter().filter(|&&m| m).count()]
}

impl Batch {
    pub fn from_pairs(pairs: &[SentencePair]) -> Self {
        let (source, source_mask) = pad_rows(pairs.iter().map(|p| p.source.clone()).collect());
        let (target, target_mask) = pad_rows(pairs.iter().map(|p| p.target_with_eos()).collect());
        Batch {
            source,
            target,
            source_mask,
            target_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Real source tokens of row `i`.
    pub fn source_row(&self, i: usize) -> &[TokenId] {
        unpadded(&self.source[i], &self.source_mask[i])
    }

    /// Real target tokens of row `i`, including the final EOS.
    pub fn target_row(&self, i: usize) -> &[TokenId] {
        unpadded(&self.target[i], &self.target_mask[i])
    }

    /// Row `i` as a pair without delimiters.
    pub fn pair(&self, i: usize) -> SentencePair {
        let tgt = self.target_row(i);
        let body = match tgt.last() {
            Some(&EOS) => &tgt[..tgt.len() - 1],
            _ => tgt,
        };
        SentencePair::new(self.source_row(i).to_vec(), body.to_vec())
    }

    pub fn pairs(&self) -> Vec<SentencePair> {
        (0..self.len()).map(|i| self.pair(i)).collect()
    }

    pub fn target_tokens(&self) -> usize {
        self.target_mask.iter().flatten().filter(|&&m| m).count()
    }
}

/// Splits `pairs` into batches of at most `batch_size`, after an optional
/// seeded shuffle. Every pair lands in exactly one batch.
pub fn make_batches(
    pairs: &[SentencePair],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if pairs.is_empty() {
        return Err(Error::Empty("sentence pair list"));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order
        .chunks(batch_size)
        .map(|idx| {
            let chunk: Vec<SentencePair> = idx.iter().map(|&i| pairs[i].clone()).collect();
            Batch::from_pairs(&chunk)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticTask};

    #[test]
    fn sizes_follow_batch_size() {
        let pairs = gen_synthetic(SyntheticTask::Copy, 10, 5, (1, 4), 0).unwrap();
        let batches = make_batches(&pairs, 4, Some(3)).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Batch::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn equal_lengths_give_full_masks() {
        let pairs = gen_synthetic(SyntheticTask::Copy, 6, 5, (3, 3), 0).unwrap();
        let b = &make_batches(&pairs, 6, None).unwrap()[0];
        assert!(b.source_mask.iter().flatten().all(|&m| m));
        assert!(b.target_mask.iter().flatten().all(|&m| m));
    }

    #[test]
    fn padding_and_masks_agree_with_lengths() {
        let pairs = vec![
            SentencePair::new(vec![4, 5], vec![6]),
            SentencePair::new(vec![4, 5, 6, 7], vec![6, 7, 8]),
        ];
        let b = Batch::from_pairs(&pairs);
        assert_eq!(b.source[0], vec![4, 5, PAD, PAD]);
        assert_eq!(b.source_mask[0], vec![true, true, false, false]);
        assert_eq!(b.target[0], vec![6, EOS, PAD, PAD]);
        assert_eq!(b.target[1], vec![6, 7, 8, EOS]);
        assert_eq!(b.target_row(0), &[6, EOS]);
        assert_eq!(b.pairs(), pairs);
        assert_eq!(b.target_tokens(), 6);
    }

    #[test]
    fn batches_partition_the_corpus() {
        let pairs = gen_synthetic(SyntheticTask::Reverse, 23, 6, (1, 5), 1).unwrap();
        let batches = make_batches(&pairs, 5, Some(9)).unwrap();
        let mut seen: Vec<SentencePair> = batches.iter().flat_map(Batch::pairs).collect();
        let mut expected = pairs.clone();
        seen.sort_by(|a, b| a.source.cmp(&b.source).then(a.target.cmp(&b.target)));
        expected.sort_by(|a, b| a.source.cmp(&b.source).then(a.target.cmp(&b.target)));
        assert_eq!(seen, expected);
        // same seed, same order
        assert_eq!(batches, make_batches(&pairs, 5, Some(9)).unwrap());
    }

    #[test]
    fn rejects_empty_and_zero_size() {
        assert!(make_batches(&[], 4, None).is_err());
        let pairs = vec![SentencePair::new(vec![4], vec![4])];
        assert!(make_batches(&pairs, 0, None).is_err());
    }
}
