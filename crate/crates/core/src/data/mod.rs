//! Vocabularies, corpora, synthetic transduction tasks and padded batches.

mod batch;
mod corpus;
mod synthetic;
mod vocab;

pub use batch::{make_batches, Batch};
pub use corpus::{read_bitext, read_lines, tokenize, write_lines};
pub use synthetic::{gen_synthetic, SyntheticTask};
pub use vocab::{build_vocab, Vocabulary};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const NUM_RESERVED: usize = 4;

/// Default upper bound on sentence length.
pub const DEFAULT_MAX_LEN: usize = 50;

/// Aligned source/target sentences, without BOS/EOS delimiters.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SentencePair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl SentencePair {
    pub fn new(source: Vec<TokenId>, target: Vec<TokenId>) -> Self {
        SentencePair { source, target }
    }

    /// Checks `1 <= len <= max_len` on both sides and that every id is
    /// below the respective vocabulary size.
    pub fn validate(&self, max_len: usize, src_vocab: usize, tgt_vocab: usize) -> Result<()> {
        for (seq, vocab) in [(&self.source, src_vocab), (&self.target, tgt_vocab)] {
            if seq.is_empty() || seq.len() > max_len {
                return Err(Error::InvalidArgument(format!(
                    "sentence length {} outside 1..={max_len}",
                    seq.len()
                )));
            }
            check_ids(seq, vocab)?;
        }
        Ok(())
    }

    /// Target followed by EOS, the form scored by the generator.
    pub fn target_with_eos(&self) -> Vec<TokenId> {
        with_eos(&self.target)
    }
}

pub fn with_eos(tokens: &[TokenId]) -> Vec<TokenId> {
    let mut out = tokens.to_vec();
    out.push(EOS);
    out
}

/// Drops a trailing EOS (and anything after the first EOS).
pub fn strip_eos(tokens: &[TokenId]) -> &[TokenId] {
    match tokens.iter().position(|&t| t == EOS) {
        Some(i) => &tokens[..i],
        None => tokens,
    }
}

/// Target side shown to the adversary for a model output: the tokens
/// before EOS, or a lone EOS when the output is empty.
pub fn adversary_input(tokens: &[TokenId]) -> Vec<TokenId> {
    let body = strip_eos(tokens);
    if body.is_empty() {
        vec![EOS]
    } else {
        body.to_vec()
    }
}

pub fn check_ids(tokens: &[TokenId], vocab_size: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= vocab_size) {
        Some(&id) => Err(Error::TokenOutOfRange {
            id,
            size: vocab_size,
        }),
        None => Ok(()),
    }
}
