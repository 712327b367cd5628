use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{SentencePair, TokenId, NUM_RESERVED};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticTask {
    /// Target equals source.
    Copy,
    /// Target is the source reversed.
    Reverse,
    /// Every symbol advanced by one, wrapping around the alphabet.
    Shift,
}

impl SyntheticTask {
    pub fn apply(self, source: &[TokenId], alphabet: usize) -> Vec<TokenId> {
        match self {
            SyntheticTask::Copy => source.to_vec(),
            SyntheticTask::Reverse => source.iter().rev().copied().collect(),
            SyntheticTask::Shift => source
                .iter()
                .map(|&t| {
                    let k = (t as usize - NUM_RESERVED + 1) % alphabet;
                    (k + NUM_RESERVED) as TokenId
                })
                .collect(),
        }
    }
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticTask::Copy => "copy",
            SyntheticTask::Reverse => "reverse",
            SyntheticTask::Shift => "shift",
        })
    }
}

impl FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(SyntheticTask::Copy),
            "reverse" => Ok(SyntheticTask::Reverse),
            "shift" => Ok(SyntheticTask::Shift),
            other => Err(Error::Config(format!("unknown synthetic task `{other}`"))),
        }
    }
}

/// `n` random pairs over an alphabet of `alphabet` symbols (ids
/// `4 .. 4 + alphabet`), source lengths uniform in `min_len..=max_len`.
pub fn gen_synthetic(
    task: SyntheticTask,
    n: usize,
    alphabet: usize,
    (min_len, max_len): (usize, usize),
    seed: u64,
) -> Result<Vec<SentencePair>> {
    if alphabet < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic alphabet needs at least 2 symbols, got {alphabet}"
        )));
    }
    if min_len == 0 || min_len > max_len {
        return Err(Error::InvalidRange {
            min: min_len,
            max: max_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let len = rng.gen_range(min_len..=max_len);
            let source: Vec<TokenId> = (0..len)
                .map(|_| (NUM_RESERVED + rng.gen_range(0..alphabet)) as TokenId)
                .collect();
            let target = task.apply(&source, alphabet);
            SentencePair { source, target }
        })
        .collect())
}
