use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{TokenId, BOS, EOS, NUM_RESERVED, PAD, UNK};
use crate::error::{Error, Result};

const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Token/id tables. Ids `0..4` are PAD, UNK, BOS and EOS; regular tokens
/// follow in frequency order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Vocabulary over the given regular tokens, in id order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocabulary { tokens: all, index })
    }

    /// Vocabulary for synthetic tasks: symbols `w0 .. w{n-1}`.
    pub fn synthetic(alphabet: usize) -> Self {
        Self::from_tokens((0..alphabet).map(|i| format!("w{i}"))).expect("distinct names")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, sentence: &[S]) -> Vec<TokenId> {
        sentence.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Maps ids back to strings; out-of-range ids decode as the UNK string.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK as usize]).to_string())
            .collect()
    }

    /// Decodes a model output: stops at the first EOS and drops PAD/BOS.
    pub fn decode_output(&self, ids: &[TokenId]) -> Vec<String> {
        let body: Vec<TokenId> = ids
            .iter()
            .copied()
            .take_while(|&t| t != EOS)
            .filter(|&t| t != PAD && t != BOS)
            .collect();
        self.decode(&body)
    }

    /// Regular (non-reserved) tokens in id order.
    pub fn regular_tokens(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    /// One token per line; line `k` holds the token with id `k + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.regular_tokens().join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string))
    }
}

/// Keeps the `size_limit` most frequent tokens of `corpus` (ties broken
/// lexicographically); everything else encodes to UNK.
pub fn build_vocab<I, S>(corpus: I, size_limit: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut seen = false;
    for tok in corpus {
        seen = true;
        let tok = tok.as_ref();
        if RESERVED.contains(&tok) {
            continue;
        }
        *counts.entry(tok.to_string()).or_default() += 1;
    }
    if !seen {
        return Err(Error::Empty("corpus"));
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(size_limit);
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t))
}
