use std::cmp::Ordering;

use crate::data::{TokenId, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::generator::{DecodeState, EncoderOutput, Generator};
use crate::tensor::Tape;

/// A decoded output with its model score and attention trace.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Output tokens, ending in EOS when `finished`.
    pub tokens: Vec<TokenId>,
    /// `log G(tokens | source)`.
    pub score: f64,
    /// Attention weights over source positions, one row per output token.
    pub attention: Vec<Vec<f64>>,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens without the final EOS.
    pub fn body(&self) -> &[TokenId] {
        crate::data::strip_eos(&self.tokens)
    }
}

fn allowed(token: usize) -> bool {
    token != PAD as usize && token != BOS as usize
}

/// One decoder step; returns log-probabilities, attention and the new state.
fn step(
    g: &Generator,
    tape: &mut Tape,
    enc: &EncoderOutput,
    state: &DecodeState,
    prev: TokenId,
) -> Result<(Vec<f64>, Vec<f64>, DecodeState)> {
    let out = g.decode_step(tape, state, prev, enc)?;
    let lp = tape.value(out.log_probs).data().to_vec();
    let att = out
        .state
        .attention
        .map(|a| tape.value(a).data().to_vec())
        .unwrap_or_default();
    Ok((lp, att, out.state))
}

/// Most probable token at every step (lowest id on ties), until EOS or
/// `max_len` tokens.
pub fn greedy_decode(g: &Generator, source: &[TokenId], max_len: usize) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let mut tape = Tape::new();
    let enc = g.encode(&mut tape, source)?;
    let mut state = g.initial_state(&mut tape, &enc)?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        attention: Vec::new(),
        finished: false,
    };
    let mut prev = BOS;
    while hyp.tokens.len() < max_len {
        let (lp, att, next) = step(g, &mut tape, &enc, &state, prev)?;
        let mut best = None::<(usize, f64)>;
        for (t, &l) in lp.iter().enumerate() {
            if allowed(t) && best.map_or(true, |(_, b)| l > b) {
                best = Some((t, l));
            }
        }
        let (tok, l) = best.ok_or(Error::Empty("decodable vocabulary"))?;
        hyp.tokens.push(tok as TokenId);
        hyp.score += l;
        hyp.attention.push(att);
        state = next;
        prev = tok as TokenId;
        if prev == EOS {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// Beam-decodes every source (greedy when `beam_size == 1`), in parallel on
/// the current rayon pool. Output order follows input order.
pub fn decode_all<S: AsRef<[TokenId]> + Sync>(
    g: &Generator,
    sources: &[S],
    beam_size: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    use rayon::prelude::*;
    sources
        .par_iter()
        .map(|s| beam_decode(g, s.as_ref(), beam_size, max_len))
        .collect()
}

struct Live {
    hyp: Hypothesis,
    state: DecodeState,
}

/// Beam search over summed log-probabilities, no length normalization.
///
/// Each step keeps the `beam_size` best extensions of all live prefixes
/// (ties: higher score, then earlier prefix, then lower token id).
/// Extensions ending in EOS move to the finished list. Search stops once
/// the best finished score is at least the best live score, since scores
/// only decrease with length. If `max_len` is reached first, the surviving
/// live prefixes compete with the finished ones on score.
///
/// Pruning can drop the greedy path, so for `beam_size > 1` the greedy
/// output is returned instead whenever it scores strictly higher. The
/// result therefore never scores below `greedy_decode`.
pub fn beam_decode(g: &Generator, source: &[TokenId], beam_size: usize, max_len: usize) -> Result<Hypothesis> {
    if beam_size == 0 {
        return Err(Error::InvalidArgument("beam size must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let mut tape = Tape::new();
    let enc = g.encode(&mut tape, source)?;
    let root = g.initial_state(&mut tape, &enc)?;
    let mut live = vec![Live {
        hyp: Hypothesis {
            tokens: Vec::new(),
            score: 0.0,
            attention: Vec::new(),
            finished: false,
        },
        state: root,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut expanded = Vec::with_capacity(live.len());
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (i, l) in live.iter().enumerate() {
            let prev = l.hyp.tokens.last().copied().unwrap_or(BOS);
            let (lp, att, next) = step(g, &mut tape, &enc, &l.state, prev)?;
            for (t, &v) in lp.iter().enumerate() {
                if allowed(t) {
                    candidates.push((l.hyp.score + v, i, t));
                }
            }
            expanded.push((lp, att, next));
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        candidates.truncate(beam_size);
        let mut next_live = Vec::with_capacity(beam_size);
        for (score, i, t) in candidates {
            let (_, att, next) = &expanded[i];
            let mut hyp = live[i].hyp.clone();
            hyp.tokens.push(t as TokenId);
            hyp.score = score;
            hyp.attention.push(att.clone());
            if t as TokenId == EOS {
                hyp.finished = true;
                finished.push(hyp);
            } else {
                next_live.push(Live { hyp, state: *next });
            }
        }
        live = next_live;
        let best_live = live.first().map(|l| l.hyp.score);
        let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        match best_live {
            None => break,
            Some(b) if best_done >= b => break,
            _ => {}
        }
    }
    let best = finished
        .into_iter()
        .chain(live.into_iter().map(|l| l.hyp))
        .reduce(|best, h| if h.score > best.score { h } else { best })
        .ok_or(Error::Empty("beam"))?;
    if beam_size > 1 {
        let greedy = greedy_decode(g, source, max_len)?;
        if greedy.score > best.score {
            return Ok(greedy);
        }
    }
    Ok(best)
}

/// Replaces every UNK output token with the source token under the
/// attention argmax (first position on ties) of that step.
pub fn unk_replace(
    hypothesis: &[String],
    trace: &[Vec<f64>],
    source: &[String],
    unk: &str,
) -> Result<Vec<String>> {
    hypothesis
        .iter()
        .enumerate()
        .map(|(t, tok)| {
            if tok != unk {
                return Ok(tok.clone());
            }
            let row = trace.get(t).ok_or(Error::MissingTrace {
                trace: trace.len(),
                hyp: hypothesis.len(),
            })?;
            let pos = row
                .iter()
                .enumerate()
                .fold(None::<(usize, f64)>, |best, (i, &a)| match best {
                    Some((_, b)) if a <= b => best,
                    _ => Some((i, a)),
                })
                .map(|(i, _)| i)
                .ok_or(Error::MissingTrace {
                    trace: trace.len(),
                    hyp: hypothesis.len(),
                })?;
            Ok(source.get(pos).cloned().unwrap_or_else(|| unk.to_string()))
        })
        .collect()
}
