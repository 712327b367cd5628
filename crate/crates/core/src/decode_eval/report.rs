use std::io::Write;

use super::{beam_decode, sentence_bleu};
use crate::adversary::Adversary;
use crate::data::{adversary_input, SentencePair, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::generator::Generator;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseRow {
    pub source: Vec<TokenId>,
    pub reference: Vec<TokenId>,
    /// Beam output without EOS.
    pub hypothesis: Vec<TokenId>,
    /// Eval-mode `D(x, y')`.
    pub d_score: f64,
    /// Unsmoothed sentence BLEU of the hypothesis.
    pub bleu: f64,
}

/// Beam-decodes every pair and scores the output with the adversary and
/// sentence BLEU. One row per input pair, in input order.
pub fn case_report(
    g: &Generator,
    d: &Adversary,
    pairs: &[SentencePair],
    beam_size: usize,
    max_len: usize,
) -> Result<Vec<CaseRow>> {
    pairs
        .iter()
        .map(|p| {
            let hyp = beam_decode(g, &p.source, beam_size, max_len)?;
            let body = hyp.body().to_vec();
            let d_score = d.score(&p.source, &adversary_input(&hyp.tokens))?;
            Ok(CaseRow {
                source: p.source.clone(),
                reference: p.target.clone(),
                bleu: sentence_bleu(&body, &p.target),
                hypothesis: body,
                d_score,
            })
        })
        .collect()
}

/// Tab-separated table with a header row.
pub fn write_case_report<W: Write>(
    out: &mut W,
    rows: &[CaseRow],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<()> {
    let io = |e: std::io::Error| Error::io("case report", e);
    writeln!(out, "source\treference\thypothesis\tD\tBLEU").map_err(io)?;
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{:.4}\t{:.2}",
            src_vocab.decode(&r.source).join(" "),
            tgt_vocab.decode(&r.reference).join(" "),
            tgt_vocab.decode(&r.hypothesis).join(" "),
            r.d_score,
            r.bleu
        )
        .map_err(io)?;
    }
    Ok(())
}
