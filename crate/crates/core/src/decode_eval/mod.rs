//! Decoding (greedy, beam), UNK replacement, BLEU and per-sentence
//! diagnostics.

mod bleu;
mod decode;
mod report;

pub use bleu::{corpus_bleu, corpus_bleu_with, sentence_bleu, sentence_bleu_smoothed, BleuReport, MAX_ORDER};
pub use decode::{beam_decode, decode_all, greedy_decode, unk_replace, Hypothesis};
pub use report::{case_report, write_case_report, CaseRow};
