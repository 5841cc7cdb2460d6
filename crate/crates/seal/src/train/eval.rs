//! Corpus-level ROUGE evaluation of decoded summaries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::labels::{rouge_l, rouge_l_summary, rouge_n};
use crate::model::{Model, ModelError, ModelKind};
use crate::text::{SnippetizedExample, Vocab};

use super::decode::{greedy_decode, greedy_decode_segmentwise};

/// Corpus means of the F1 metrics, in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rouge1_f: f64,
    pub rouge2_f: f64,
    pub rouge_l_sentence_f: f64,
    pub rouge_l_summary_f: f64,
    pub examples: usize,
}

impl EvalReport {
    /// Conventional x100 rendering.
    pub fn pretty(&self) -> String {
        format!(
            "R1 {:.2}  R2 {:.2}  RL-sent {:.2}  RL-summ {:.2}  ({} examples)",
            self.rouge1_f * 100.0,
            self.rouge2_f * 100.0,
            self.rouge_l_sentence_f * 100.0,
            self.rouge_l_summary_f * 100.0,
            self.examples
        )
    }
}

/// Splits a token stream into sentences after tokens whose surface form ends
/// with a sentence terminator.
pub fn split_token_sentences(tokens: &[u32], vocab: &Vocab) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = Vec::new();
    let mut cur: Vec<u32> = Vec::new();
    for &t in tokens {
        cur.push(t);
        let s = vocab.token(t);
        if s.ends_with('.') || s.ends_with('!') || s.ends_with('?') {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// All four metrics for one candidate/reference pair.
pub fn score_pair(candidate: &[u32], reference: &[u32], vocab: &Vocab) -> (f64, f64, f64, f64) {
    let r1 = rouge_n(candidate, reference, 1).f1;
    let r2 = rouge_n(candidate, reference, 2).f1;
    let rl = rouge_l(candidate, reference).f1;
    let rls = rouge_l_summary(
        &split_token_sentences(candidate, vocab),
        &split_token_sentences(reference, vocab),
    )
    .f1;
    (r1, r2, rl, rls)
}

/// Decodes every example greedily and averages ROUGE F1 scores against the
/// reference summaries. Decoding runs in parallel over read-only weights.
pub fn evaluate(
    model: &Model,
    data: &[SnippetizedExample],
    vocab: &Vocab,
) -> Result<EvalReport, ModelError> {
    let max_len = model.cfg().max_decode_len;
    let scores: Result<Vec<(f64, f64, f64, f64)>, ModelError> = data
        .par_iter()
        .map(|ex| {
            let decoded = match model.cfg().kind {
                ModelKind::Seal => greedy_decode_segmentwise(model, ex, max_len)?.0,
                _ => greedy_decode(model, ex, max_len)?,
            };
            Ok(score_pair(&decoded, ex.summary_tokens(), vocab))
        })
        .collect();
    let scores = scores?;
    let n = scores.len().max(1) as f64;
    let mut sums = (0.0, 0.0, 0.0, 0.0);
    for (a, b, c, d) in &scores {
        sums.0 += a;
        sums.1 += b;
        sums.2 += c;
        sums.3 += d;
    }
    Ok(EvalReport {
        rouge1_f: sums.0 / n,
        rouge2_f: sums.1 / n,
        rouge_l_sentence_f: sums.2 / n,
        rouge_l_summary_f: sums.3 / n,
        examples: scores.len(),
    })
}
