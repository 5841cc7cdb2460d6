//! ROUGE-style similarity metrics and weakly supervised proxy labels for the
//! extractive scorers.
//!
//! Proxy labels regress snippet scores against ROUGE similarity between each
//! snippet and the gold summary (vector mode) or each gold summary segment
//! (matrix mode).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::text::{Snippet, EOS, PAD};

/// Which component of a (precision, recall, f1) triple drives the labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreType {
    Precision,
    Recall,
    F1,
}

/// Labeling method: n-gram order, score component, and whether labels are
/// built sequentially by greedy selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    pub sequential: bool,
    pub ngram: usize,
    pub score_type: ScoreType,
    /// In sequential mode, emit 1.0 for selected snippets instead of the
    /// marginal score gain.
    pub sequential_binary: bool,
}

impl Default for LabelConfig {
    /// Non-sequential ROUGE-2 F1, the default labeling method.
    fn default() -> Self {
        LabelConfig {
            sequential: false,
            ngram: 2,
            score_type: ScoreType::F1,
            sequential_binary: false,
        }
    }
}

/// Proxy labels: one value per snippet (vector mode) or per
/// snippet-and-segment pair (matrix mode, segment-major layout).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMatrix {
    pub snippet_count: usize,
    pub segment_count: usize,
    /// `values[j * snippet_count + i]` is the label of snippet `i` for
    /// segment `j`; vector mode has `segment_count == 1`.
    pub values: Vec<f64>,
}

impl LabelMatrix {
    pub fn vector(values: Vec<f64>) -> Self {
        LabelMatrix { snippet_count: values.len(), segment_count: 1, values }
    }

    pub fn get(&self, snippet: usize, segment: usize) -> f64 {
        self.values[segment * self.snippet_count + snippet]
    }
}

/// Precision / recall / F1 triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rouge {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Rouge {
    pub const ZERO: Rouge = Rouge { precision: 0.0, recall: 0.0, f1: 0.0 };

    fn from_counts(overlap: usize, candidate: usize, reference: usize) -> Rouge {
        let precision = if candidate > 0 { overlap as f64 / candidate as f64 } else { 0.0 };
        let recall = if reference > 0 { overlap as f64 / reference as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Rouge { precision, recall, f1 }
    }

    pub fn by(&self, which: ScoreType) -> f64 {
        match which {
            ScoreType::Precision => self.precision,
            ScoreType::Recall => self.recall,
            ScoreType::F1 => self.f1,
        }
    }
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-N with clipped multiset n-gram overlap. Zero denominators yield 0.
pub fn rouge_n(candidate: &[u32], reference: &[u32], n: usize) -> Rouge {
    assert!(n >= 1, "rouge_n requires n >= 1");
    let cand = ngram_counts(candidate, n);
    let refr = ngram_counts(reference, n);
    let cand_total: usize = cand.values().sum();
    let ref_total: usize = refr.values().sum();
    let overlap: usize = cand
        .iter()
        .map(|(g, &c)| c.min(refr.get(g).copied().unwrap_or(0)))
        .sum();
    Rouge::from_counts(overlap, cand_total, ref_total)
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Reference-side positions matched by the leftmost longest common
/// subsequence of `refr` and `cand`. "Leftmost" pins the alignment: ties in
/// the DP table resolve toward earlier reference positions.
fn lcs_ref_positions(refr: &[u32], cand: &[u32]) -> Vec<usize> {
    let (m, n) = (refr.len(), cand.len());
    if m == 0 || n == 0 {
        return Vec::new();
    }
    // table[i][j] = LCS length of refr[i..] and cand[j..]
    let mut table = vec![vec![0usize; n + 1]; m + 1];
    for i in (0..m).rev() {
        for j in (0..n).rev() {
            table[i][j] = if refr[i] == cand[j] {
                table[i + 1][j + 1] + 1
            } else {
                table[i + 1][j].max(table[i][j + 1])
            };
        }
    }
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < m && j < n {
        if refr[i] == cand[j] && table[i][j] == table[i + 1][j + 1] + 1 {
            out.push(i);
            i += 1;
            j += 1;
        } else if table[i + 1][j] >= table[i][j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// Sentence-level ROUGE-L: LCS of the whole sequences.
pub fn rouge_l(candidate: &[u32], reference: &[u32]) -> Rouge {
    let l = lcs_len(candidate, reference);
    Rouge::from_counts(l, candidate.len(), reference.len())
}

/// Summary-level ROUGE-L: for each reference sentence, the union over
/// candidate sentences of LCS-matched reference positions; totals are scored
/// against the full candidate and reference token counts.
pub fn rouge_l_summary(candidate_sents: &[Vec<u32>], reference_sents: &[Vec<u32>]) -> Rouge {
    let cand_total: usize = candidate_sents.iter().map(Vec::len).sum();
    let ref_total: usize = reference_sents.iter().map(Vec::len).sum();
    let mut hits = 0usize;
    for r in reference_sents {
        let mut matched = vec![false; r.len()];
        for c in candidate_sents {
            for p in lcs_ref_positions(r, c) {
                matched[p] = true;
            }
        }
        hits += matched.iter().filter(|&&m| m).count();
    }
    Rouge::from_counts(hits, cand_total, ref_total)
}

fn content_tokens(tokens: &[u32]) -> Vec<u32> {
    tokens.iter().copied().filter(|&t| t != PAD && t != EOS).collect()
}

/// Vector-mode proxy labels for the snippet scorer.
///
/// Non-sequential: each snippet is scored independently against the summary.
/// Sequential: greedy selection; at each round the snippet maximizing the
/// score of the concatenated selection is added, until no snippet improves
/// it. Selected snippets are labeled with their marginal score gain
/// (or 1.0 in binary mode), the rest with 0.
pub fn proxy_labels(snippets: &[Snippet], summary: &[u32], cfg: &LabelConfig) -> LabelMatrix {
    assert!(!snippets.is_empty(), "proxy_labels requires at least one snippet");
    let summary = content_tokens(summary);
    if !cfg.sequential {
        let values = snippets
            .iter()
            .map(|s| rouge_n(&s.tokens, &summary, cfg.ngram).by(cfg.score_type))
            .collect();
        return LabelMatrix::vector(values);
    }

    let n = snippets.len();
    let mut labels = vec![0.0f64; n];
    let mut picked = vec![false; n];
    let mut selection: Vec<u32> = Vec::new();
    let mut current = 0.0f64;
    loop {
        let mut best: Option<(usize, f64)> = None;
        for (i, snip) in snippets.iter().enumerate() {
            if picked[i] {
                continue;
            }
            let mut cat = selection.clone();
            cat.extend_from_slice(&snip.tokens);
            let score = rouge_n(&cat, &summary, cfg.ngram).by(cfg.score_type);
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((i, score));
            }
        }
        match best {
            Some((i, score)) if score > current => {
                labels[i] = if cfg.sequential_binary { 1.0 } else { (score - current).max(0.0) };
                picked[i] = true;
                selection.extend_from_slice(&snippets[i].tokens);
                current = score;
            }
            _ => break,
        }
    }
    LabelMatrix::vector(labels)
}

/// Matrix-mode proxy labels for the segment-wise scorer: the target is split
/// into `segment_count` consecutive windows of `segment_len` tokens and each
/// snippet is scored against each window. Windows past the end of the target
/// get all-zero labels.
pub fn segment_labels(
    snippets: &[Snippet],
    target_body: &[u32],
    segment_len: usize,
    segment_count: usize,
    cfg: &LabelConfig,
) -> LabelMatrix {
    assert!(segment_len >= 1, "segment_labels requires segment_len >= 1");
    assert!(!snippets.is_empty(), "segment_labels requires at least one snippet");
    let n = snippets.len();
    let mut values = vec![0.0f64; n * segment_count];
    for j in 0..segment_count {
        let start = j * segment_len;
        if start >= target_body.len() {
            continue;
        }
        let end = (start + segment_len).min(target_body.len());
        let segment = content_tokens(&target_body[start..end]);
        if segment.is_empty() {
            continue;
        }
        for (i, snip) in snippets.iter().enumerate() {
            values[j * n + i] = rouge_n(&snip.tokens, &segment, cfg.ngram).by(cfg.score_type);
        }
    }
    LabelMatrix { snippet_count: n, segment_count, values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn snip(tokens: &[u32]) -> Snippet {
        Snippet { tokens: tokens.to_vec(), doc_id: 0, snippet_index: 0 }
    }

    #[test]
    fn identical_sequences_score_one() {
        let r = rouge_n(&[4, 5, 6], &[4, 5, 6], 2);
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let l = rouge_l(&[4, 5, 6], &[4, 5, 6]);
        assert_eq!((l.precision, l.recall, l.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn unigram_half_overlap() {
        // candidate "a b" vs reference "a c"
        let r = rouge_n(&[10, 11], &[10, 12], 1);
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn reference_shorter_than_n_scores_zero() {
        let r = rouge_n(&[4, 5, 6], &[4], 2);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn sentence_rouge_l_hand_case() {
        // candidate "a c" vs reference "a b c": LCS 2.
        let r = rouge_l(&[10, 12], &[10, 11, 12]);
        assert!((r.precision - 1.0).abs() < 1e-12);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn disjoint_alphabets_score_zero() {
        let r = rouge_l(&[1, 2, 3], &[7, 8, 9]);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn summary_rouge_l_unions_across_candidate_sentences() {
        // Reference sentence "w1 w2 w3 w4"; candidates cover w1 w2 and w3 w4
        // in separate sentences.
        let r = rouge_l_summary(
            &[vec![21, 22], vec![23, 24]],
            &[vec![21, 22, 23, 24]],
        );
        assert!((r.recall - 1.0).abs() < 1e-12);
        assert!((r.precision - 1.0).abs() < 1e-12);
    }

    #[test]
    fn snippet_equal_to_summary_gets_label_one() {
        let labels = proxy_labels(&[snip(&[5, 6, 7])], &[5, 6, 7], &LabelConfig::default());
        assert_eq!(labels.values, vec![1.0]);
    }

    #[test]
    fn disjoint_half_coverage_recall_labels() {
        // Summary bigrams: (5 6), (6 7), (7 8), (8 9) -- snippet one covers
        // the first two, snippet two the last two... they must not overlap,
        // so use two snippets each holding half the bigrams.
        let cfg = LabelConfig { score_type: ScoreType::Recall, ..LabelConfig::default() };
        let labels = proxy_labels(&[snip(&[5, 6, 7]), snip(&[7, 8, 9])], &[5, 6, 7, 8, 9], &cfg);
        assert_eq!(labels.values, vec![0.5, 0.5]);
    }

    #[test]
    fn sequential_duplicate_snippet_gets_zero() {
        let cfg = LabelConfig { sequential: true, ..LabelConfig::default() };
        let labels = proxy_labels(&[snip(&[5, 6, 7]), snip(&[5, 6, 7])], &[5, 6, 7], &cfg);
        assert_eq!(labels.values[0], 1.0);
        assert_eq!(labels.values[1], 0.0);
    }

    #[test]
    fn sequential_marginal_gains_sum_to_final_score() {
        let cfg = LabelConfig {
            sequential: true,
            ngram: 1,
            score_type: ScoreType::Recall,
            sequential_binary: false,
        };
        let snips = [snip(&[5, 6]), snip(&[7, 8]), snip(&[9, 9])];
        let labels = proxy_labels(&snips, &[5, 6, 7, 8], &cfg);
        let total: f64 = labels.values.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(labels.values[2], 0.0);
    }

    #[test]
    fn segment_labels_split_and_zero_pad() {
        let cfg = LabelConfig::default();
        let snips = [snip(&[5, 6, 7, 8]), snip(&[9, 10, 11, 12])];
        // Body: two real segments then nothing for the third.
        let body = [5, 6, 7, 8, 9, 10, 11, 12];
        let m = segment_labels(&snips, &body, 4, 3, &cfg);
        assert_eq!(m.segment_count, 3);
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(1, 1), 1.0);
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.get(0, 2), 0.0);
        assert_eq!(m.get(1, 2), 0.0);
    }

    #[test]
    fn segment_label_matrix_matches_pairwise_oracle() {
        let cfg = LabelConfig::default();
        let snips = [snip(&[5, 6, 7]), snip(&[6, 7, 8]), snip(&[8, 9, 5])];
        let body = [5, 6, 7, 8, 9, 5, 6, 9];
        let m = segment_labels(&snips, &body, 4, 2, &cfg);
        for j in 0..2 {
            let seg = &body[j * 4..(j + 1) * 4];
            for (i, s) in snips.iter().enumerate() {
                assert_eq!(m.get(i, j), rouge_n(&s.tokens, seg, 2).f1);
            }
        }
    }

    proptest! {
        #[test]
        fn f1_is_the_harmonic_mean(
            cand in prop::collection::vec(4u32..9, 0..12),
            refr in prop::collection::vec(4u32..9, 0..12),
            n in 1usize..3,
        ) {
            let r = rouge_n(&cand, &refr, n);
            prop_assert!((r.f1 * (r.precision + r.recall) - 2.0 * r.precision * r.recall).abs() < 1e-12);
            prop_assert!(r.precision >= 0.0 && r.precision <= 1.0);
            prop_assert!(r.recall >= 0.0 && r.recall <= 1.0);
            if r.precision == 0.0 || r.recall == 0.0 {
                prop_assert_eq!(r.f1, 0.0);
            }
        }

        #[test]
        fn swapping_sides_swaps_precision_and_recall(
            cand in prop::collection::vec(4u32..9, 0..12),
            refr in prop::collection::vec(4u32..9, 0..12),
        ) {
            let a = rouge_n(&cand, &refr, 2);
            let b = rouge_n(&refr, &cand, 2);
            prop_assert_eq!(a.precision, b.recall);
            prop_assert_eq!(a.recall, b.precision);
            prop_assert!((a.f1 - b.f1).abs() < 1e-12);
        }

        #[test]
        fn non_sequential_labels_are_permutation_equivariant(
            seed in 0u64..1000,
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let snips: Vec<Snippet> = (0..5)
                .map(|i| snip(&[4 + i, 5 + i, 6 + i]))
                .collect();
            let summary = [4u32, 5, 6, 7, 8];
            let base = proxy_labels(&snips, &summary, &LabelConfig::default());
            let mut order: Vec<usize> = (0..5).collect();
            order.shuffle(&mut rng);
            let shuffled: Vec<Snippet> = order.iter().map(|&i| snips[i].clone()).collect();
            let perm = proxy_labels(&shuffled, &summary, &LabelConfig::default());
            for (pos, &orig) in order.iter().enumerate() {
                prop_assert_eq!(perm.values[pos], base.values[orig]);
            }
        }
    }
}
