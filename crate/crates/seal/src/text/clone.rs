//! Near-clone detection between a source document and a sectioned reference
//! article: maximum per-section recall of unique n-grams.

use std::collections::HashSet;
use std::hash::Hash;

/// n-gram order used by the near-clone rule.
pub const NEAR_CLONE_NGRAM: usize = 6;
/// A document is a near-clone when its score strictly exceeds this.
pub const NEAR_CLONE_THRESHOLD: f64 = 0.2;

fn ngram_set<T: Eq + Hash>(tokens: &[T], n: usize) -> HashSet<&[T]> {
    if tokens.len() < n {
        return HashSet::new();
    }
    tokens.windows(n).collect()
}

/// Maximum over article sections of `|ngrams(doc) ∩ ngrams(section)| /
/// |ngrams(section)|`, with unique n-gram (set) semantics. Sections shorter
/// than `n` are skipped; if every section is skipped the score is 0.
pub fn clone_score<T: Eq + Hash>(doc: &[T], sections: &[Vec<T>], n: usize) -> f64 {
    assert!(n >= 1, "clone_score requires n >= 1");
    let doc_grams = ngram_set(doc, n);
    let mut best = 0.0f64;
    for section in sections {
        let sec_grams = ngram_set(section, n);
        if sec_grams.is_empty() {
            continue;
        }
        let overlap = sec_grams.iter().filter(|g| doc_grams.contains(*g)).count();
        best = best.max(overlap as f64 / sec_grams.len() as f64);
    }
    best
}

/// Near-clone rule: 6-gram score strictly above 0.2.
pub fn is_near_clone<T: Eq + Hash>(doc: &[T], sections: &[Vec<T>]) -> bool {
    clone_score(doc, sections, NEAR_CLONE_NGRAM) > NEAR_CLONE_THRESHOLD
}

/// Article sections as blank-line separated blocks.
pub fn split_sections(text: &str) -> Vec<String> {
    text.split("\n\n")
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_section_scores_one() {
        let sec = vec![toks("a b c d e f g h")];
        assert_eq!(clone_score(&toks("a b c d e f g h"), &sec, 6), 1.0);
    }

    #[test]
    fn disjoint_sections_score_zero() {
        let sec = vec![toks("a b c d e f g")];
        assert_eq!(clone_score(&toks("x y z w v u t s"), &sec, 6), 0.0);
    }

    #[test]
    fn half_overlap_of_six_grams() {
        // Section has two 6-grams: abcdef and bcdefg. The doc contains only
        // the first.
        let sec = vec![toks("a b c d e f g")];
        assert_eq!(clone_score(&toks("a b c d e f"), &sec, 6), 0.5);
    }

    #[test]
    fn threshold_is_strict() {
        // Score exactly 0.2: section with five 6-grams, doc matching one.
        let sec = vec![toks("a b c d e f g h i j")];
        let doc = toks("a b c d e f");
        assert_eq!(clone_score(&doc, &sec, 6), 0.2);
        assert!(!is_near_clone(&doc, &sec));
        // One more matched 6-gram pushes it over.
        let doc2 = toks("a b c d e f g");
        assert!(clone_score(&doc2, &sec, 6) > 0.2);
        assert!(is_near_clone(&doc2, &sec));
    }

    #[test]
    fn short_sections_are_skipped() {
        let sec = vec![toks("a b"), toks("c")];
        assert_eq!(clone_score(&toks("a b c d e f"), &sec, 6), 0.0);
    }

    #[test]
    fn sections_split_on_blank_lines() {
        let s = split_sections("first block line one\nline two\n\nsecond block\n\n\nthird");
        assert_eq!(s.len(), 3);
        assert!(s[0].contains("line two"));
    }

    #[test]
    fn appending_reference_sentences_never_lowers_score() {
        let sec = vec![toks("p q r s t u v w")];
        let mut doc: Vec<&str> = toks("p q r s t u");
        let base = clone_score(&doc, &sec, 6);
        doc.extend(toks("v w"));
        assert!(clone_score(&doc, &sec, 6) >= base);
    }
}
