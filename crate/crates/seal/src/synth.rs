//! Seeded synthetic corpora for desk-scale experiments and smoke tests.
//!
//! Three tasks:
//! - `scatter`: a few salient "fact" sentences scattered uniformly through
//!   long filler documents; the summary is the facts in order. Performance
//!   depends directly on how much of the input a model can see or select.
//! - `chained_segments`: the summary is a chain of topic blocks, each copied
//!   from one input snippet, and each block names the next block's topic.
//!   Solving it requires re-selecting a different snippet per decode
//!   segment.
//! - `overfit`: four fixed examples for memorization sanity checks.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// One raw example: input documents plus a reference summary.
#[derive(Debug, Clone, PartialEq)]
pub struct RawExample {
    pub documents: Vec<String>,
    pub summary: String,
}

/// Writes raw examples in the corpus JSON-lines format.
pub fn write_jsonl(examples: &[RawExample], path: &Path) -> std::io::Result<()> {
    let mut out = fs::File::create(path)?;
    for ex in examples {
        let line = serde_json::json!({
            "documents": ex.documents,
            "summary": ex.summary,
        });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

const FACT_WORDS: [&str; 12] = [
    "amber", "basalt", "cobalt", "dune", "ember", "fjord", "garnet", "harbor", "indigo", "jade",
    "krill", "lagoon",
];

const FILLER_WORDS: [&str; 20] = [
    "the", "a", "of", "on", "with", "from", "into", "over", "under", "near", "plain", "grey",
    "dull", "flat", "still", "quiet", "slow", "thin", "wide", "long",
];

fn fact_sentence(rng: &mut ChaCha20Rng) -> String {
    let mut words: Vec<&str> = (0..3).map(|_| FACT_WORDS[rng.gen_range(0..FACT_WORDS.len())]).collect();
    words.push(".");
    words.join(" ")
}

fn filler_sentence(rng: &mut ChaCha20Rng) -> String {
    let mut words: Vec<&str> =
        (0..3).map(|_| FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())]).collect();
    words.push(".");
    words.join(" ")
}

/// Salient-fact scatter task. Each example is one long document of
/// `sentences` four-token sentences; `facts` of them are salient and appear
/// in the summary in document order, at positions spread uniformly through
/// the document.
pub fn scatter_corpus(n: usize, sentences: usize, facts: usize, seed: u64) -> Vec<RawExample> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut body: Vec<String> = (0..sentences).map(|_| filler_sentence(&mut rng)).collect();
            // One fact per stratum keeps the salient content uniformly
            // scattered rather than clustered.
            let stratum = sentences / facts;
            let mut fact_sents = Vec::with_capacity(facts);
            for k in 0..facts {
                let pos = k * stratum + rng.gen_range(0..stratum);
                let f = fact_sentence(&mut rng);
                body[pos] = f.clone();
                fact_sents.push(f);
            }
            RawExample { documents: vec![body.join(" ")], summary: fact_sents.join(" ") }
        })
        .collect()
}

const TOPIC_NAMES: [&str; 8] =
    ["talpha", "tbeta", "tgamma", "tdelta", "teps", "tzeta", "teta", "ttheta"];

fn topic_word(topic: usize, j: usize) -> String {
    format!("{}w{}", TOPIC_NAMES[topic], j)
}

/// Chained-topic task for segment-wise selection. Each example has
/// `segments` snippets, one per topic in a random chain; the summary's j-th
/// 8-token block copies the opening sentence of the j-th chained snippet.
/// Every block ends with `next <topic>` naming its successor, and the first
/// block's snippet opens with a `lead` marker.
pub fn chained_segments_corpus(n: usize, segments: usize, seed: u64) -> Vec<RawExample> {
    assert!(segments <= TOPIC_NAMES.len());
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut topics: Vec<usize> = (0..TOPIC_NAMES.len()).collect();
            topics.shuffle(&mut rng);
            let chain: Vec<usize> = topics[..segments].to_vec();

            // Opening sentence of chain position k: 8 tokens.
            let opening = |k: usize| -> String {
                let t = chain[k];
                let next = if k + 1 < segments { TOPIC_NAMES[chain[k + 1]] } else { "stop" };
                let lead = if k == 0 { "lead".to_string() } else { topic_word(t, 5) };
                format!(
                    "{} {} {} {} {} {} next {}",
                    lead,
                    TOPIC_NAMES[t],
                    topic_word(t, 0),
                    topic_word(t, 1),
                    topic_word(t, 2),
                    topic_word(t, 3),
                    next
                )
            };
            // Second sentence fills the snippet with more topic mass.
            let filler = |k: usize| -> String {
                let t = chain[k];
                format!(
                    "{} {} {} {} {} {} {} .",
                    topic_word(t, 0),
                    topic_word(t, 2),
                    topic_word(t, 4),
                    topic_word(t, 1),
                    topic_word(t, 3),
                    topic_word(t, 5),
                    TOPIC_NAMES[t]
                )
            };

            // Input presents the snippets in shuffled order so position
            // carries no signal.
            let mut order: Vec<usize> = (0..segments).collect();
            order.shuffle(&mut rng);
            let doc = order
                .iter()
                .map(|&k| format!("{} {}", opening(k), filler(k)))
                .collect::<Vec<_>>()
                .join(" ");
            let summary = (0..segments).map(opening).collect::<Vec<_>>().join(" ");
            RawExample { documents: vec![doc], summary }
        })
        .collect()
}

/// Four fixed short examples for overfit sanity checks.
pub fn overfit_corpus() -> Vec<RawExample> {
    let fixed = [
        ("amber cobalt dune. ember fjord garnet.", "amber dune fjord."),
        ("basalt ember indigo. jade krill lagoon.", "basalt indigo jade."),
        ("cobalt garnet krill. amber basalt dune.", "krill cobalt amber."),
        ("dune harbor jade. ember indigo lagoon.", "harbor lagoon ember."),
    ];
    fixed
        .iter()
        .map(|(doc, summary)| RawExample {
            documents: vec![doc.to_string()],
            summary: summary.to_string(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_is_deterministic_and_scattered() {
        let a = scatter_corpus(4, 48, 3, 9);
        let b = scatter_corpus(4, 48, 3, 9);
        assert_eq!(a, b);
        for ex in &a {
            // Every summary sentence appears verbatim in the document.
            for sent in ex.summary.split(". ") {
                let sent = sent.trim_end_matches(" .");
                assert!(ex.documents[0].contains(sent), "{sent} missing");
            }
        }
    }

    #[test]
    fn chained_corpus_blocks_are_eight_tokens() {
        let corpus = chained_segments_corpus(3, 4, 11);
        for ex in &corpus {
            let words: Vec<&str> = ex.summary.split_whitespace().collect();
            assert_eq!(words.len(), 4 * 8);
            assert_eq!(words[0], "lead");
            for k in 0..4 {
                assert_eq!(words[k * 8 + 6], "next");
            }
        }
    }

    #[test]
    fn overfit_corpus_is_fixed() {
        assert_eq!(overfit_corpus().len(), 4);
        assert_eq!(overfit_corpus(), overfit_corpus());
    }
}
