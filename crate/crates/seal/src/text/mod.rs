//! Corpus ingestion: sentence splitting, tokenization, snippet packing, and
//! the near-clone filter.
//!
//! Inputs are JSON-lines records with a `documents` list and a `summary`
//! string. Long inputs are broken into snippets: runs of consecutive
//! sentences packed up to a maximum snippet length, never crossing document
//! boundaries, capped at a maximum snippet count.

mod clone;
mod vocab;

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use clone::{clone_score, is_near_clone, split_sections, NEAR_CLONE_NGRAM, NEAR_CLONE_THRESHOLD};
pub use vocab::{Vocab, BOS, EOS, PAD, UNK};

/// One source document: ordered sentences of token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub doc_id: u32,
    pub sentences: Vec<Vec<u32>>,
}

/// A contiguous span of one document, packed to at most the configured
/// snippet length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snippet {
    pub tokens: Vec<u32>,
    pub doc_id: u32,
    /// Position in the global snippet order of the example.
    pub snippet_index: usize,
}

impl Snippet {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A preprocessed training example.
///
/// `target` is the decode sequence `[BOS] + summary tokens + [EOS]`,
/// truncated so the part after BOS holds at most `max_decode_len` tokens;
/// truncation keeps the final EOS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetizedExample {
    pub id: usize,
    pub snippets: Vec<Snippet>,
    pub target: Vec<u32>,
}

impl SnippetizedExample {
    /// Decode labels: everything after BOS, ending in EOS.
    pub fn target_body(&self) -> &[u32] {
        &self.target[1..]
    }

    /// Summary tokens without BOS/EOS, for similarity computations.
    pub fn summary_tokens(&self) -> &[u32] {
        &self.target[1..self.target.len() - 1]
    }

    pub fn total_input_len(&self) -> usize {
        self.snippets.iter().map(Snippet::len).sum()
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    BadLine { line: usize, msg: String },
    #[error("empty corpus: no usable examples")]
    EmptyCorpus,
    #[error("vocabulary too small: need at least 4 entries for reserved tokens")]
    VocabTooSmall,
}

/// Splits text into sentences on newlines and on `.`, `!`, `?` followed by
/// whitespace. The terminator stays with its sentence; empty sentences are
/// dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.split('\n') {
        let chars: Vec<char> = line.chars().collect();
        let mut start = 0;
        for i in 0..chars.len() {
            let c = chars[i];
            let next_ws = chars.get(i + 1).is_some_and(|n| n.is_whitespace());
            if (c == '.' || c == '!' || c == '?') && next_ws {
                let sent: String = chars[start..=i].iter().collect();
                if !sent.trim().is_empty() {
                    out.push(sent.trim().to_string());
                }
                start = i + 1;
            }
        }
        let tail: String = chars[start..].iter().collect();
        if !tail.trim().is_empty() {
            out.push(tail.trim().to_string());
        }
    }
    out
}

/// Greedy packing of consecutive sentences into snippets.
///
/// A sentence that would overflow the current snippet starts a new one; a
/// single sentence longer than `max_snippet_len` is truncated; snippets
/// never cross document boundaries; packing stops once `max_snippets` is
/// reached.
pub fn snippetize(docs: &[Document], max_snippet_len: usize, max_snippets: usize) -> Vec<Snippet> {
    assert!(max_snippet_len >= 1 && max_snippets >= 1, "snippetize limits must be positive");
    let mut out: Vec<Snippet> = Vec::new();
    let push = |tokens: Vec<u32>, doc_id: u32, out: &mut Vec<Snippet>| -> bool {
        let idx = out.len();
        out.push(Snippet { tokens, doc_id, snippet_index: idx });
        out.len() == max_snippets
    };
    for doc in docs {
        let mut cur: Vec<u32> = Vec::new();
        for sent in &doc.sentences {
            let sent: &[u32] =
                if sent.len() > max_snippet_len { &sent[..max_snippet_len] } else { sent };
            if !cur.is_empty() && cur.len() + sent.len() > max_snippet_len {
                if push(std::mem::take(&mut cur), doc.doc_id, &mut out) {
                    return out;
                }
            }
            cur.extend_from_slice(sent);
        }
        if !cur.is_empty() && push(cur, doc.doc_id, &mut out) {
            return out;
        }
    }
    out
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExample {
    documents: Vec<String>,
    summary: String,
}

/// Limits applied while converting raw text records into examples.
#[derive(Debug, Clone, Copy)]
pub struct PreprocessOpts {
    pub max_snippet_len: usize,
    pub max_snippets: usize,
    pub max_decode_len: usize,
}

/// Converts one raw record into an example. Documents keep their list order
/// (multi-document inputs arrive sorted by relevance upstream).
pub fn preprocess_example(
    id: usize,
    documents: &[String],
    summary: &str,
    vocab: &Vocab,
    opts: PreprocessOpts,
) -> SnippetizedExample {
    let docs: Vec<Document> = documents
        .iter()
        .enumerate()
        .map(|(i, text)| Document {
            doc_id: i as u32,
            sentences: split_sentences(text).iter().map(|s| vocab.tokenize(s)).collect(),
        })
        .collect();
    let snippets = snippetize(&docs, opts.max_snippet_len, opts.max_snippets);

    let mut content = vocab.tokenize(summary);
    // Content plus EOS must fit in max_decode_len.
    if content.len() + 1 > opts.max_decode_len {
        content.truncate(opts.max_decode_len.saturating_sub(1));
    }
    let mut target = Vec::with_capacity(content.len() + 2);
    target.push(BOS);
    target.extend_from_slice(&content);
    target.push(EOS);
    SnippetizedExample { id, snippets, target }
}

/// Streams examples out of a JSON-lines corpus file. Each item carries the
/// 1-based line number in its error on failure.
pub fn load_examples<'a>(
    path: &'a Path,
    vocab: &'a Vocab,
    opts: PreprocessOpts,
) -> Result<impl Iterator<Item = Result<SnippetizedExample, DataError>> + 'a, DataError> {
    let file = File::open(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let reader = BufReader::new(file);
    let path_str = path.display().to_string();
    Ok(reader.lines().enumerate().filter_map(move |(i, line)| {
        let line_no = i + 1;
        let line = match line {
            Ok(l) => l,
            Err(source) => {
                return Some(Err(DataError::Io { path: path_str.clone(), source }))
            }
        };
        if line.trim().is_empty() {
            return None;
        }
        let raw: RawExample = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => return Some(Err(DataError::BadLine { line: line_no, msg: e.to_string() })),
        };
        Some(Ok(preprocess_example(i, &raw.documents, &raw.summary, vocab, opts)))
    }))
}

/// Collects the whole corpus, failing on the first bad line.
pub fn load_all(
    path: &Path,
    vocab: &Vocab,
    opts: PreprocessOpts,
) -> Result<Vec<SnippetizedExample>, DataError> {
    load_examples(path, vocab, opts)?.collect()
}

/// Reads every raw text field of a JSON-lines corpus (documents then
/// summary, in file order), for vocabulary building.
pub fn corpus_texts(path: &Path) -> Result<Vec<String>, DataError> {
    let file = File::open(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(&line)
            .map_err(|e| DataError::BadLine { line: i + 1, msg: e.to_string() })?;
        out.extend(raw.documents);
        out.push(raw.summary);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: u32, sentence_lens: &[usize]) -> Document {
        Document {
            doc_id: id,
            sentences: sentence_lens
                .iter()
                .map(|&n| (0..n as u32).map(|t| t + 4).collect())
                .collect(),
        }
    }

    #[test]
    fn packs_consecutive_sentences_greedily() {
        let snips = snippetize(&[doc(0, &[50, 60, 30])], 128, 10);
        let lens: Vec<usize> = snips.iter().map(Snippet::len).collect();
        assert_eq!(lens, vec![110, 30]);
    }

    #[test]
    fn oversized_sentence_is_truncated() {
        let snips = snippetize(&[doc(0, &[200])], 128, 10);
        assert_eq!(snips.len(), 1);
        assert_eq!(snips[0].len(), 128);
    }

    #[test]
    fn snippets_do_not_cross_document_boundaries() {
        let snips = snippetize(&[doc(0, &[100]), doc(1, &[20])], 128, 10);
        let lens: Vec<usize> = snips.iter().map(Snippet::len).collect();
        assert_eq!(lens, vec![100, 20]);
        assert_eq!(snips[0].doc_id, 0);
        assert_eq!(snips[1].doc_id, 1);
    }

    #[test]
    fn snippet_count_is_capped() {
        let snips = snippetize(&[doc(0, &[10; 20])], 10, 3);
        assert_eq!(snips.len(), 3);
        assert_eq!(snips.iter().map(|s| s.snippet_index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn empty_docs_yield_empty_list() {
        assert!(snippetize(&[], 16, 4).is_empty());
    }

    #[test]
    fn sentence_split_rules() {
        let sents = split_sentences("Alpha beta. Gamma! Delta? Eps\nzeta.eta");
        assert_eq!(sents, vec!["Alpha beta.", "Gamma!", "Delta?", "Eps", "zeta.eta"]);
    }

    #[test]
    fn loader_reports_bad_lines_by_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(
            &path,
            "{\"documents\": [\"a b c\"], \"summary\": \"a b\"}\n{\"documents\": [\"x\"]}\n",
        )
        .unwrap();
        let vocab = Vocab::build(["a b c x"].iter().map(|s| s.to_string()), 16).unwrap();
        let opts = PreprocessOpts { max_snippet_len: 8, max_snippets: 4, max_decode_len: 8 };
        let items: Vec<_> = load_examples(&path, &vocab, opts).unwrap().collect();
        assert!(items[0].is_ok());
        let err = items[1].as_ref().unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("summary"), "{err}");
    }

    #[test]
    fn document_order_is_preserved() {
        let vocab = Vocab::build(["aa bb cc dd"].iter().map(|s| s.to_string()), 16).unwrap();
        let docs: Vec<String> = (0..75).map(|_| "aa bb".to_string()).collect();
        let ex = preprocess_example(
            0,
            &docs,
            "cc dd",
            &vocab,
            PreprocessOpts { max_snippet_len: 8, max_snippets: 200, max_decode_len: 8 },
        );
        assert_eq!(ex.snippets.len(), 75);
        for (i, s) in ex.snippets.iter().enumerate() {
            assert_eq!(s.doc_id as usize, i);
            assert_eq!(s.snippet_index, i);
        }
    }

    #[test]
    fn target_wraps_summary_with_bos_eos_and_truncates() {
        let vocab = Vocab::build(["w x y z"].iter().map(|s| s.to_string()), 16).unwrap();
        let ex = preprocess_example(
            0,
            &["w".to_string()],
            "w x y z w x y z",
            &vocab,
            PreprocessOpts { max_snippet_len: 8, max_snippets: 2, max_decode_len: 4 },
        );
        assert_eq!(ex.target.len(), 5);
        assert_eq!(ex.target[0], BOS);
        assert_eq!(*ex.target.last().unwrap(), EOS);
        assert_eq!(ex.summary_tokens().len(), 3);
    }
}
