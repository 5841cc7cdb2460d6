use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::DataError;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Word-level vocabulary: lowercased whitespace tokens with four reserved
/// ids at 0..=3. Ids are dense in `[0, size)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from raw text, keeping the most frequent tokens
    /// up to `max_size - 4`. Frequency ties break lexicographically, so
    /// identical corpora produce byte-identical vocabulary files.
    pub fn build(
        corpus: impl Iterator<Item = String>,
        max_size: usize,
    ) -> Result<Self, DataError> {
        if max_size < RESERVED.len() {
            return Err(DataError::VocabTooSmall);
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut any = false;
        for text in corpus {
            any = true;
            for word in text.split_whitespace() {
                *counts.entry(word.to_lowercase()).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(DataError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED.len());

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Id of a (already lowercased) token; unknown tokens map to UNK.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// Lowercase whitespace tokenization into ids.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(&w.to_lowercase())).collect()
    }

    /// Text form of a token sequence, skipping PAD/BOS/EOS.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the id of a token is its 0-based line index.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body)
            .map_err(|source| DataError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let body = fs::read_to_string(path)
            .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
        let tokens: Vec<String> = body.lines().map(|l| l.to_string()).collect();
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED.map(String::from) {
            return Err(DataError::BadLine {
                line: 1,
                msg: "vocab file must start with the four reserved tokens".into(),
            });
        }
        Ok(Self::from_tokens(tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = Vocab::build(["a a b".to_string()].into_iter(), 6).unwrap();
        assert_eq!(v.size(), 6);
        assert_eq!(v.token(4), "a");
        assert_eq!(v.token(5), "b");
    }

    #[test]
    fn capacity_edge_keeps_only_reserved() {
        let v = Vocab::build(["x y z".to_string()].into_iter(), 4).unwrap();
        assert_eq!(v.size(), 4);
        assert_eq!(v.tokenize("x y"), vec![UNK, UNK]);
    }

    #[test]
    fn identical_corpora_produce_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let build = |p: &Path| {
            let v = Vocab::build(["b a a c b".to_string()].into_iter(), 8).unwrap();
            v.save(p).unwrap();
            fs::read(p).unwrap()
        };
        let f1 = build(&dir.path().join("v1.txt"));
        let f2 = build(&dir.path().join("v2.txt"));
        assert_eq!(f1, f2);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::build(["hello world world".to_string()].into_iter(), 10).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(v, loaded);
        assert_eq!(loaded.id("world"), 4);
        assert_eq!(loaded.id("absent"), UNK);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            Vocab::build(std::iter::empty(), 10),
            Err(DataError::EmptyCorpus)
        ));
    }
}
