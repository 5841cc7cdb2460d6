use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The four architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Full attention over the truncated leading input.
    Trunc,
    /// Compressive-abstractive: snippet groups compressed to fixed-size
    /// memories.
    Ca,
    /// Extractive-abstractive: scored snippets gated into the decoder
    /// memory.
    Ea,
    /// Segment-wise extractive-abstractive: snippets re-selected at every
    /// decode segment.
    Seal,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::Trunc => "trunc",
            ModelKind::Ca => "ca",
            ModelKind::Ea => "ea",
            ModelKind::Seal => "seal",
        };
        f.write_str(s)
    }
}

fn default_max_docs() -> usize {
    80
}

/// Architecture hyperparameters and sequence-length limits.
///
/// Length fields are tied: `max_input_len = max_snippet_len * max_snippets`
/// and `max_decode_len = segment_len * max_segments`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub scorer_layers: usize,
    pub decoder_layers: usize,
    pub max_input_len: usize,
    pub max_snippet_len: usize,
    pub max_snippets: usize,
    pub max_extract_len: usize,
    pub max_decode_len: usize,
    pub segment_len: usize,
    pub max_segments: usize,
    /// Compressed memory size per snippet group (CA).
    pub compressed_size: usize,
    /// Snippets per compression group for single-document inputs (CA).
    pub group_size: usize,
    pub vocab_size: usize,
    /// Size of the learned document-embedding table.
    #[serde(default = "default_max_docs")]
    pub max_docs: usize,
    /// Weight-initialization seed.
    pub seed: u64,
    /// Permits the degenerate SEAL configuration `segment_len ==
    /// max_decode_len`, in which SEAL collapses to EA. Used by equivalence
    /// tests.
    #[serde(default)]
    pub reduction_test: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config invariant violated: {0}")]
    Invariant(String),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invariant(msg));
        for (name, v) in [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("decoder_layers", self.decoder_layers),
            ("max_input_len", self.max_input_len),
            ("max_snippet_len", self.max_snippet_len),
            ("max_snippets", self.max_snippets),
            ("max_extract_len", self.max_extract_len),
            ("max_decode_len", self.max_decode_len),
            ("segment_len", self.segment_len),
            ("max_segments", self.max_segments),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.max_input_len != self.max_snippet_len * self.max_snippets {
            return fail(format!(
                "max_input_len ({}) != max_snippet_len ({}) * max_snippets ({})",
                self.max_input_len, self.max_snippet_len, self.max_snippets
            ));
        }
        if self.max_decode_len != self.segment_len * self.max_segments {
            return fail(format!(
                "max_decode_len ({}) != segment_len ({}) * max_segments ({})",
                self.max_decode_len, self.segment_len, self.max_segments
            ));
        }
        if self.d_model % self.heads != 0 {
            return fail(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            ));
        }
        if self.vocab_size < 5 {
            return fail("vocab_size must cover the 4 reserved tokens plus content".into());
        }
        if self.kind == ModelKind::Seal
            && self.segment_len >= self.max_decode_len
            && !self.reduction_test
        {
            return fail(
                "seal requires segment_len < max_decode_len (set reduction_test to allow \
                 the degenerate single-segment form)"
                    .into(),
            );
        }
        if self.kind == ModelKind::Ca && (self.compressed_size == 0 || self.group_size == 0) {
            return fail("ca requires positive compressed_size and group_size".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn desk(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            d_model: 16,
            d_ff: 32,
            heads: 2,
            encoder_layers: 1,
            scorer_layers: 1,
            decoder_layers: 1,
            max_input_len: 64,
            max_snippet_len: 16,
            max_snippets: 4,
            max_extract_len: 32,
            max_decode_len: 16,
            segment_len: 8,
            max_segments: 2,
            compressed_size: 2,
            group_size: 2,
            vocab_size: 32,
            max_docs: 8,
            seed: 1,
            reduction_test: false,
        }
    }

    #[test]
    fn valid_config_passes() {
        assert_eq!(desk(ModelKind::Seal).validate(), Ok(()));
    }

    #[test]
    fn length_relations_are_enforced() {
        let mut cfg = desk(ModelKind::Trunc);
        cfg.max_input_len = 63;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("max_input_len"), "{err}");

        let mut cfg = desk(ModelKind::Trunc);
        cfg.max_segments = 3;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("max_decode_len"), "{err}");
    }

    #[test]
    fn seal_degenerate_segment_length_needs_flag() {
        let mut cfg = desk(ModelKind::Seal);
        cfg.segment_len = 16;
        cfg.max_segments = 1;
        assert!(cfg.validate().is_err());
        cfg.reduction_test = true;
        assert_eq!(cfg.validate(), Ok(()));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let json = serde_json::to_string(&desk(ModelKind::Ea)).unwrap();
        let patched = json.replacen('{', "{\"mystery\": 1,", 1);
        assert!(serde_json::from_str::<ModelConfig>(&patched).is_err());
    }
}
