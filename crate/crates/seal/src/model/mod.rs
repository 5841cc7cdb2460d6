//! The four summarization architectures and their shared sub-networks:
//! per-snippet encoder, compressor, scorer, segment-wise scorer, gating
//! function, and decoder.

mod config;
mod gate;
pub mod layers;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{ConfigError, ModelConfig, ModelKind};
pub use gate::{apply_selection, gate_select, GateSelection};
pub use layers::Dropout;

use crate::numerics::{concat_rows, BoundParams, Init, Var};
use crate::text::{Snippet, SnippetizedExample, BOS, PAD};
use crate::{Real, Tape, Tensor};

use layers::{
    attention_pool, causal_mask, decoder_stack, encoder_stack, feed_forward, full_mask, key_mask,
    layer_norm, multi_head_attention, sinusoidal_positions,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty input: example has no snippets or tokens")]
    EmptyInput,
    #[error("empty selection: top snippet (length {top_len}) exceeds max_extract_len {limit}")]
    EmptySelection { limit: usize, top_len: usize },
    #[error("snippet of length {len} exceeds max_snippet_len {max}")]
    SnippetTooLong { len: usize, max: usize },
}

/// Decoding step `step`'s segment start: `floor(step / segment_len) *
/// segment_len`.
pub fn seg_start(step: usize, segment_len: usize) -> usize {
    assert!(segment_len >= 1, "segment_len must be positive");
    (step / segment_len) * segment_len
}

/// Teacher-forced decoder sequence: inputs, next-token labels, and the
/// non-pad mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSeq {
    pub input_ids: Vec<u32>,
    pub labels: Vec<u32>,
    pub keep: Vec<bool>,
}

impl TeacherSeq {
    /// Unpadded teacher sequence from a `[BOS, .., EOS]` target.
    pub fn from_target(target: &[u32]) -> Self {
        assert!(target.len() >= 2 && target[0] == BOS, "target must be [BOS, .., EOS]");
        let t = target.len() - 1;
        TeacherSeq {
            input_ids: target[..t].to_vec(),
            labels: target[1..].to_vec(),
            keep: vec![true; t],
        }
    }

    /// Teacher sequence padded to exactly `len` label positions, as required
    /// for segment-parallel training.
    pub fn from_target_padded(target: &[u32], len: usize) -> Self {
        assert!(target.len() >= 2 && target[0] == BOS, "target must be [BOS, .., EOS]");
        assert!(target.len() - 1 <= len, "target longer than padded length");
        let real = target.len() - 1;
        let mut labels = target[1..].to_vec();
        labels.resize(len, PAD);
        let mut input_ids = Vec::with_capacity(len);
        input_ids.push(BOS);
        input_ids.extend_from_slice(&labels[..len - 1]);
        let keep = (0..len).map(|t| t < real).collect();
        TeacherSeq { input_ids, labels, keep }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-snippet encoder outputs: each snippet padded to the configured
/// snippet length and encoded independently (block-diagonal self-attention).
pub struct EncodedSnippets<'t> {
    pub reps: Vec<Var<'t, Real>>,
    pub lengths: Vec<usize>,
    pub doc_ids: Vec<u32>,
    pub pad_width: usize,
}

impl<'t> EncodedSnippets<'t> {
    pub fn count(&self) -> usize {
        self.reps.len()
    }

    fn valid(&self, i: usize) -> Vec<bool> {
        (0..self.pad_width).map(|t| t < self.lengths[i]).collect()
    }
}

/// Scorer outputs: one scalar per snippet plus the pooled snippet vectors.
pub struct ScorerOutput<'t> {
    pub scores: Var<'t, Real>,
    pub score_values: Vec<f64>,
    pub pooled: Var<'t, Real>,
}

/// Output of the single-memory architectures (Trunc, CA) and of EA's
/// decoder stage.
pub struct AbstractiveOut<'t> {
    pub logits: Var<'t, Real>,
    /// Decoder cross-attention mask actually used, `[t, memory_len]`.
    pub cross_mask: Tensor,
}

pub struct EaOut<'t> {
    pub logits: Var<'t, Real>,
    pub scorer: ScorerOutput<'t>,
    pub selection: GateSelection,
    pub cross_mask: Tensor,
}

pub struct SealSegment<'t> {
    pub scorer: ScorerOutput<'t>,
    pub selection: GateSelection,
}

pub struct SealOut<'t> {
    /// Full-sequence logits, segments concatenated in order.
    pub logits: Var<'t, Real>,
    pub segments: Vec<SealSegment<'t>>,
}

/// Forward-pass context: one tape, parameters bound to it, and the dropout
/// stream (identity at evaluation time).
pub struct Fwd<'s, 't> {
    pub tape: &'t Tape,
    pub params: BoundParams<'s, 't, Real>,
    pub dropout: Dropout,
}

/// A model: its configuration plus the parameter store for its kind.
pub struct Model {
    cfg: ModelConfig,
    pub store: crate::ParameterStore,
}

impl Model {
    /// Builds the parameter set for `cfg.kind`. Initial values depend only
    /// on `(seed, parameter name)`.
    pub fn new(cfg: ModelConfig) -> Model {
        let mut store = crate::ParameterStore::new(cfg.seed);
        register_params(&mut store, &cfg);
        Model { cfg, store }
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Evaluation-mode forward context (dropout off).
    pub fn fwd<'s, 't>(&'s self, tape: &'t Tape) -> Fwd<'s, 't> {
        Fwd { tape, params: self.store.bind(tape), dropout: Dropout::off() }
    }

    /// Training-mode forward context with a seeded dropout stream.
    pub fn fwd_train<'s, 't>(&'s self, tape: &'t Tape, rate: f64, seed: u64) -> Fwd<'s, 't> {
        Fwd { tape, params: self.store.bind(tape), dropout: Dropout::new(rate, seed) }
    }

    /// Snippets within the configured count budget.
    pub fn budget_snippets<'a>(&self, example: &'a SnippetizedExample) -> &'a [Snippet] {
        let n = example.snippets.len().min(self.cfg.max_snippets);
        &example.snippets[..n]
    }

    /// Token embeddings scaled by sqrt(d), plus sinusoidal positions.
    pub(crate) fn embed_tokens<'t>(&self, f: &Fwd<'_, 't>, ids: &[u32]) -> Var<'t, Real> {
        let d = self.cfg.d_model;
        let table = f.params.get("embed.tok");
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let emb = table.embedding(&idx).scale((d as f64).sqrt());
        emb.add(f.tape.constant(sinusoidal_positions(ids.len(), d)))
    }

    /// Encodes every snippet independently with the shared encoder. Padding
    /// is masked; positions restart at zero inside each snippet.
    pub fn encode_snippets<'t>(
        &self,
        f: &Fwd<'_, 't>,
        example: &SnippetizedExample,
    ) -> Result<EncodedSnippets<'t>, ModelError> {
        let snips = self.budget_snippets(example);
        if snips.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let w = self.cfg.max_snippet_len;
        let mut reps = Vec::with_capacity(snips.len());
        let mut lengths = Vec::with_capacity(snips.len());
        let mut doc_ids = Vec::with_capacity(snips.len());
        for s in snips {
            if s.len() > w {
                return Err(ModelError::SnippetTooLong { len: s.len(), max: w });
            }
            assert!(
                (s.doc_id as usize) < self.cfg.max_docs,
                "doc_id {} exceeds max_docs {}",
                s.doc_id,
                self.cfg.max_docs
            );
            let mut ids = s.tokens.clone();
            ids.resize(w, PAD);
            let valid: Vec<bool> = (0..w).map(|t| t < s.len()).collect();
            let x = self.embed_tokens(f, &ids);
            let rep = encoder_stack(
                f,
                "enc",
                self.cfg.encoder_layers,
                self.cfg.heads,
                x,
                &key_mask(w, &valid),
            );
            reps.push(rep);
            lengths.push(s.len());
            doc_ids.push(s.doc_id);
        }
        Ok(EncodedSnippets { reps, lengths, doc_ids, pad_width: w })
    }

    /// Scorer over pooled snippet vectors, optionally cross-attending to
    /// pooled previous-segment vectors. With no segment memory the
    /// cross-attention sublayer is skipped entirely.
    fn scorer_core<'t>(
        &self,
        f: &Fwd<'_, 't>,
        encoded: &EncodedSnippets<'t>,
        seg_memory: Option<Var<'t, Real>>,
    ) -> ScorerOutput<'t> {
        let n = encoded.count();
        let pooled_rows: Vec<Var<'t, Real>> = (0..n)
            .map(|i| attention_pool(f, "scorer.pool.q", encoded.reps[i], &encoded.valid(i)))
            .collect();
        let pooled = concat_rows(&pooled_rows);
        let doc_idx: Vec<usize> = encoded.doc_ids.iter().map(|&d| d as usize).collect();
        let demb = f.params.get("scorer.doc_emb").embedding(&doc_idx);
        let mut x = pooled.add(demb);

        let self_mask = full_mask(n, n);
        for l in 0..self.cfg.scorer_layers {
            let p = format!("scorer.l{l}");
            let a = layer_norm(f, &format!("{p}.ln1"), x);
            x = x.add(f.dropout.apply(multi_head_attention(
                f,
                &format!("{p}.attn"),
                a,
                a,
                &self_mask,
                self.cfg.heads,
            )));
            if let Some(mem) = seg_memory {
                let k = mem.shape()[0];
                let c = layer_norm(f, &format!("{p}.lnx"), x);
                x = x.add(f.dropout.apply(multi_head_attention(
                    f,
                    &format!("{p}.cross"),
                    c,
                    mem,
                    &full_mask(n, k),
                    self.cfg.heads,
                )));
            }
            let b = layer_norm(f, &format!("{p}.ln2"), x);
            x = x.add(f.dropout.apply(feed_forward(f, &format!("{p}.ffn"), b)));
        }
        x = layer_norm(f, "scorer.ln", x);

        let w = f.params.get("scorer.head.w");
        let b = f.params.get("scorer.head.b");
        let scores = x.matmul(w).add_row(b).reshape(vec![n]);
        let score_values = scores.value().data().to_vec();
        ScorerOutput { scores, score_values, pooled }
    }

    /// Static snippet scoring (EA; also SEAL's first segment).
    pub fn score_snippets<'t>(
        &self,
        f: &Fwd<'_, 't>,
        encoded: &EncodedSnippets<'t>,
    ) -> ScorerOutput<'t> {
        self.scorer_core(f, encoded, None)
    }

    /// Segment-wise scoring: previous decode segments are encoded with the
    /// shared encoder, attention-pooled to one vector each, and offered to
    /// the scorer through cross-attention. All-pad segments carry no decoded
    /// content and are dropped.
    pub fn score_segmentwise<'t>(
        &self,
        f: &Fwd<'_, 't>,
        encoded: &EncodedSnippets<'t>,
        prev_segments: &[&[u32]],
    ) -> ScorerOutput<'t> {
        let segs: Vec<&[u32]> =
            prev_segments.iter().copied().filter(|s| s.iter().any(|&t| t != PAD)).collect();
        if segs.is_empty() {
            return self.scorer_core(f, encoded, None);
        }
        let pooled: Vec<Var<'t, Real>> = segs
            .iter()
            .map(|seg| {
                let valid: Vec<bool> = seg.iter().map(|&t| t != PAD).collect();
                let x = self.embed_tokens(f, seg);
                let rep = encoder_stack(
                    f,
                    "enc",
                    self.cfg.encoder_layers,
                    self.cfg.heads,
                    x,
                    &key_mask(seg.len(), &valid),
                );
                attention_pool(f, "scorer.seg_pool.q", rep, &valid)
            })
            .collect();
        let seg_memory = concat_rows(&pooled);
        self.scorer_core(f, encoded, Some(seg_memory))
    }

    /// Compresses one snippet group: learnable query vectors are prepended
    /// to the group's token embeddings, the group self-attends in full, and
    /// the processed query positions come back as the compressed memory.
    pub fn compress_group<'t>(&self, f: &Fwd<'_, 't>, group_tokens: &[u32]) -> Var<'t, Real> {
        assert!(!group_tokens.is_empty(), "compress_group on empty group");
        let c = self.cfg.compressed_size;
        let queries = f.params.get("compress.queries");
        let toks = self.embed_tokens(f, group_tokens);
        let x = concat_rows(&[queries, toks]);
        let total = c + group_tokens.len();
        let out = encoder_stack(
            f,
            "enc",
            self.cfg.encoder_layers,
            self.cfg.heads,
            x,
            &full_mask(total, total),
        );
        out.slice_rows(0, c)
    }

    /// Snippet groups for compression: one group per document when the
    /// example spans several documents, otherwise blocks of `group_size`
    /// consecutive snippets.
    pub fn snippet_groups(&self, snips: &[Snippet]) -> Vec<Vec<u32>> {
        let multi_doc = snips.windows(2).any(|w| w[0].doc_id != w[1].doc_id);
        let mut groups: Vec<Vec<u32>> = Vec::new();
        if multi_doc {
            let mut cur_doc = None;
            for s in snips {
                if cur_doc != Some(s.doc_id) {
                    groups.push(Vec::new());
                    cur_doc = Some(s.doc_id);
                }
                groups.last_mut().unwrap().extend_from_slice(&s.tokens);
            }
        } else {
            for chunk in snips.chunks(self.cfg.group_size) {
                let mut g = Vec::new();
                for s in chunk {
                    g.extend_from_slice(&s.tokens);
                }
                groups.push(g);
            }
        }
        groups
    }

    /// Decoder pass over teacher inputs against a fixed memory; returns
    /// next-token logits and the cross-attention mask used.
    pub fn decode_to_logits<'t>(
        &self,
        f: &Fwd<'_, 't>,
        input_ids: &[u32],
        memory: Var<'t, Real>,
    ) -> (Var<'t, Real>, Tensor) {
        let t = input_ids.len();
        let mem_len = memory.shape()[0];
        let x = self.embed_tokens(f, input_ids);
        let cross = full_mask(t, mem_len);
        let h = decoder_stack(
            f,
            "dec",
            self.cfg.decoder_layers,
            self.cfg.heads,
            x,
            &causal_mask(t),
            memory,
            &cross,
        );
        let logits = h.matmul(f.params.get("out.w")).add_row(f.params.get("out.b"));
        (logits, cross)
    }

    /// Truncated-input model: full self-attention over the concatenated
    /// leading snippets cut at `max_input_len`.
    pub fn forward_trunc<'t>(
        &self,
        f: &Fwd<'_, 't>,
        example: &SnippetizedExample,
        teacher: &TeacherSeq,
    ) -> Result<AbstractiveOut<'t>, ModelError> {
        let mut ids: Vec<u32> = Vec::new();
        for s in self.budget_snippets(example) {
            ids.extend_from_slice(&s.tokens);
        }
        ids.truncate(self.cfg.max_input_len);
        if ids.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let l = ids.len();
        let x = self.embed_tokens(f, &ids);
        let memory =
            encoder_stack(f, "enc", self.cfg.encoder_layers, self.cfg.heads, x, &full_mask(l, l));
        let (logits, cross_mask) = self.decode_to_logits(f, &teacher.input_ids, memory);
        Ok(AbstractiveOut { logits, cross_mask })
    }

    /// Compressive-abstractive model: the decoder attends to the
    /// concatenation of all groups' compressed memories.
    pub fn forward_ca<'t>(
        &self,
        f: &Fwd<'_, 't>,
        example: &SnippetizedExample,
        teacher: &TeacherSeq,
    ) -> Result<AbstractiveOut<'t>, ModelError> {
        let snips = self.budget_snippets(example);
        if snips.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let groups = self.snippet_groups(snips);
        let memories: Vec<Var<'t, Real>> =
            groups.iter().map(|g| self.compress_group(f, g)).collect();
        let memory = concat_rows(&memories);
        let (logits, cross_mask) = self.decode_to_logits(f, &teacher.input_ids, memory);
        Ok(AbstractiveOut { logits, cross_mask })
    }

    /// Extractive-abstractive model. `injected_scores` bypasses the scorer's
    /// values for the gate only (the scorer output itself is unchanged); it
    /// exists for selection-sensitivity diagnostics.
    pub fn forward_ea<'t>(
        &self,
        f: &Fwd<'_, 't>,
        example: &SnippetizedExample,
        teacher: &TeacherSeq,
        injected_scores: Option<&[f64]>,
    ) -> Result<EaOut<'t>, ModelError> {
        let encoded = self.encode_snippets(f, example)?;
        let scorer = self.score_snippets(f, &encoded);
        let gate_scores: &[f64] = injected_scores.unwrap_or(&scorer.score_values);
        let selection = gate_select(gate_scores, &encoded.lengths, self.cfg.max_extract_len)?;
        let memory = apply_selection(f, &encoded, &selection);
        let (logits, cross_mask) = self.decode_to_logits(f, &teacher.input_ids, memory);
        Ok(EaOut { logits, scorer, selection, cross_mask })
    }

    /// SEAL teacher-forced training pass: every decode segment re-scores and
    /// re-gates against the gold previous segments, decodes its positions
    /// with causal self-attention over the full prefix, and the per-segment
    /// logits concatenate into the full sequence.
    pub fn forward_seal_training<'t>(
        &self,
        f: &Fwd<'_, 't>,
        example: &SnippetizedExample,
        teacher: &TeacherSeq,
    ) -> Result<SealOut<'t>, ModelError> {
        let s = self.cfg.segment_len;
        let m = self.cfg.max_segments;
        assert_eq!(teacher.len(), s * m, "seal training requires a teacher padded to max_decode_len");
        let encoded = self.encode_snippets(f, example)?;
        let mut segments = Vec::with_capacity(m);
        let mut logit_parts = Vec::with_capacity(m);
        for j in 0..m {
            let prev: Vec<&[u32]> = (0..j).map(|p| &teacher.labels[p * s..(p + 1) * s]).collect();
            let scorer = self.score_segmentwise(f, &encoded, &prev);
            let selection =
                gate_select(&scorer.score_values, &encoded.lengths, self.cfg.max_extract_len)?;
            let memory = apply_selection(f, &encoded, &selection);
            let end = (j + 1) * s;
            let (logits_prefix, _) = self.decode_to_logits(f, &teacher.input_ids[..end], memory);
            logit_parts.push(logits_prefix.slice_rows(j * s, s));
            segments.push(SealSegment { scorer, selection });
        }
        Ok(SealOut { logits: concat_rows(&logit_parts), segments })
    }
}

fn register_ln(store: &mut crate::ParameterStore, prefix: &str, d: usize) {
    store.create(&format!("{prefix}.g"), &[d], Init::Ones);
    store.create(&format!("{prefix}.b"), &[d], Init::Zeros);
}

fn register_attn(store: &mut crate::ParameterStore, prefix: &str, d: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        store.create(&format!("{prefix}.{w}"), &[d, d], Init::Glorot { fan_in: d, fan_out: d });
    }
    for b in ["bq", "bk", "bv", "bo"] {
        store.create(&format!("{prefix}.{b}"), &[d], Init::Zeros);
    }
}

fn register_ffn(store: &mut crate::ParameterStore, prefix: &str, d: usize, d_ff: usize) {
    store.create(&format!("{prefix}.w1"), &[d, d_ff], Init::Glorot { fan_in: d, fan_out: d_ff });
    store.create(&format!("{prefix}.b1"), &[d_ff], Init::Zeros);
    store.create(&format!("{prefix}.w2"), &[d_ff, d], Init::Glorot { fan_in: d_ff, fan_out: d });
    store.create(&format!("{prefix}.b2"), &[d], Init::Zeros);
}

fn register_params(store: &mut crate::ParameterStore, cfg: &ModelConfig) {
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    store.create("embed.tok", &[v, d], Init::Glorot { fan_in: v, fan_out: d });
    store.create("out.w", &[d, v], Init::Glorot { fan_in: d, fan_out: v });
    store.create("out.b", &[v], Init::Zeros);

    for l in 0..cfg.encoder_layers {
        let p = format!("enc.l{l}");
        register_ln(store, &format!("{p}.ln1"), d);
        register_attn(store, &format!("{p}.attn"), d);
        register_ln(store, &format!("{p}.ln2"), d);
        register_ffn(store, &format!("{p}.ffn"), d, cfg.d_ff);
    }
    register_ln(store, "enc.ln", d);

    for l in 0..cfg.decoder_layers {
        let p = format!("dec.l{l}");
        register_ln(store, &format!("{p}.ln1"), d);
        register_attn(store, &format!("{p}.self"), d);
        register_ln(store, &format!("{p}.ln2"), d);
        register_attn(store, &format!("{p}.cross"), d);
        register_ln(store, &format!("{p}.ln3"), d);
        register_ffn(store, &format!("{p}.ffn"), d, cfg.d_ff);
    }
    register_ln(store, "dec.ln", d);

    if cfg.kind == ModelKind::Ca {
        store.create(
            "compress.queries",
            &[cfg.compressed_size, d],
            Init::Glorot { fan_in: cfg.compressed_size, fan_out: d },
        );
    }

    if matches!(cfg.kind, ModelKind::Ea | ModelKind::Seal) {
        store.create("scorer.pool.q", &[d, 1], Init::Glorot { fan_in: d, fan_out: 1 });
        store.create(
            "scorer.doc_emb",
            &[cfg.max_docs, d],
            Init::Glorot { fan_in: cfg.max_docs, fan_out: d },
        );
        for l in 0..cfg.scorer_layers {
            let p = format!("scorer.l{l}");
            register_ln(store, &format!("{p}.ln1"), d);
            register_attn(store, &format!("{p}.attn"), d);
            if cfg.kind == ModelKind::Seal {
                register_ln(store, &format!("{p}.lnx"), d);
                register_attn(store, &format!("{p}.cross"), d);
            }
            register_ln(store, &format!("{p}.ln2"), d);
            register_ffn(store, &format!("{p}.ffn"), d, cfg.d_ff);
        }
        register_ln(store, "scorer.ln", d);
        store.create("scorer.head.w", &[d, 1], Init::Glorot { fan_in: d, fan_out: 1 });
        store.create("scorer.head.b", &[1], Init::Zeros);
        if cfg.kind == ModelKind::Seal {
            store.create("scorer.seg_pool.q", &[d, 1], Init::Glorot { fan_in: d, fan_out: 1 });
        }
    }
}

/// Plain serializable summary of one gating event (for traces and logs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub selected: Vec<usize>,
    pub total_len: usize,
}

impl From<&GateSelection> for SelectionSummary {
    fn from(g: &GateSelection) -> Self {
        SelectionSummary { selected: g.selected.clone(), total_len: g.selected_total_len }
    }
}
