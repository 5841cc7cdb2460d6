//! Greedy decoding: fixed-memory decoding for Trunc/CA/EA and segment-wise
//! re-selecting decoding for SEAL, with a selection trace.

use serde::{Deserialize, Serialize};

use crate::model::{apply_selection, gate_select, Model, ModelError, ModelKind};
use crate::text::{SnippetizedExample, BOS, EOS};
use crate::{Tape, Tensor};

/// Record of one segment's selection event during segment-wise decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentTrace {
    pub segment: usize,
    /// Scorer outputs for every snippet at this segment.
    pub scores: Vec<f64>,
    /// Selected snippet indices in sorted (concatenation) order.
    pub selected: Vec<usize>,
    /// Tokens emitted within this segment.
    pub tokens: Vec<u32>,
}

/// Per-example decode trace: which snippets each segment attended to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub example_id: usize,
    pub segment_len: usize,
    pub segments: Vec<SegmentTrace>,
}

fn argmax(row: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Builds the fixed cross-attention memory for the non-segment-wise kinds.
fn fixed_memory(model: &Model, example: &SnippetizedExample) -> Result<Tensor, ModelError> {
    let tape = Tape::new();
    let f = model.fwd(&tape);
    let cfg = model.cfg();
    match cfg.kind {
        ModelKind::Trunc => {
            let mut ids: Vec<u32> = Vec::new();
            for s in model.budget_snippets(example) {
                ids.extend_from_slice(&s.tokens);
            }
            ids.truncate(cfg.max_input_len);
            if ids.is_empty() {
                return Err(ModelError::EmptyInput);
            }
            let x = model.embed_tokens(&f, &ids);
            let l = ids.len();
            Ok(crate::model::layers::encoder_stack(
                &f,
                "enc",
                cfg.encoder_layers,
                cfg.heads,
                x,
                &crate::model::layers::full_mask(l, l),
            )
            .value())
        }
        ModelKind::Ca => {
            let snips = model.budget_snippets(example);
            if snips.is_empty() {
                return Err(ModelError::EmptyInput);
            }
            let groups = model.snippet_groups(snips);
            let memories: Vec<_> = groups.iter().map(|g| model.compress_group(&f, g)).collect();
            Ok(crate::numerics::concat_rows(&memories).value())
        }
        ModelKind::Ea => {
            let encoded = model.encode_snippets(&f, example)?;
            let scorer = model.score_snippets(&f, &encoded);
            let sel = gate_select(&scorer.score_values, &encoded.lengths, cfg.max_extract_len)?;
            Ok(apply_selection(&f, &encoded, &sel).value())
        }
        ModelKind::Seal => unreachable!("seal decodes segment-wise"),
    }
}

fn next_token(model: &Model, memory: &Tensor, prefix: &[u32]) -> u32 {
    let tape = Tape::new();
    let f = model.fwd(&tape);
    let mem = tape.constant(memory.clone());
    let (logits, _) = model.decode_to_logits(&f, prefix, mem);
    let v = logits.value();
    argmax(v.row(prefix.len() - 1))
}

/// Greedy argmax decoding from BOS until EOS or `max_len` tokens. The
/// cross-attention memory is fixed for the whole decode.
pub fn greedy_decode(
    model: &Model,
    example: &SnippetizedExample,
    max_len: usize,
) -> Result<Vec<u32>, ModelError> {
    assert_ne!(model.cfg().kind, ModelKind::Seal, "use greedy_decode_segmentwise for seal");
    let memory = fixed_memory(model, example)?;
    let mut out: Vec<u32> = Vec::new();
    let mut prefix = vec![BOS];
    for _ in 0..max_len {
        let tok = next_token(model, &memory, &prefix);
        if tok == EOS {
            break;
        }
        out.push(tok);
        prefix.push(tok);
    }
    Ok(out)
}

/// Segment-wise greedy decoding: at each segment boundary the scorer re-runs
/// over the model's own previously generated segments, the gate re-selects,
/// and the next `segment_len` tokens decode against the new memory. Stops at
/// the first EOS even mid-segment.
pub fn greedy_decode_segmentwise(
    model: &Model,
    example: &SnippetizedExample,
    max_len: usize,
) -> Result<(Vec<u32>, DecodeTrace), ModelError> {
    let cfg = model.cfg();
    assert_eq!(cfg.kind, ModelKind::Seal, "segment-wise decoding is a seal path");
    let s = cfg.segment_len;
    let mut generated: Vec<u32> = Vec::new();
    let mut trace = DecodeTrace { example_id: example.id, segment_len: s, segments: Vec::new() };
    let mut done = false;

    let mut segment = 0usize;
    while !done && segment * s < max_len {
        let start = segment * s;
        let (memory, scores, selected) = {
            let tape = Tape::new();
            let f = model.fwd(&tape);
            let encoded = model.encode_snippets(&f, example)?;
            let prev: Vec<&[u32]> = generated[..start].chunks(s).collect();
            let scorer = model.score_segmentwise(&f, &encoded, &prev);
            let sel = gate_select(&scorer.score_values, &encoded.lengths, cfg.max_extract_len)?;
            (
                apply_selection(&f, &encoded, &sel).value(),
                scorer.score_values.clone(),
                sel.selected.clone(),
            )
        };
        let mut seg_tokens = Vec::new();
        for step in start..(start + s).min(max_len) {
            debug_assert_eq!(crate::model::seg_start(step, s), start);
            let mut prefix = Vec::with_capacity(generated.len() + 1);
            prefix.push(BOS);
            prefix.extend_from_slice(&generated);
            let tok = next_token(model, &memory, &prefix);
            if tok == EOS {
                done = true;
                break;
            }
            generated.push(tok);
            seg_tokens.push(tok);
        }
        trace.segments.push(SegmentTrace { segment, scores, selected, tokens: seg_tokens });
        segment += 1;
    }
    Ok((generated, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelKind};
    use crate::text::Snippet;

    fn cfg(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            d_model: 16,
            d_ff: 32,
            heads: 2,
            encoder_layers: 1,
            scorer_layers: 1,
            decoder_layers: 1,
            max_input_len: 32,
            max_snippet_len: 8,
            max_snippets: 4,
            max_extract_len: 16,
            max_decode_len: 8,
            segment_len: 4,
            max_segments: 2,
            compressed_size: 2,
            group_size: 2,
            vocab_size: 24,
            max_docs: 8,
            seed: 11,
            reduction_test: false,
        }
    }

    fn example(snips: &[&[u32]], body: &[u32]) -> SnippetizedExample {
        let snippets = snips
            .iter()
            .enumerate()
            .map(|(i, toks)| Snippet { tokens: toks.to_vec(), doc_id: 0, snippet_index: i })
            .collect();
        let mut target = vec![BOS];
        target.extend_from_slice(body);
        target.push(EOS);
        SnippetizedExample { id: 3, snippets, target }
    }

    #[test]
    fn decoding_is_deterministic() {
        let model = Model::new(cfg(ModelKind::Ea));
        let ex = example(&[&[5, 6, 7], &[8, 9]], &[5, 8]);
        let a = greedy_decode(&model, &ex, 8).unwrap();
        let b = greedy_decode(&model, &ex, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eos_biased_model_emits_empty_summary() {
        let mut model = Model::new(cfg(ModelKind::Trunc));
        // Force the output bias to overwhelmingly prefer EOS.
        let idx = model.store.index_of("out.b").unwrap();
        let _ = idx;
        let grads: Vec<Option<Tensor>> = model
            .store
            .names()
            .map(|n| {
                if n == "out.b" {
                    let mut g = Tensor::zeros(&[24]);
                    g.data_mut()[EOS as usize] = -100.0;
                    Some(g)
                } else {
                    None
                }
            })
            .collect::<Vec<_>>();
        model.store.accumulate(&grads, 1.0);
        model.store.adam_step(100.0, 0.9, 0.999, 1e-8, 1);
        model.store.zero_grads();
        let ex = example(&[&[5, 6, 7]], &[5, 6]);
        let out = greedy_decode(&model, &ex, 8).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn segmentwise_trace_has_one_event_per_segment() {
        let model = Model::new(cfg(ModelKind::Seal));
        let ex = example(&[&[5, 6, 7], &[8, 9, 10]], &[5, 8, 6, 9, 7, 10]);
        let (tokens, trace) = greedy_decode_segmentwise(&model, &ex, 8).unwrap();
        assert!(trace.segments.len() <= 2);
        assert_eq!(trace.segment_len, 4);
        let emitted: usize = trace.segments.iter().map(|s| s.tokens.len()).sum();
        assert_eq!(emitted, tokens.len());
        for st in &trace.segments {
            assert_eq!(st.scores.len(), 2);
            assert!(!st.selected.is_empty());
            assert!(st.selected.iter().all(|&i| i < 2));
        }
    }

    #[test]
    fn single_segment_budget_yields_one_selection_event() {
        let model = Model::new(cfg(ModelKind::Seal));
        let ex = example(&[&[5, 6, 7], &[8, 9, 10]], &[5, 8, 6]);
        // max_len equal to the segment length: exactly one selection event.
        let (_, trace) = greedy_decode_segmentwise(&model, &ex, 4).unwrap();
        assert_eq!(trace.segments.len(), 1);
    }
}
