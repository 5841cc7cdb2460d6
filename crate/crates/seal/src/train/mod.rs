//! Losses, the optimizer loop, greedy decoding, evaluation, and trace
//! export.
//!
//! Training minimizes the sum of the abstractive loss (teacher-forced token
//! cross-entropy) and, for the gated architectures, the extractive loss
//! (mean squared error between predicted snippet scores and ROUGE proxy
//! labels).

mod decode;
mod eval;
mod trace;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use decode::{greedy_decode, greedy_decode_segmentwise, DecodeTrace, SegmentTrace};
pub use eval::{evaluate, score_pair, split_token_sentences, EvalReport};
pub use trace::{enrich_trace, export_trace, render_html, SegmentExport, SnippetExport, TraceExport, TraceFormat};

use crate::labels::{proxy_labels, segment_labels, LabelConfig, LabelMatrix};
use crate::model::{Model, ModelError, ModelKind, TeacherSeq};
use crate::numerics::{concat_rows, Checkpoint, CheckpointError, Var};
use crate::text::SnippetizedExample;
use crate::{Real, Tape, Tensor};

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Schedule {
    Constant { lr: f64 },
    /// Linear warmup to `lr`, then decay proportional to 1/sqrt(step).
    Rsqrt { lr: f64, warmup: u64 },
}

pub fn lr_at(schedule: Schedule, step: u64) -> f64 {
    match schedule {
        Schedule::Constant { lr } => lr,
        Schedule::Rsqrt { lr, warmup } => {
            let w = warmup.max(1) as f64;
            let s = step.max(1) as f64;
            lr * (s / w).min((w / s).sqrt())
        }
    }
}

/// Relative weights of the two training losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub abstractive: f64,
    pub extractive: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { abstractive: 1.0, extractive: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub schedule: Schedule,
    pub dropout: f64,
    pub max_steps: u64,
    pub seed: u64,
    #[serde(default)]
    pub labels: LabelConfig,
    #[serde(default)]
    pub loss_weights: LossWeights,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("metrics log write failed: {0}")]
    Log(#[from] std::io::Error),
    #[error("training requires a non-empty dataset")]
    EmptyDataset,
}

/// Per-step scalars, one JSON line each in the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub l_a: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_e: Option<f64>,
    pub total: f64,
}

/// Mean token cross-entropy over non-pad target positions.
pub fn abstractive_loss<'t>(
    logits: Var<'t, Real>,
    targets: &[u32],
    pad_mask: &[bool],
) -> Var<'t, Real> {
    let ids: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    logits.cross_entropy_mean(&ids, pad_mask)
}

/// Mean squared error between predicted scores `{s_i}` and proxy labels
/// `{l_i}`.
pub fn extractive_loss_ea<'t>(scores: Var<'t, Real>, labels: &LabelMatrix) -> Var<'t, Real> {
    assert_eq!(labels.segment_count, 1, "vector labels expected");
    assert!(labels.snippet_count > 0, "extractive loss over zero snippets");
    assert_eq!(scores.shape(), vec![labels.snippet_count], "score/label length mismatch");
    scores.mse(&Tensor::new(vec![labels.snippet_count], labels.values.clone()))
}

/// Mean squared error over the full `n x m` score/label matrix, from the
/// per-segment score vectors in segment order.
pub fn extractive_loss_seal<'t>(
    segment_scores: &[Var<'t, Real>],
    labels: &LabelMatrix,
) -> Var<'t, Real> {
    assert!(!segment_scores.is_empty(), "extractive loss over zero segments");
    assert_eq!(segment_scores.len(), labels.segment_count, "segment count mismatch");
    let stacked = concat_rows(segment_scores);
    assert_eq!(
        stacked.shape(),
        vec![labels.snippet_count * labels.segment_count],
        "score/label shape mismatch"
    );
    stacked.mse(&Tensor::new(vec![labels.values.len()], labels.values.clone()))
}

/// Forward pass plus loss composition for one example. Returns the weighted
/// total and the component values.
pub fn example_losses<'s, 't>(
    model: &'s Model,
    f: &crate::model::Fwd<'s, 't>,
    example: &SnippetizedExample,
    label_cfg: &LabelConfig,
    weights: LossWeights,
) -> Result<(Var<'t, Real>, f64, Option<f64>), ModelError> {
    let kind = model.cfg().kind;
    match kind {
        ModelKind::Trunc | ModelKind::Ca => {
            let teacher = TeacherSeq::from_target(&example.target);
            let out = match kind {
                ModelKind::Trunc => model.forward_trunc(f, example, &teacher)?,
                _ => model.forward_ca(f, example, &teacher)?,
            };
            let la = abstractive_loss(out.logits, &teacher.labels, &teacher.keep);
            let la_v = la.value().item();
            Ok((la.scale(weights.abstractive), la_v, None))
        }
        ModelKind::Ea => {
            let teacher = TeacherSeq::from_target(&example.target);
            let out = model.forward_ea(f, example, &teacher, None)?;
            let la = abstractive_loss(out.logits, &teacher.labels, &teacher.keep);
            let lbl = proxy_labels(model.budget_snippets(example), example.summary_tokens(), label_cfg);
            let le = extractive_loss_ea(out.scorer.scores, &lbl);
            let (la_v, le_v) = (la.value().item(), le.value().item());
            let total = la.scale(weights.abstractive).add(le.scale(weights.extractive));
            Ok((total, la_v, Some(le_v)))
        }
        ModelKind::Seal => {
            let cfg = model.cfg();
            let teacher = TeacherSeq::from_target_padded(&example.target, cfg.max_decode_len);
            let out = model.forward_seal_training(f, example, &teacher)?;
            let la = abstractive_loss(out.logits, &teacher.labels, &teacher.keep);
            let lbl = segment_labels(
                model.budget_snippets(example),
                example.target_body(),
                cfg.segment_len,
                cfg.max_segments,
                label_cfg,
            );
            let seg_scores: Vec<Var<'t, Real>> =
                out.segments.iter().map(|s| s.scorer.scores).collect();
            let le = extractive_loss_seal(&seg_scores, &lbl);
            let (la_v, le_v) = (la.value().item(), le.value().item());
            let total = la.scale(weights.abstractive).add(le.scale(weights.extractive));
            Ok((total, la_v, Some(le_v)))
        }
    }
}

fn dropout_seed(seed: u64, step: u64, example: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(step.wrapping_mul(0x100_0193))
        .wrapping_add(example as u64)
}

/// One optimizer step over a batch. Examples run on independent tapes (in
/// parallel); gradients reduce in batch order, so results are independent of
/// scheduling. A non-finite loss panics with the producing operation in the
/// message.
pub fn train_step(
    model: &mut Model,
    batch: &[&SnippetizedExample],
    step: u64,
    cfg: &TrainConfig,
) -> Result<StepStats, TrainError> {
    assert!(!batch.is_empty(), "empty batch");
    struct ExampleGrad {
        grads: Vec<Option<Tensor>>,
        la: f64,
        le: Option<f64>,
        total: f64,
    }
    let results: Vec<Result<ExampleGrad, ModelError>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let tape = Tape::new();
            let f = model.fwd_train(&tape, cfg.dropout, dropout_seed(cfg.seed, step, i));
            let (total, la, le) = example_losses(model, &f, ex, &cfg.labels, cfg.loss_weights)?;
            let total_v = total.value().item();
            let grads = tape.backward(total);
            Ok(ExampleGrad { grads: f.params.extract(&grads), la, le, total: total_v })
        })
        .collect();

    let scale = 1.0 / batch.len() as f64;
    let mut stats = StepStats { step, l_a: 0.0, l_e: None, total: 0.0 };
    for r in results {
        let r = r?;
        model.store.accumulate(&r.grads, scale);
        stats.l_a += r.la * scale;
        stats.total += r.total * scale;
        if let Some(le) = r.le {
            *stats.l_e.get_or_insert(0.0) += le * scale;
        }
    }
    model.store.adam_step(lr_at(cfg.schedule, step), 0.9, 0.999, 1e-8, step);
    model.store.zero_grads();
    Ok(stats)
}

/// Deterministic training loop: seeded shuffle per epoch, fixed batch
/// boundaries, one metrics line per step.
pub fn run_training(
    model: &mut Model,
    cfg: &TrainConfig,
    data: &[SnippetizedExample],
    mut metrics: Option<&mut dyn Write>,
) -> Result<Vec<StepStats>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.max_steps as usize);
    let mut step = 0u64;
    'training: loop {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&SnippetizedExample> = chunk.iter().map(|&i| &data[i]).collect();
            let stats = train_step(model, &batch, step, cfg)?;
            if let Some(w) = metrics.as_deref_mut() {
                serde_json::to_writer(&mut *w, &stats).map_err(std::io::Error::other)?;
                writeln!(w)?;
            }
            history.push(stats);
            if step >= cfg.max_steps {
                break 'training;
            }
        }
    }
    Ok(history)
}

/// Writes the parameter store and manifest under `dir`.
pub fn save_checkpoint(
    model: &Model,
    dir: &Path,
    config_hash: &str,
    step: u64,
) -> Result<(), CheckpointError> {
    let manifest = Checkpoint {
        config_hash: config_hash.to_string(),
        step,
        param_count: model.store.len(),
    };
    model.store.save(dir, &manifest)
}

/// Restores parameter values from a checkpoint directory into `model`.
pub fn load_checkpoint(model: &mut Model, dir: &Path) -> Result<Checkpoint, CheckpointError> {
    let (values, manifest) = crate::ParameterStore::load(dir)?;
    model.store.restore(&values)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::text::{Snippet, BOS, EOS};

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
            seed: 9,
            reduction_test: false,
        }
    }

    fn tcfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            schedule: Schedule::Constant { lr: 2e-3 },
            dropout: 0.0,
            max_steps: 30,
            seed: 5,
            labels: LabelConfig::default(),
            loss_weights: LossWeights::default(),
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
        SnippetizedExample { id: 0, snippets, target }
    }

    #[test]
    fn uniform_logits_cost_log_vocab() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[3, 4]));
        let loss = abstractive_loss(logits, &[0, 1, 2], &[true, true, true]);
        assert!((loss.value().item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_cost_nothing() {
        let tape = Tape::new();
        let mut t = Tensor::zeros(&[2, 4]);
        t.data_mut()[1] = 50.0;
        t.data_mut()[4 + 2] = 50.0;
        let logits = tape.leaf(t);
        let loss = abstractive_loss(logits, &[1, 2], &[true, true]);
        assert!(loss.value().item() < 1e-9);
    }

    #[test]
    fn extractive_losses_match_hand_mse() {
        let tape = Tape::new();
        let s = tape.leaf(Tensor::new(vec![1], vec![0.5]));
        let l = extractive_loss_ea(s, &LabelMatrix::vector(vec![0.0]));
        assert!((l.value().item() - 0.25).abs() < 1e-12);

        let s3 = tape.leaf(Tensor::new(vec![3], vec![0.1, 0.6, 0.9]));
        let lbl = LabelMatrix::vector(vec![0.2, 0.4, 1.0]);
        let l3 = extractive_loss_ea(s3, &lbl);
        let hand = (0.01 + 0.04 + 0.01) / 3.0;
        assert!((l3.value().item() - hand).abs() < 1e-12);

        // 2x2 matrix case, and the m=1 reduction to the vector loss.
        let a = tape.leaf(Tensor::new(vec![2], vec![0.3, 0.7]));
        let b = tape.leaf(Tensor::new(vec![2], vec![0.2, 0.1]));
        let m = LabelMatrix { snippet_count: 2, segment_count: 2, values: vec![0.0, 1.0, 0.5, 0.5] };
        let lm = extractive_loss_seal(&[a, b], &m);
        let hand =
            ((0.3f64).powi(2) + (0.7 - 1.0f64).powi(2) + (0.2 - 0.5f64).powi(2) + (0.1 - 0.5f64).powi(2))
                / 4.0;
        assert!((lm.value().item() - hand).abs() < 1e-12);

        let c = tape.leaf(Tensor::new(vec![2], vec![0.3, 0.7]));
        let v = LabelMatrix::vector(vec![0.0, 1.0]);
        let single = extractive_loss_seal(&[c], &v);
        let d = tape.leaf(Tensor::new(vec![2], vec![0.3, 0.7]));
        let vec_loss = extractive_loss_ea(d, &v);
        assert_eq!(single.value().item(), vec_loss.value().item());
    }

    #[test]
    fn loss_additivity_of_gradients() {
        // Gradients of l_a + l_e equal the sum of gradients from separate
        // backward passes over freshly built graphs.
        let model = Model::new(cfg(ModelKind::Ea));
        let ex = example(&[&[5, 6, 7], &[8, 9, 10]], &[5, 8, 6]);
        let weights = LossWeights::default();
        let lbl_cfg = LabelConfig::default();

        let joint = {
            let tape = Tape::new();
            let f = model.fwd(&tape);
            let (total, _, _) = example_losses(&model, &f, &ex, &lbl_cfg, weights).unwrap();
            let g = tape.backward(total);
            f.params.extract(&g)
        };
        let only = |wa: f64, we: f64| {
            let tape = Tape::new();
            let f = model.fwd(&tape);
            let (total, _, _) = example_losses(
                &model,
                &f,
                &ex,
                &lbl_cfg,
                LossWeights { abstractive: wa, extractive: we },
            )
            .unwrap();
            let g = tape.backward(total);
            f.params.extract(&g)
        };
        let ga = only(1.0, 0.0);
        let ge = only(0.0, 1.0);
        for ((j, a), e) in joint.iter().zip(&ga).zip(&ge) {
            let j = j.as_ref().map(|t| t.data().to_vec()).unwrap_or_default();
            let a = a.as_ref().map(|t| t.data().to_vec()).unwrap_or_default();
            let e = e.as_ref().map(|t| t.data().to_vec()).unwrap_or_default();
            if j.is_empty() {
                continue;
            }
            for i in 0..j.len() {
                let av = a.get(i).copied().unwrap_or(0.0);
                let ev = e.get(i).copied().unwrap_or(0.0);
                assert!((j[i] - (av + ev)).abs() < 1e-10, "{} vs {}", j[i], av + ev);
            }
        }
    }

    #[test]
    fn trunc_reports_no_extractive_loss() {
        let mut model = Model::new(cfg(ModelKind::Trunc));
        let ex = example(&[&[5, 6, 7]], &[5, 6]);
        let stats = train_step(&mut model, &[&ex], 1, &tcfg()).unwrap();
        assert!(stats.l_e.is_none());
        let json = serde_json::to_string(&stats).unwrap();
        assert!(!json.contains("l_e"), "{json}");
    }

    #[test]
    fn loss_decreases_when_memorizing() {
        for kind in [ModelKind::Trunc, ModelKind::Ea] {
            let mut model = Model::new(cfg(kind));
            let data = vec![
                example(&[&[5, 6, 7], &[8, 9]], &[5, 8]),
                example(&[&[10, 11], &[12, 13]], &[12, 10]),
            ];
            let mut tc = tcfg();
            tc.max_steps = 60;
            tc.schedule = Schedule::Constant { lr: 5e-3 };
            let history = run_training(&mut model, &tc, &data, None).unwrap();
            let first = history.first().unwrap().l_a;
            let last = history.last().unwrap().l_a;
            assert!(last < first * 0.5, "{kind}: {first} -> {last}");
        }
    }

    #[test]
    fn identically_seeded_runs_are_bit_identical() {
        let run = || {
            let mut model = Model::new(cfg(ModelKind::Seal));
            let data = vec![
                example(&[&[5, 6, 7], &[8, 9]], &[5, 8, 9, 6, 7]),
                example(&[&[10, 11], &[12, 13]], &[12, 10, 11]),
            ];
            let mut tc = tcfg();
            tc.max_steps = 8;
            tc.dropout = 0.1;
            let mut log = Vec::new();
            let history = run_training(&mut model, &tc, &data, Some(&mut log)).unwrap();
            let w = model.store.value("enc.l0.attn.wq").clone();
            (history, log, w)
        };
        let (h1, l1, w1) = run();
        let (h2, l2, w2) = run();
        assert_eq!(h1, h2);
        assert_eq!(l1, l2);
        assert!(w1.data().iter().zip(w2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn schedule_shapes() {
        assert_eq!(lr_at(Schedule::Constant { lr: 0.5 }, 10), 0.5);
        let s = Schedule::Rsqrt { lr: 0.01, warmup: 100 };
        assert!((lr_at(s, 100) - 0.01).abs() < 1e-12);
        assert!((lr_at(s, 25) - 0.0025).abs() < 1e-12);
        assert!((lr_at(s, 400) - 0.005).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_through_model() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::new(cfg(ModelKind::Ea));
        let ex = example(&[&[5, 6, 7]], &[5, 6]);
        train_step(&mut model, &[&ex], 1, &tcfg()).unwrap();
        save_checkpoint(&model, dir.path(), "deadbeef", 1).unwrap();

        let mut fresh = Model::new(cfg(ModelKind::Ea));
        let manifest = load_checkpoint(&mut fresh, dir.path()).unwrap();
        assert_eq!(manifest.step, 1);
        assert_eq!(manifest.config_hash, "deadbeef");
        assert_eq!(
            model.store.value("scorer.head.w"),
            fresh.store.value("scorer.head.w")
        );
    }
}
