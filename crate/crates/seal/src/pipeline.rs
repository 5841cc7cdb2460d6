//! End-to-end pipeline stages (preprocess, label, train, eval, decode,
//! inspect) with content-hash caching of intermediate files.
//!
//! Every stage writes a `.stamp` sidecar recording a hash of its inputs and
//! of each output it produced. A stage re-runs only when that stamp no
//! longer matches; a consumer that finds a producer's output modified on
//! disk halts with the consuming stage's name.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{hex, RunConfig};
use crate::labels::{proxy_labels, segment_labels, LabelMatrix};
use crate::model::{Model, ModelError, ModelKind};
use crate::text::{load_all, DataError, PreprocessOpts, SnippetizedExample, Vocab};
use crate::train::{
    enrich_trace, evaluate, export_trace, greedy_decode, greedy_decode_segmentwise,
    load_checkpoint, run_training, save_checkpoint, TraceExport, TraceFormat, TrainError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Preprocess,
    Label,
    Train,
    Eval,
    Decode,
    Inspect,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Preprocess => "preprocess",
            Stage::Label => "label",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Decode => "decode",
            Stage::Inspect => "inspect",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage {stage}: missing configuration: {what}")]
    MissingConfig { stage: Stage, what: String },
    #[error("stage {stage}: input {file} is corrupted or was modified after its producing stage")]
    CorruptInput { stage: Stage, file: String },
    #[error("stage {stage}: {source}")]
    Data {
        stage: Stage,
        #[source]
        source: DataError,
    },
    #[error("stage {stage}: {source}")]
    Model {
        stage: Stage,
        #[source]
        source: ModelError,
    },
    #[error("stage {stage}: {source}")]
    Train {
        stage: Stage,
        #[source]
        source: TrainError,
    },
    #[error("stage {stage}: checkpoint: {source}")]
    Checkpoint {
        stage: Stage,
        #[source]
        source: crate::numerics::CheckpointError,
    },
    #[error("stage {stage}: io: {source}")]
    Io {
        stage: Stage,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary has {vocab} entries but model vocab_size is {model}")]
    VocabTooLarge { vocab: usize, model: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub cached: bool,
}

/// Well-known file layout inside the working directory.
pub struct Layout {
    pub workdir: PathBuf,
}

impl Layout {
    pub fn new(workdir: &Path) -> Self {
        Layout { workdir: workdir.to_path_buf() }
    }
    pub fn vocab(&self) -> PathBuf {
        self.workdir.join("vocab.txt")
    }
    pub fn train_data(&self) -> PathBuf {
        self.workdir.join("train.jsonl")
    }
    pub fn eval_data(&self) -> PathBuf {
        self.workdir.join("eval.jsonl")
    }
    pub fn labels(&self) -> PathBuf {
        self.workdir.join("labels.jsonl")
    }
    pub fn ckpt(&self) -> PathBuf {
        self.workdir.join("ckpt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.workdir.join("metrics.jsonl")
    }
    pub fn eval_report(&self) -> PathBuf {
        self.workdir.join("eval_report.json")
    }
    pub fn decoded(&self) -> PathBuf {
        self.workdir.join("decoded.jsonl")
    }
    pub fn trace(&self) -> PathBuf {
        self.workdir.join("trace.jsonl")
    }
    pub fn trace_html(&self) -> PathBuf {
        self.workdir.join("trace.html")
    }
    fn stamp(&self, stage: Stage) -> PathBuf {
        self.workdir.join(format!("{stage}.stamp"))
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Stamp {
    inputs: String,
    outputs: Vec<(String, String)>,
}

fn hash_file(path: &Path) -> std::io::Result<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

fn hash_parts(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex(&h.finalize())
}

/// Serializes preprocessed examples one JSON object per line.
pub fn write_examples(path: &Path, examples: &[SnippetizedExample]) -> std::io::Result<()> {
    let mut out = fs::File::create(path)?;
    for ex in examples {
        serde_json::to_writer(&mut out, ex).map_err(std::io::Error::other)?;
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_examples(path: &Path) -> Result<Vec<SnippetizedExample>, DataError> {
    let file = fs::File::open(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: SnippetizedExample = serde_json::from_str(&line)
            .map_err(|e| DataError::BadLine { line: i + 1, msg: e.to_string() })?;
        out.push(ex);
    }
    Ok(out)
}

/// Builds the vocabulary if `vocab_path` does not exist yet, then tokenizes
/// and snippetizes the corpus into `out`.
pub fn preprocess_corpus(
    input: &Path,
    vocab_path: &Path,
    vocab_max: usize,
    opts: PreprocessOpts,
    out: &Path,
) -> Result<usize, DataError> {
    let vocab = if vocab_path.exists() {
        Vocab::load(vocab_path)?
    } else {
        let v = Vocab::build(crate::text::corpus_texts(input)?.into_iter(), vocab_max)?;
        v.save(vocab_path)?;
        v
    };
    let examples = load_all(input, &vocab, opts)?;
    write_examples(out, &examples)
        .map_err(|source| DataError::Io { path: out.display().to_string(), source })?;
    Ok(examples.len())
}

/// Label record aligned 1:1 with the preprocessed examples.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct LabelRecord {
    pub id: usize,
    pub labels: LabelMatrix,
}

struct StageCtx<'c> {
    cfg: &'c RunConfig,
    layout: Layout,
}

impl<'c> StageCtx<'c> {
    fn io(&self, stage: Stage) -> impl Fn(std::io::Error) -> PipelineError + '_ {
        move |source| PipelineError::Io { stage, source }
    }

    /// Checks that an intermediate consumed by `stage` still matches the
    /// hash its producer recorded.
    fn check_intact(&self, stage: Stage, producer: Stage, file: &Path) -> Result<(), PipelineError> {
        let stamp_path = self.layout.stamp(producer);
        let Ok(body) = fs::read_to_string(&stamp_path) else {
            return Ok(());
        };
        let Ok(stamp) = serde_json::from_str::<Stamp>(&body) else {
            return Ok(());
        };
        let name = file.display().to_string();
        if let Some((_, recorded)) = stamp.outputs.iter().find(|(f, _)| *f == name) {
            let current = hash_file(file).map_err(self.io(stage))?;
            if &current != recorded {
                return Err(PipelineError::CorruptInput { stage, file: name });
            }
        }
        Ok(())
    }

    fn is_cached(&self, stage: Stage, inputs: &str, outputs: &[PathBuf]) -> bool {
        let Ok(body) = fs::read_to_string(self.layout.stamp(stage)) else { return false };
        let Ok(stamp) = serde_json::from_str::<Stamp>(&body) else { return false };
        if stamp.inputs != inputs {
            return false;
        }
        for out in outputs {
            let name = out.display().to_string();
            let Some((_, recorded)) = stamp.outputs.iter().find(|(f, _)| *f == name) else {
                return false;
            };
            match hash_file(out) {
                Ok(h) if &h == recorded => {}
                _ => return false,
            }
        }
        true
    }

    fn write_stamp(&self, stage: Stage, inputs: &str, outputs: &[PathBuf]) -> Result<(), PipelineError> {
        let mut recorded = Vec::new();
        for out in outputs {
            recorded.push((out.display().to_string(), hash_file(out).map_err(self.io(stage))?));
        }
        let stamp = Stamp { inputs: inputs.to_string(), outputs: recorded };
        fs::write(self.layout.stamp(stage), serde_json::to_string_pretty(&stamp).unwrap())
            .map_err(self.io(stage))
    }

    fn require<'a, T>(&self, stage: Stage, what: &str, v: &'a Option<T>) -> Result<&'a T, PipelineError> {
        v.as_ref().ok_or_else(|| PipelineError::MissingConfig { stage, what: what.to_string() })
    }
}

/// Executes the stages in order; each stage is skipped when its stamp still
/// matches its inputs and outputs.
pub fn run_pipeline(stages: &[Stage], cfg: &RunConfig) -> Result<Vec<StageOutcome>, PipelineError> {
    let workdir = cfg.paths.workdir.clone().ok_or(PipelineError::MissingConfig {
        stage: stages.first().copied().unwrap_or(Stage::Preprocess),
        what: "paths.workdir".to_string(),
    })?;
    fs::create_dir_all(&workdir)
        .map_err(|source| PipelineError::Io { stage: Stage::Preprocess, source })?;
    let ctx = StageCtx { cfg, layout: Layout::new(&workdir) };
    let mut outcomes = Vec::with_capacity(stages.len());
    for &stage in stages {
        let cached = match stage {
            Stage::Preprocess => stage_preprocess(&ctx)?,
            Stage::Label => stage_label(&ctx)?,
            Stage::Train => stage_train(&ctx)?,
            Stage::Eval => stage_eval(&ctx)?,
            Stage::Decode => stage_decode(&ctx)?,
            Stage::Inspect => stage_inspect(&ctx)?,
        };
        outcomes.push(StageOutcome { stage, cached });
    }
    Ok(outcomes)
}

fn stage_preprocess(ctx: &StageCtx) -> Result<bool, PipelineError> {
    let stage = Stage::Preprocess;
    let input = ctx.require(stage, "paths.input", &ctx.cfg.paths.input)?.clone();
    let eval_input = ctx.cfg.paths.eval_input.clone().unwrap_or_else(|| input.clone());
    let m = &ctx.cfg.model;
    let opts = PreprocessOpts {
        max_snippet_len: m.max_snippet_len,
        max_snippets: m.max_snippets,
        max_decode_len: m.max_decode_len,
    };
    let input_bytes = fs::read(&input).map_err(ctx.io(stage))?;
    let eval_bytes = fs::read(&eval_input).map_err(ctx.io(stage))?;
    let key = hash_parts(&[
        b"preprocess",
        format!("{}:{}:{}:{}", m.max_snippet_len, m.max_snippets, m.max_decode_len, m.vocab_size)
            .as_bytes(),
        &input_bytes,
        &eval_bytes,
    ]);
    let outputs = [ctx.layout.vocab(), ctx.layout.train_data(), ctx.layout.eval_data()];
    if ctx.is_cached(stage, &key, &outputs) {
        return Ok(true);
    }
    // Vocabulary rebuilds with the data: a stale one invalidates the stamp.
    let _ = fs::remove_file(ctx.layout.vocab());
    preprocess_corpus(&input, &ctx.layout.vocab(), m.vocab_size, opts, &ctx.layout.train_data())
        .map_err(|source| PipelineError::Data { stage, source })?;
    let vocab = Vocab::load(&ctx.layout.vocab())
        .map_err(|source| PipelineError::Data { stage, source })?;
    if vocab.size() > m.vocab_size {
        return Err(PipelineError::VocabTooLarge { vocab: vocab.size(), model: m.vocab_size });
    }
    let eval_examples = load_all(&eval_input, &vocab, opts)
        .map_err(|source| PipelineError::Data { stage, source })?;
    write_examples(&ctx.layout.eval_data(), &eval_examples).map_err(ctx.io(stage))?;
    ctx.write_stamp(stage, &key, &outputs)?;
    Ok(false)
}

fn stage_label(ctx: &StageCtx) -> Result<bool, PipelineError> {
    let stage = Stage::Label;
    let data_path = ctx.layout.train_data();
    ctx.check_intact(stage, Stage::Preprocess, &data_path)?;
    let data_bytes = fs::read(&data_path).map_err(ctx.io(stage))?;
    let m = &ctx.cfg.model;
    let label_cfg = serde_json::to_string(&ctx.cfg.train.labels).unwrap();
    let key = hash_parts(&[
        b"label",
        label_cfg.as_bytes(),
        format!("{}:{}:{}", m.kind, m.segment_len, m.max_segments).as_bytes(),
        &data_bytes,
    ]);
    let outputs = [ctx.layout.labels()];
    if ctx.is_cached(stage, &key, &outputs) {
        return Ok(true);
    }
    let examples = read_examples(&data_path).map_err(|source| PipelineError::Data { stage, source })?;
    let mut out = fs::File::create(ctx.layout.labels()).map_err(ctx.io(stage))?;
    for ex in &examples {
        let n = ex.snippets.len().min(m.max_snippets);
        let snips = &ex.snippets[..n];
        let labels = if snips.is_empty() {
            LabelMatrix::vector(vec![])
        } else if m.kind == ModelKind::Seal {
            segment_labels(snips, ex.target_body(), m.segment_len, m.max_segments, &ctx.cfg.train.labels)
        } else {
            proxy_labels(snips, ex.summary_tokens(), &ctx.cfg.train.labels)
        };
        serde_json::to_writer(&mut out, &LabelRecord { id: ex.id, labels })
            .map_err(std::io::Error::other)
            .map_err(ctx.io(stage))?;
        writeln!(out).map_err(ctx.io(stage))?;
    }
    ctx.write_stamp(stage, &key, &outputs)?;
    Ok(false)
}

fn stage_train(ctx: &StageCtx) -> Result<bool, PipelineError> {
    let stage = Stage::Train;
    let data_path = ctx.layout.train_data();
    ctx.check_intact(stage, Stage::Preprocess, &data_path)?;
    let data_bytes = fs::read(&data_path).map_err(ctx.io(stage))?;
    let cfg_json = serde_json::to_string(&(&ctx.cfg.model, &ctx.cfg.train)).unwrap();
    let key = hash_parts(&[b"train", cfg_json.as_bytes(), &data_bytes]);
    let outputs = [
        ctx.layout.ckpt().join("params.bin"),
        ctx.layout.ckpt().join("manifest.json"),
        ctx.layout.ckpt().join("config.json"),
        ctx.layout.metrics(),
    ];
    if ctx.is_cached(stage, &key, &outputs) {
        return Ok(true);
    }
    let examples = read_examples(&data_path).map_err(|source| PipelineError::Data { stage, source })?;
    let mut model = Model::new(ctx.cfg.model.clone());
    let mut metrics = fs::File::create(ctx.layout.metrics()).map_err(ctx.io(stage))?;
    run_training(&mut model, &ctx.cfg.train, &examples, Some(&mut metrics))
        .map_err(|source| PipelineError::Train { stage, source })?;
    save_checkpoint(&model, &ctx.layout.ckpt(), &ctx.cfg.content_hash(), ctx.cfg.train.max_steps)
        .map_err(|source| PipelineError::Checkpoint { stage, source })?;
    fs::write(
        ctx.layout.ckpt().join("config.json"),
        serde_json::to_string_pretty(ctx.cfg).unwrap(),
    )
    .map_err(ctx.io(stage))?;
    ctx.write_stamp(stage, &key, &outputs)?;
    Ok(false)
}

fn load_trained_model(ctx: &StageCtx, stage: Stage) -> Result<Model, PipelineError> {
    let mut model = Model::new(ctx.cfg.model.clone());
    load_checkpoint(&mut model, &ctx.layout.ckpt())
        .map_err(|source| PipelineError::Checkpoint { stage, source })?;
    Ok(model)
}

fn stage_eval(ctx: &StageCtx) -> Result<bool, PipelineError> {
    let stage = Stage::Eval;
    let data_path = ctx.layout.eval_data();
    ctx.check_intact(stage, Stage::Preprocess, &data_path)?;
    ctx.check_intact(stage, Stage::Train, &ctx.layout.ckpt().join("params.bin"))?;
    let data_bytes = fs::read(&data_path).map_err(ctx.io(stage))?;
    let ckpt_bytes = fs::read(ctx.layout.ckpt().join("params.bin")).map_err(ctx.io(stage))?;
    let key = hash_parts(&[b"eval", &data_bytes, &ckpt_bytes]);
    let outputs = [ctx.layout.eval_report()];
    if ctx.is_cached(stage, &key, &outputs) {
        return Ok(true);
    }
    let examples = read_examples(&data_path).map_err(|source| PipelineError::Data { stage, source })?;
    let vocab = Vocab::load(&ctx.layout.vocab()).map_err(|source| PipelineError::Data { stage, source })?;
    let model = load_trained_model(ctx, stage)?;
    let report = evaluate(&model, &examples, &vocab)
        .map_err(|source| PipelineError::Model { stage, source })?;
    fs::write(ctx.layout.eval_report(), serde_json::to_string_pretty(&report).unwrap())
        .map_err(ctx.io(stage))?;
    ctx.write_stamp(stage, &key, &outputs)?;
    Ok(false)
}

fn stage_decode(ctx: &StageCtx) -> Result<bool, PipelineError> {
    let stage = Stage::Decode;
    let data_path = ctx.layout.eval_data();
    ctx.check_intact(stage, Stage::Preprocess, &data_path)?;
    ctx.check_intact(stage, Stage::Train, &ctx.layout.ckpt().join("params.bin"))?;
    let data_bytes = fs::read(&data_path).map_err(ctx.io(stage))?;
    let ckpt_bytes = fs::read(ctx.layout.ckpt().join("params.bin")).map_err(ctx.io(stage))?;
    let key = hash_parts(&[b"decode", &data_bytes, &ckpt_bytes]);
    let seal = ctx.cfg.model.kind == ModelKind::Seal;
    let mut outputs = vec![ctx.layout.decoded()];
    if seal {
        outputs.push(ctx.layout.trace());
    }
    if ctx.is_cached(stage, &key, &outputs) {
        return Ok(true);
    }
    let examples = read_examples(&data_path).map_err(|source| PipelineError::Data { stage, source })?;
    let vocab = Vocab::load(&ctx.layout.vocab()).map_err(|source| PipelineError::Data { stage, source })?;
    let model = load_trained_model(ctx, stage)?;
    decode_corpus(&model, &examples, &vocab, &ctx.layout.decoded(), seal.then(|| ctx.layout.trace()).as_deref())
        .map_err(|e| match e {
            DecodeCorpusError::Model(source) => PipelineError::Model { stage, source },
            DecodeCorpusError::Io(source) => PipelineError::Io { stage, source },
        })?;
    ctx.write_stamp(stage, &key, &outputs)?;
    Ok(false)
}

fn stage_inspect(ctx: &StageCtx) -> Result<bool, PipelineError> {
    let stage = Stage::Inspect;
    let trace_path = ctx.layout.trace();
    if !trace_path.exists() {
        return Err(PipelineError::MissingConfig {
            stage,
            what: "a selection trace (decode stage with a seal model)".to_string(),
        });
    }
    ctx.check_intact(stage, Stage::Decode, &trace_path)?;
    let trace_bytes = fs::read(&trace_path).map_err(ctx.io(stage))?;
    let key = hash_parts(&[b"inspect", &trace_bytes]);
    let outputs = [ctx.layout.trace_html()];
    if ctx.is_cached(stage, &key, &outputs) {
        return Ok(true);
    }
    let html = render_trace_file(&trace_path).map_err(ctx.io(stage))?;
    fs::write(ctx.layout.trace_html(), html).map_err(ctx.io(stage))?;
    ctx.write_stamp(stage, &key, &outputs)?;
    Ok(false)
}

#[derive(Debug)]
pub enum DecodeCorpusError {
    Model(ModelError),
    Io(std::io::Error),
}

/// Decoded line format: example id plus tokens and text.
#[derive(Debug, Serialize, Deserialize)]
pub struct DecodedRecord {
    pub id: usize,
    pub tokens: Vec<u32>,
    pub text: String,
}

/// Greedy-decodes a corpus, writing decoded summaries and, when requested,
/// one enriched trace per line.
pub fn decode_corpus(
    model: &Model,
    examples: &[SnippetizedExample],
    vocab: &Vocab,
    decoded_out: &Path,
    trace_out: Option<&Path>,
) -> Result<(), DecodeCorpusError> {
    let mut out = fs::File::create(decoded_out).map_err(DecodeCorpusError::Io)?;
    let mut trace_file = match trace_out {
        Some(p) => Some(fs::File::create(p).map_err(DecodeCorpusError::Io)?),
        None => None,
    };
    let max_len = model.cfg().max_decode_len;
    for ex in examples {
        let tokens = if model.cfg().kind == ModelKind::Seal {
            let (tokens, trace) =
                greedy_decode_segmentwise(model, ex, max_len).map_err(DecodeCorpusError::Model)?;
            if let Some(tf) = trace_file.as_mut() {
                let export = enrich_trace(&trace, ex, vocab);
                serde_json::to_writer(&mut *tf, &export)
                    .map_err(std::io::Error::other)
                    .map_err(DecodeCorpusError::Io)?;
                writeln!(tf).map_err(DecodeCorpusError::Io)?;
            }
            tokens
        } else {
            greedy_decode(model, ex, max_len).map_err(DecodeCorpusError::Model)?
        };
        let rec = DecodedRecord { id: ex.id, text: vocab.detokenize(&tokens), tokens };
        serde_json::to_writer(&mut out, &rec)
            .map_err(std::io::Error::other)
            .map_err(DecodeCorpusError::Io)?;
        writeln!(out).map_err(DecodeCorpusError::Io)?;
    }
    Ok(())
}

/// Renders every trace line of a JSONL trace file into one HTML document.
pub fn render_trace_file(path: &Path) -> std::io::Result<String> {
    let body = fs::read_to_string(path)?;
    let mut html = String::new();
    for line in body.lines().filter(|l| !l.trim().is_empty()) {
        let export: TraceExport = serde_json::from_str(line).map_err(std::io::Error::other)?;
        html.push_str(&crate::train::render_html(&export));
        html.push('\n');
    }
    Ok(html)
}

/// JSON/HTML writer for a single trace (library form of the `inspect`
/// output).
pub fn export_single_trace(
    export: &TraceExport,
    format: TraceFormat,
    path: &Path,
) -> std::io::Result<()> {
    export_trace(export, format, path)
}
