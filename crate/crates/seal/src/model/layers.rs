//! Shared Transformer sublayers built on the gradient tape: multi-head
//! attention, feed-forward, pre-norm blocks, attention pooling, and
//! sinusoidal positions.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::numerics::{concat_cols, Var};
use crate::{Real, Tensor};

use super::Fwd;

pub const LN_EPS: f64 = 1e-6;

/// Inverted dropout driven by a deterministic stream; `off` is the identity
/// and is used for every equivalence and gradient test.
pub struct Dropout {
    rate: f64,
    rng: Option<RefCell<ChaCha20Rng>>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, seed: u64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        if rate == 0.0 {
            return Self::off();
        }
        Dropout { rate, rng: Some(RefCell::new(ChaCha20Rng::seed_from_u64(seed))) }
    }

    pub fn apply<'t>(&self, x: Var<'t, Real>) -> Var<'t, Real> {
        let Some(rng) = &self.rng else { return x };
        let keep = 1.0 - self.rate;
        let mut rng = rng.borrow_mut();
        let shape = x.shape();
        let numel: usize = shape.iter().product();
        let data: Vec<Real> = (0..numel)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        x.mul_const(&Tensor::new(shape, data))
    }
}

/// Sinusoidal positional encodings, `[len, d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = rate.sin();
            if 2 * i + 1 < d {
                data[pos * d + 2 * i + 1] = rate.cos();
            }
        }
    }
    Tensor::new(vec![len, d], data)
}

/// All-ones attention mask `[rows, cols]`.
pub fn full_mask(rows: usize, cols: usize) -> Tensor {
    Tensor::filled(&[rows, cols], 1.0)
}

/// Lower-triangular causal mask `[t, t]`.
pub fn causal_mask(t: usize) -> Tensor {
    let mut data = vec![0.0; t * t];
    for q in 0..t {
        for k in 0..=q {
            data[q * t + k] = 1.0;
        }
    }
    Tensor::new(vec![t, t], data)
}

/// Mask `[rows, cols]` admitting only key positions marked valid.
pub fn key_mask(rows: usize, valid: &[bool]) -> Tensor {
    let cols = valid.len();
    let mut data = vec![0.0; rows * cols];
    for q in 0..rows {
        for (k, &ok) in valid.iter().enumerate() {
            if ok {
                data[q * cols + k] = 1.0;
            }
        }
    }
    Tensor::new(vec![rows, cols], data)
}

/// Layer normalization with learned affine parameters `{prefix}.g/.b`.
pub fn layer_norm<'t>(f: &Fwd<'_, 't>, prefix: &str, x: Var<'t, Real>) -> Var<'t, Real> {
    let g = f.params.get(&format!("{prefix}.g"));
    let b = f.params.get(&format!("{prefix}.b"));
    x.layer_norm_core(LN_EPS).mul_row(g).add_row(b)
}

/// Position-wise feed-forward with ReLU, parameters under `{prefix}`.
pub fn feed_forward<'t>(f: &Fwd<'_, 't>, prefix: &str, x: Var<'t, Real>) -> Var<'t, Real> {
    let w1 = f.params.get(&format!("{prefix}.w1"));
    let b1 = f.params.get(&format!("{prefix}.b1"));
    let w2 = f.params.get(&format!("{prefix}.w2"));
    let b2 = f.params.get(&format!("{prefix}.b2"));
    x.matmul(w1).add_row(b1).relu().matmul(w2).add_row(b2)
}

/// Multi-head scaled dot-product attention.
///
/// `queries` is `[m, d]`, `memory` is `[n, d]`, `mask` is `[m, n]` over key
/// positions. Heads are column slices of the joint projections.
pub fn multi_head_attention<'t>(
    f: &Fwd<'_, 't>,
    prefix: &str,
    queries: Var<'t, Real>,
    memory: Var<'t, Real>,
    mask: &Tensor,
    heads: usize,
) -> Var<'t, Real> {
    let d = queries.shape()[1];
    assert_eq!(d % heads, 0, "head count {heads} must divide d_model {d}");
    let dh = d / heads;
    let get = |suffix: &str| f.params.get(&format!("{prefix}.{suffix}"));
    let q = queries.matmul(get("wq")).add_row(get("bq"));
    let k = memory.matmul(get("wk")).add_row(get("bk"));
    let v = memory.matmul(get("wv")).add_row(get("bv"));

    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, dh);
        let kh = k.slice_cols(h * dh, dh);
        let vh = v.slice_cols(h * dh, dh);
        let scores = qh.matmul(kh.transpose()).scale(1.0 / (dh as f64).sqrt());
        let probs = f.dropout.apply(scores.masked_softmax(mask));
        contexts.push(probs.matmul(vh));
    }
    let merged = if heads == 1 { contexts[0] } else { concat_cols(&contexts) };
    merged.matmul(get("wo")).add_row(get("bo"))
}

/// Pre-norm encoder stack under `{prefix}` with a final layer norm.
pub fn encoder_stack<'t>(
    f: &Fwd<'_, 't>,
    prefix: &str,
    layers: usize,
    heads: usize,
    mut x: Var<'t, Real>,
    self_mask: &Tensor,
) -> Var<'t, Real> {
    for l in 0..layers {
        let p = format!("{prefix}.l{l}");
        let a = layer_norm(f, &format!("{p}.ln1"), x);
        x = x.add(f.dropout.apply(multi_head_attention(f, &format!("{p}.attn"), a, a, self_mask, heads)));
        let b = layer_norm(f, &format!("{p}.ln2"), x);
        x = x.add(f.dropout.apply(feed_forward(f, &format!("{p}.ffn"), b)));
    }
    layer_norm(f, &format!("{prefix}.ln"), x)
}

/// Pre-norm decoder stack: causal self-attention, cross-attention over
/// `memory`, feed-forward; final layer norm.
pub fn decoder_stack<'t>(
    f: &Fwd<'_, 't>,
    prefix: &str,
    layers: usize,
    heads: usize,
    mut x: Var<'t, Real>,
    self_mask: &Tensor,
    memory: Var<'t, Real>,
    cross_mask: &Tensor,
) -> Var<'t, Real> {
    for l in 0..layers {
        let p = format!("{prefix}.l{l}");
        let a = layer_norm(f, &format!("{p}.ln1"), x);
        x = x.add(f.dropout.apply(multi_head_attention(f, &format!("{p}.self"), a, a, self_mask, heads)));
        let c = layer_norm(f, &format!("{p}.ln2"), x);
        x = x.add(f.dropout.apply(multi_head_attention(
            f,
            &format!("{p}.cross"),
            c,
            memory,
            cross_mask,
            heads,
        )));
        let b = layer_norm(f, &format!("{p}.ln3"), x);
        x = x.add(f.dropout.apply(feed_forward(f, &format!("{p}.ffn"), b)));
    }
    layer_norm(f, &format!("{prefix}.ln"), x)
}

/// Learned-query attention pooling of `[len, d]` down to `[1, d]`,
/// restricted to valid positions.
pub fn attention_pool<'t>(
    f: &Fwd<'_, 't>,
    query_param: &str,
    rep: Var<'t, Real>,
    valid: &[bool],
) -> Var<'t, Real> {
    let d = rep.shape()[1];
    let q = f.params.get(query_param);
    let scores = rep.matmul(q).scale(1.0 / (d as f64).sqrt()).transpose();
    let weights = scores.masked_softmax(&key_mask(1, valid));
    weights.matmul(rep)
}
