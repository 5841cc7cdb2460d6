//! Long-form abstractive summarization models with explicit content selection.
//!
//! The crate implements four encoder-decoder architectures over a shared
//! snippet pipeline: truncated-input (`Trunc`), compressive-abstractive
//! (`CA`), extractive-abstractive (`EA`), and the segment-wise
//! extractive-abstractive model (`SEAL`) that re-selects input snippets for
//! every decode segment. Everything runs on a small dense-tensor numerics
//! core with reverse-mode automatic differentiation; no external ML runtime
//! is involved.
//!
//! The numerics core is generic over the scalar type (`f32`/`f64` via
//! [`numerics::Scalar`]); the model stack is pinned to `f64` through the
//! aliases below.

pub mod config;
pub mod labels;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod synth;
pub mod text;
pub mod train;

/// Scalar type used by the model stack.
pub type Real = f64;

/// Dense tensor over [`Real`].
pub type Tensor = numerics::Tensor<Real>;
/// Gradient tape over [`Real`].
pub type Tape = numerics::Tape<Real>;
/// Parameter store over [`Real`].
pub type ParameterStore = numerics::ParameterStore<Real>;

/// Single-precision variants, for callers that trade accuracy for space.
pub type Tensor32 = numerics::Tensor<f32>;
pub type Tape32 = numerics::Tape<f32>;
