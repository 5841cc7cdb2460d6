//! Dense-tensor numerics with reverse-mode automatic differentiation.
//!
//! Enough to express Transformer encoders/decoders, attention pooling, and
//! the gating matrix multiplication: a row-major [`Tensor`], a [`Tape`] that
//! records operations and replays them in reverse, and a [`ParameterStore`]
//! holding named trainable tensors with persistent gradient and optimizer
//! slots.

mod gradcheck;
mod ops;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{central_diff_gradients, gradcheck, max_rel_err, GradCheckReport};
pub use ops::{concat_cols, concat_rows};
pub use params::{Checkpoint, CheckpointError, Init, ParameterStore};
pub use scalar::Scalar;
pub use tape::{BoundParams, Gradients, Tape, Var};
pub use tensor::Tensor;
