//! Minimal reverse-mode differentiation over dense row-major arrays.
//!
//! A [`Tape`] records every operation executed through it; [`Tape::backward`]
//! replays the record in reverse and leaves gradients on leaf variables.
//! Only the operations the trunk and heads need are provided, with exact
//! shape matching (no broadcasting).
//!
//! The engine is generic over [`Scalar`] so that training runs in `f32`
//! while gradient checks run the same code in `f64`.

mod array;
mod kernels;
mod optim;
mod scalar;
mod tape;

pub use array::Array;
pub use optim::{AdamConfig, AdamState, LrSchedule};
pub use scalar::{DType, Scalar};
pub use tape::{smooth_l1, BatchNormState, Mode, Tape, Var};

pub(crate) use kernels::conv_out_len;
