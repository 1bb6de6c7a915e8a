//! Dense `f32` layers with hand-written reverse-mode gradients, Adam and the
//! learning-rate schedule.

pub mod attention;
pub mod gemm;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
mod tensor;

pub use attention::{multi_head_attention, multi_head_attention_grad, rope2d_apply, RopeTable};
pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{cross_entropy_masked, layer_norm, layer_norm_grad, linear, linear_grad, softmax};
pub use optim::{adam_step, lr_at, AdamState, LrSchedule};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss mask selects no cells")]
    EmptyMask,
    #[error("step {step} is past the end of the schedule ({total} steps)")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("parameter `{0}` registered twice")]
    DuplicateParameter(String),
}
