//! Dense tensors, a reverse-mode tape, Adam, and finite-difference gradient checking.
//!
//! Every model in the crate is written against [`Tape`], generic over the
//! scalar type. Training runs in `f32`; gradient checks rerun the same code in
//! `f64` so that central differences are meaningful.

mod gradcheck;
mod param;
mod tape;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use thiserror::Error;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use param::{Adam, Gradients, ParamId, ParamStore, Parameter};
pub use tape::{BackwardFn, Tape, Var};
pub use tensor::Tensor;

/// Scalar type usable on the tape.
pub trait Real:
    Float + NumAssign + FromPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to every Real")
    }

    /// Subnormals become zero; they are far below any meaningful signal and
    /// slow arithmetic down by orders of magnitude.
    fn flush(self) -> Self {
        if self.classify() == std::num::FpCategory::Subnormal {
            Self::zero()
        } else {
            self
        }
    }
}

/// Sets flush-to-zero and denormals-are-zero for the calling thread.
/// Saturated softmax rows otherwise fill products with subnormals, which
/// are an order of magnitude slower on x86. No-op on other targets.
pub fn flush_denormals() {
    #[cfg(target_arch = "x86_64")]
    #[allow(deprecated)]
    // SAFETY: SSE is part of the x86_64 baseline; only the FTZ/DAZ bits change.
    unsafe {
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        _mm_setcsr(_mm_getcsr() | 0x8040);
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not match data length {len}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    RaggedRows,
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("label {label} at row {row} is outside [0, {classes})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("fragment is not deterministic: loss {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

impl NumericsError {
    pub(crate) fn dimension(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        NumericsError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

/// Scaled-uniform initializer bound, `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
