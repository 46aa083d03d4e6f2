//! Domain adaptive one-stage object detection on the CPU: a small detector,
//! adversarial image and instance alignment, and a synthetic clear/fog benchmark.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod autograd;
pub mod bbox;
pub mod data;
mod error;
pub mod evaluation;
pub mod grl;
pub mod model;
pub mod sample;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

// The guide's code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/dataset.md")]
    mod dataset {}
    #[doc = include_str!("../../../book/src/gradient-reversal.md")]
    mod gradient_reversal {}
    #[doc = include_str!("../../../book/src/image-alignment.md")]
    mod image_alignment {}
    #[doc = include_str!("../../../book/src/instance-alignment.md")]
    mod instance_alignment {}
    #[doc = include_str!("../../../book/src/consensus.md")]
    mod consensus {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
