//! CPU reference implementation of GPU-style 2:4 structured sparsity and
//! INT8/INT4 quantization-aware training, driven by knowledge distillation,
//! on a small vision transformer.
//!
//! The guide in `book/` walks through the concepts;
//! the module docs here cover the contracts.

pub mod autodiff;
mod codec;
pub mod data;
pub mod distill;
pub mod error;
pub mod format;
pub mod gemm;
pub mod numerics;
pub mod pipeline;
pub mod quant;
pub mod sparsity;
pub mod vit;

pub use error::{Error, Result};
