//! The guide's chapters, compiled as documentation so that `cargo test`
//! runs every code block in them. mdbook cannot resolve crate dependencies
//! in its own test runner; rustdoc can.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/sparsity.md")]
pub mod sparsity {}
#[doc = include_str!("../../../book/src/packing.md")]
pub mod packing {}
#[doc = include_str!("../../../book/src/sparse-gemm.md")]
pub mod sparse_gemm {}
#[doc = include_str!("../../../book/src/quantization.md")]
pub mod quantization {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/vit.md")]
pub mod vit {}
#[doc = include_str!("../../../book/src/distillation.md")]
pub mod distillation {}
#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../docs/formats.md")]
pub mod formats {}
