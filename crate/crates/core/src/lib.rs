//! Deterministic workbench for locating causally important unit groups in
//! small CNNs.
//!
//! The crate contrasts two views of the same network: per-cell linear-probe
//! decoding accuracy and per-cell ablation rank deficits, where cells are
//! equal-count bins of a per-layer selectivity/magnitude activation space.
//!
//! Modules roughly follow the pipeline order:
//!
//! - [`tensor`]: dense `f32` tensors and the layer ops (conv, dense, pool,
//!   batchnorm, relu, softmax) with 64-bit fixed-order accumulation.
//! - [`graph`]: layer DAG, validation, ablation masks, and the forward pass
//!   with activation taps.
//! - [`store`]: bit-exact model/dataset persistence (manifest + blobs +
//!   checksums).
//! - [`datagen`]: seeded synthetic image-class generator.
//! - [`train`]: small deterministic SGD trainer producing desk-scale CNNs.
//! - [`atlas`]: activation capture, per-unit selectivity/magnitude stats, and
//!   the equal-count grid partition.
//! - [`probe`]: linear probes, softmax class ranks, and cell rank deficits.
//! - [`report`]: CSV and SVG grid reports.
//! - [`pipeline`]: end-to-end orchestration used by the CLI and bindings.

pub mod atlas;
pub mod datagen;
pub mod error;
pub mod graph;
pub mod pipeline;
pub mod probe;
pub mod report;
pub mod rng;
pub mod store;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{AblationMask, ForwardResult, LayerKind, LayerSpec, ModelGraph, UnitId};
pub use store::Dataset;
pub use tensor::Tensor;
