//! Dual word/sentence vision transformer built on a small reverse-mode
//! autodiff engine.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`tape`]: dense f64 tensors and the gradient tape.
//! - [`nn`]: multi-head self-attention, MLP, and the pre-norm residual block.
//! - [`tokenizer`]: image -> visual sentences -> visual words pipeline with
//!   both learnable position encodings.
//! - [`block`]: the dual block (inner transformer over words, linear fusion
//!   into sentences, outer transformer over sentences) and the plain block
//!   used by mixed configurations.
//! - [`model`]: full network assembly, presets, checkpointing, and
//!   position-encoding interpolation.
//! - [`complexity`]: closed-form FLOPs/parameter calculators plus an
//!   exhaustive per-tensor counter.
//! - [`training`] / [`dataset`]: AdamW, warmup + cosine schedule,
//!   label-smoothed cross-entropy, and a synthetic sub-patch task.
//! - [`introspect`]: attention-map and feature-map exports.
//! - [`gradcheck`]: finite-difference verification harness.
//!
//! With the default `parallel` feature the data-parallel inner loops (matmul
//! rows, per-sample batch gradients) run on rayon; without it everything runs
//! sequentially. Both paths produce bit-identical results.

pub mod block;
pub mod checkpoint;
pub mod complexity;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod introspect;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::TntError;
pub use model::{Model, TntConfig};
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;

/// Cap worker parallelism for the whole process (the `TNT_THREADS`
/// environment variable routes here). No-op without the `parallel` feature.
/// Must be called before any parallel work; later calls fail.
#[cfg(feature = "parallel")]
pub fn configure_threads(n: usize) -> Result<(), TntError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| TntError::Config(format!("thread pool: {e}")))
}

#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_n: usize) -> Result<(), TntError> {
    Ok(())
}
