//! Sparse fine-tuning of Transformer blocks at desk scale.
//!
//! The crate builds a Transformer block whose attention scores only a
//! quantization-selected subset of key positions per query and whose
//! feed-forward runs only a routed subset of its width, wraps every frozen
//! weight with low-rank adapters, and differentiates the whole thing on a
//! tape that also meters arithmetic cost (multiply-add pairs of matrix
//! products), live bytes, and kept attention entries. Everything is
//! deterministic under a seed and checked against dense references.
//!
//! Layers:
//! - [`tensor`]: arena tape, reverse-mode gradients, cost counters.
//! - [`csr`]: compressed sparse row patterns shared by the sparse kernels.
//! - [`pq`]: product-quantization codebooks with periodic refits.
//! - [`topl`]: bucket-sorted top-L key selection over shared codes.
//! - [`lora`]: low-rank adapter pairs and adapter-only checkpoints.
//! - [`attention`], [`ffn`], [`block`]: the model pieces.
//! - [`profile`], [`train`]: cost reports and the toy training loop.
//!
//! The `examples/` directory demonstrates each capability end to end; the
//! thin `sparsetune` binary exposes profiling and training with flags.

pub mod attention;
pub mod block;
pub mod config;
pub mod csr;
pub mod error;
pub mod ffn;
pub mod lora;
pub mod pq;
pub mod profile;
pub mod rng;
pub mod tensor;
pub mod topl;
pub mod train;

pub use attention::{AttentionOutput, Mha};
pub use block::{Block, BlockOutput, BlockSnapshot};
pub use config::{Activation, BlockConfig, SparsityConfig, TuningMode, preset, resolve_preset, PRESET_NAMES};
pub use csr::CsrPattern;
pub use error::{Error, Result};
pub use ffn::{DenseFfn, FfnOutput, RoutedFfn, Routing};
pub use lora::{
    apply_adapters, collect_adapters, load_adapters, save_adapters, AdapterCheckpoint, AdapterSite,
    LoraLinear, LoraPair,
};
pub use pq::{CodeAssignment, Codebooks};
pub use profile::{run_profile, ProfileReport, ProfileSpec, ProfiledModule};
pub use rng::SeedRng;
pub use tensor::{CostCounters, Element, Tape, Tensor, TensorId};
pub use topl::{select_topl, TopLIndices};
pub use train::{run_train, ToyModel, ToySnapshot, TrainOutcome, TrainSession, TrainSpec};
