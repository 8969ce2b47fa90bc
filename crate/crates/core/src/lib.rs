//! Gated associative memory language models on a small CPU autodiff engine.
//!
//! The crate holds the numerics (tensors, reverse-mode graph, layers), the
//! two sequence-mixing blocks, the language model around them, a byte-level
//! BPE tokenizer, the data pipeline and the training loop.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gam;
#[cfg(feature = "gradcheck")]
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod memory;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod transformer;

pub use data::TokenDataset;
pub use error::{Error, Result};
pub use gam::{GamBlockParams, GamVariant};
pub use graph::{Gradients, Graph, Mode, Var};
pub use memory::{MemoryScope, OutOfMemory};
pub use model::{Arch, Model, ModelConfig};
pub use nn::{ParamId, ParamKind, ParamStore};
pub use scalar::Scalar;
pub use tensor::{init_xavier_uniform, rng_from_seed, InitRng, Tensor};
pub use tokenizer::Bpe;
pub use trainer::{MetricsRow, TrainConfig};
pub use transformer::TransformerBlockParams;
