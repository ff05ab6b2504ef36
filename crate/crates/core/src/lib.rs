//! Character plugins for multi-character story visualization on top of a
//! latent-diffusion backend.
//!
//! The crate is `no_std` (with `alloc`) and contains only the numerical
//! pieces of the pipeline:
//!
//! * [`backend`]: the backend abstraction plus a small deterministic toy
//!   backend (text encoder, cross-attention noise predictor, latent codec).
//! * [`augment`]: background synthesis and centered copy-paste compositing.
//! * [`finetune`]: subject-preservation and non-character-token
//!   regularization losses, and the text-encoder training loop.
//! * [`extract`]: the sliding token matrix and plugin extraction.
//! * [`plugin`]: the plugin value type and its `.cgcp` byte format.
//! * [`inference`]: embedding fusion, layout rasterization, cross-attention
//!   editing and layout-guided DDIM generation.
//! * [`eval`]: text/image alignment metrics and human-evaluation sheet rows.
//!
//! File IO, PNG encoding, story scripts, the CLI and the HTTP service live in
//! the `storyplug` crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod augment;
pub mod backend;
pub mod eval;
pub mod extract;
pub mod finetune;
pub mod image;
pub mod inference;
pub mod linalg;
pub mod plugin;
pub mod rng;
pub mod sampler;

pub use backend::toy::{ToyBackend, ToyConfig};
pub use backend::{
    AttentionEditor, AttentionLayer, Backend, BackendDescriptor, BackendError, DifferentiableBackend, Embeddings,
    EncoderKind, EncoderState, Latent, NoisePrediction, TokenIds, TokenSequence, Tokenized,
};
pub use extract::{build_token_matrix, encode_token_matrix, extract_plugin, EmbeddingMatrix, TokenMatrix};
pub use finetune::{FineTuneConfig, LossBreakdown};
pub use inference::{EditSchedule, GenerationRequest, LayoutSpec, NormBox};
pub use plugin::CharacterPlugin;
