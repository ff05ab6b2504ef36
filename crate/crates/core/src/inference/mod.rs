//! Plugin-guided and layout-guided generation.
//!
//! The prompt is encoded with the frozen encoder, each plugin's rows replace
//! the class-noun rows at matching sequence positions ([`fusion`]), and during
//! DDIM sampling every character's pre-softmax cross-attention scores get
//! `xi(step) * layout_bias` added ([`layout`]).

pub mod fusion;
pub mod generate;
pub mod layout;

use alloc::string::String;

use crate::backend::BackendError;

pub use fusion::{bind_plugins, fuse_embeddings, PluginBinding};
pub use generate::{check_request, generate_frame, FrameDiagnostics, FrameOutput, GenerationRequest};
pub use layout::{
    edit_cross_attention, in_box_mass, rasterize_box, rasterize_layout, xi, EditSchedule, LayoutSpec, NormBox,
    ScheduleKind,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InferenceError {
    #[error("class noun `{class_noun}` of plugin `{name}` does not occur in the prompt")]
    CharacterNotInPrompt { name: String, class_noun: String },
    #[error("token position {position} cannot take a plugin row (valid: 1..={max})")]
    PositionOutOfRange { position: usize, max: usize },
    #[error("plugins `{0}` and `{1}` share a class noun")]
    DuplicateClassNoun(String, String),
    #[error("class noun `{0}` is not a single token")]
    UnknownClassNoun(String),
    #[error("layout names unknown character `{0}`")]
    UnknownCharacter(String),
    #[error("invalid box for `{0}`: need 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1")]
    InvalidBox(String),
    #[error("layout values must satisfy positive > 0 > negative")]
    InvalidLayoutValues,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(&'static str),
    #[error("steps must be at least 1")]
    ZeroSteps,
    #[error("plugin `{name}` is invalid: {reason}")]
    InvalidPlugin { name: String, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("descriptor mismatch: plugin `{name}` was built for `{plugin}`, session is `{session}`")]
    DescriptorMismatch { name: String, plugin: String, session: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}
