use std::path::PathBuf;

use serde::Serialize;
use storyplug_core::augment::AugmentError;
use storyplug_core::eval::EvalError;
use storyplug_core::extract::ExtractError;
use storyplug_core::finetune::FineTuneError;
use storyplug_core::inference::InferenceError;
use storyplug_core::plugin::{PluginFormatError, Violation};
use storyplug_core::BackendError;

use crate::story::SchemaViolation;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error(transparent)]
    Schema(#[from] SchemaViolation),
    #[error("plugin file: {0}")]
    PluginFormat(#[from] PluginFormatError),
    #[error("plugin `{name}` is invalid: {}", list(.violations))]
    PluginInvalid { name: String, violations: Vec<Violation> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("frame `{frame}` uses character `{character}`, which has no plugin")]
    MissingPlugin { frame: String, character: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    FineTune(#[from] FineTuneError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn list(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Usage,
    Validation,
    Runtime,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Usage => 2,
            Category::Validation => 3,
            Category::Runtime => 4,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Usage(_) => "usage",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json { .. } => "json",
            Error::Schema(_) => "schema_violation",
            Error::PluginFormat(_) => "plugin_format",
            Error::PluginInvalid { .. } => "plugin_invalid",
            Error::Checkpoint(_) => "checkpoint",
            Error::MissingPlugin { .. } => "missing_plugin",
            Error::Backend(e) => match e {
                BackendError::EmptyText => "empty_text",
                BackendError::TextTooLong { .. } => "text_too_long",
                BackendError::DescriptorMismatch { .. } => "descriptor_mismatch",
                _ => "backend",
            },
            Error::Augment(_) => "augment",
            Error::FineTune(e) => match e {
                FineTuneError::NonFiniteLoss { .. } => "non_finite_loss",
                FineTuneError::UnknownClassNoun(_) => "unknown_class_noun",
                _ => "finetune",
            },
            Error::Extract(_) => "extract",
            Error::Inference(e) => match e {
                InferenceError::DescriptorMismatch { .. } => "descriptor_mismatch",
                InferenceError::UnknownCharacter(_) => "unknown_character",
                InferenceError::CharacterNotInPrompt { .. } => "character_not_in_prompt",
                InferenceError::DuplicateClassNoun(..) => "duplicate_class_noun",
                _ => "inference",
            },
            Error::Eval(_) => "eval",
        }
    }

    pub fn category(&self) -> Category {
        match self {
            Error::Usage(_) => Category::Usage,
            Error::Io { .. } | Error::Image { .. } | Error::Checkpoint(_) => Category::Runtime,
            Error::FineTune(FineTuneError::NonFiniteLoss { .. }) => Category::Runtime,
            Error::Backend(BackendError::ShapeMismatch { .. }) => Category::Runtime,
            _ => Category::Validation,
        }
    }

    pub fn report(&self) -> ErrorReport {
        ErrorReport { error: ErrorBody { code: self.code(), message: self.to_string() } }
    }
}

/// `{"error": {"code": ..., "message": ...}}`
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: ErrorBody,
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub code: &'static str,
    pub message: String,
}
