//! File formats, story rendering, the command-line tool and the HTTP service
//! built on `storyplug-core`.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod pipeline;
pub mod service;
pub mod story;

pub use error::{Error, Result};
pub use storyplug_core as core;

/// The session backend every command uses.
pub fn default_backend() -> storyplug_core::ToyBackend {
    storyplug_core::ToyBackend::new(storyplug_core::ToyConfig::default()).expect("default toy config is valid")
}
