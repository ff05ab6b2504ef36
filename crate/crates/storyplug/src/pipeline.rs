//! The steps the CLI and the service share.

use std::path::Path;

use storyplug_core::extract::extract_character_plugin;
use storyplug_core::finetune::{
    train_text_encoder, FineTuneConfig, TrainObserver, TrainingCheckpoint, TrainingOutcome,
};
use storyplug_core::{CharacterPlugin, DifferentiableBackend, EncoderKind, EncoderState};

use crate::dataset;
use crate::error::{Error, Result};

/// Trains on a dataset directory. `resume` continues an earlier run.
pub fn train_on_dir<B: DifferentiableBackend + ?Sized>(
    backend: &B,
    dataset_dir: &Path,
    class_noun: &str,
    config: &FineTuneConfig,
    resume: Option<TrainingCheckpoint>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainingCheckpoint> {
    let (ds, manifest) = dataset::load(dataset_dir, class_noun)?;
    let id = &backend.descriptor().backend_id;
    if &manifest.backend_id != id {
        return Err(Error::Checkpoint(format!("dataset was built with `{}`, session is `{id}`", manifest.backend_id)));
    }
    let TrainingOutcome { encoder, history } = train_text_encoder(backend, &ds, config, resume, observer)?;
    Ok(TrainingCheckpoint {
        step: config.steps,
        config: config.clone(),
        class_noun: class_noun.into(),
        descriptor_id: id.clone(),
        params: encoder.params,
        history,
    })
}

/// The fine-tuned encoder a checkpoint holds.
pub fn encoder_from_checkpoint<B: DifferentiableBackend + ?Sized>(
    backend: &B,
    ck: &TrainingCheckpoint,
) -> Result<EncoderState> {
    let d = backend.descriptor();
    d.ensure_same(&ck.descriptor_id)?;
    if ck.params.len() != backend.frozen_encoder().params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, encoder needs {}",
            ck.params.len(),
            backend.frozen_encoder().params.len()
        )));
    }
    Ok(EncoderState { kind: EncoderKind::Finetuned, params: ck.params.clone(), descriptor: d.clone() })
}

pub fn plugin_from_checkpoint<B: DifferentiableBackend + ?Sized>(
    backend: &B,
    ck: &TrainingCheckpoint,
    name: &str,
    created_at: u64,
) -> Result<CharacterPlugin> {
    let state = encoder_from_checkpoint(backend, ck)?;
    Ok(extract_character_plugin(backend, &state, name, &ck.class_noun, created_at)?)
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}
