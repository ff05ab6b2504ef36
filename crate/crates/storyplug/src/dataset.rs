//! Training-set directories: build from character PNGs and a scene list,
//! write images plus `dataset.json`, and load them back.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use storyplug_core::augment::{
    apply_plan, build_training_set, generate_background, plan_augmentation, AugmentedImage, Background,
    BackgroundOptions, CharacterImage, PasteConfig, SceneDescriptionList, TrainingDataset,
};
use storyplug_core::Backend;

use crate::error::{Error, Result};
use crate::io;

pub const MANIFEST_FILE: &str = "dataset.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Entry {
    Character { path: String, source: String },
    Augmented { path: String, character_index: usize, background_index: usize, paste_seed: u64, scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundEntry {
    pub path: String,
    pub scene_index: usize,
    pub scene: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub backend_id: String,
    /// Class noun every image is labelled with, if known at build time.
    pub label: Option<String>,
    pub paste: PasteConfig,
    pub backgrounds: Vec<BackgroundEntry>,
    /// Character images first, then augmented images in index order.
    pub images: Vec<Entry>,
}

#[derive(Debug, Clone)]
pub struct AugmentOptions {
    pub n: usize,
    pub seed: u64,
    /// Number of backgrounds to synthesize; scenes are cycled.
    pub backgrounds: usize,
    pub background: BackgroundOptions,
    pub paste: PasteConfig,
    pub label: Option<String>,
}

impl AugmentOptions {
    pub fn new(n: usize, seed: u64, backgrounds: usize) -> Self {
        Self {
            n,
            seed,
            backgrounds,
            background: BackgroundOptions::default(),
            paste: PasteConfig::default(),
            label: None,
        }
    }
}

pub fn load_characters(dir: &Path) -> Result<Vec<CharacterImage>> {
    let paths = io::list_pngs(dir)?;
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        out.push(CharacterImage::new(io::read_rgba(&p)?, p.display().to_string())?);
    }
    Ok(out)
}

pub fn load_scenes(path: &Path) -> Result<SceneDescriptionList> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(SceneDescriptionList::parse(&text)?)
}

/// Builds the in-memory training set. Backgrounds and pastes run in parallel;
/// every item depends only on `(seed, index)`, so the result equals a serial
/// build.
pub fn build<B: Backend + Sync + ?Sized>(
    backend: &B,
    characters: &[CharacterImage],
    scenes: &SceneDescriptionList,
    class_noun: &str,
    options: &AugmentOptions,
) -> Result<(TrainingDataset, Vec<Background>)> {
    if characters.is_empty() {
        return Err(storyplug_core::augment::AugmentError::EmptyCharacterDir.into());
    }
    let backgrounds = if options.n == 0 {
        Vec::new()
    } else {
        if options.backgrounds == 0 {
            return Err(storyplug_core::augment::AugmentError::ZeroCount.into());
        }
        (0..options.backgrounds)
            .into_par_iter()
            .map(|i| generate_background(backend, scenes, i, options.seed, &options.background))
            .collect::<Result<Vec<_>, _>>()?
    };
    let plans = plan_augmentation(characters.len(), backgrounds.len(), options.n, options.seed)?;
    let augmented: Vec<AugmentedImage> =
        plans.par_iter().map(|p| apply_plan(p, characters, &backgrounds, &options.paste)).collect::<Result<_, _>>()?;
    let mut ds = build_training_set(characters, &backgrounds, 0, class_noun, options.seed, &options.paste)?;
    ds.augmented_images = augmented;
    Ok((ds, backgrounds))
}

fn rel(p: &str) -> PathBuf {
    PathBuf::from(p)
}

/// Writes `characters/`, `backgrounds/`, `augmented/` and the manifest.
pub fn write(
    out: &Path,
    dataset: &TrainingDataset,
    characters: &[CharacterImage],
    backgrounds: &[Background],
    scenes: &SceneDescriptionList,
    backend_id: &str,
    options: &AugmentOptions,
) -> Result<DatasetManifest> {
    let mut images = Vec::with_capacity(dataset.len());
    for (i, (img, src)) in dataset.character_images.iter().zip(characters).enumerate() {
        let path = format!("characters/{i:04}.png");
        io::write_png(&out.join(rel(&path)), img)?;
        images.push(Entry::Character { path, source: src.source_path.clone() });
    }
    let mut bg_entries = Vec::with_capacity(backgrounds.len());
    for (i, bg) in backgrounds.iter().enumerate() {
        let path = format!("backgrounds/{i:04}.png");
        io::write_png(&out.join(rel(&path)), &bg.image)?;
        bg_entries.push(BackgroundEntry {
            path,
            scene_index: bg.scene_index,
            scene: scenes.scenes[bg.scene_index].clone(),
            seed: bg.seed,
        });
    }
    for a in &dataset.augmented_images {
        let path = format!("augmented/{:05}.png", a.plan.index);
        io::write_png(&out.join(rel(&path)), &a.image)?;
        images.push(Entry::Augmented {
            path,
            character_index: a.plan.character_index,
            background_index: a.plan.background_index,
            paste_seed: a.plan.paste_seed,
            scale: a.scale,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed: options.seed,
        backend_id: backend_id.into(),
        label: options.label.clone(),
        paste: options.paste,
        backgrounds: bg_entries,
        images,
    };
    io::write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Reads a dataset directory written by [`write`], labelled with `class_noun`.
pub fn load(dir: &Path, class_noun: &str) -> Result<(TrainingDataset, DatasetManifest)> {
    let manifest: DatasetManifest = io::read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Json {
            path: dir.join(MANIFEST_FILE),
            message: format!("unsupported dataset version {}", manifest.version),
        });
    }
    let mut ds =
        TrainingDataset { class_noun: class_noun.into(), character_images: Vec::new(), augmented_images: Vec::new() };
    for (i, e) in manifest.images.iter().enumerate() {
        match e {
            Entry::Character { path, .. } => ds.character_images.push(io::read_rgb(&dir.join(rel(path)))?),
            Entry::Augmented { path, character_index, background_index, paste_seed, scale } => {
                ds.augmented_images.push(AugmentedImage {
                    image: io::read_rgb(&dir.join(rel(path)))?,
                    plan: storyplug_core::augment::PastePlan {
                        index: i - ds.character_images.len(),
                        character_index: *character_index,
                        background_index: *background_index,
                        paste_seed: *paste_seed,
                    },
                    scale: *scale,
                })
            }
        }
    }
    Ok((ds, manifest))
}
