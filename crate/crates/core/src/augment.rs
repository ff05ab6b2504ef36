//! Training-set construction: synthesize backgrounds from scene sentences,
//! paste characters into the center of randomly chosen backgrounds, and
//! union the result with the original character images.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, WordTokenizer};
use crate::image::{blend, RgbImage, RgbaImage};
use crate::rng;
use crate::sampler::{self, NoHooks};

/// Background used when a character image is flattened for training.
pub const FLATTEN_BACKGROUND: [u8; 3] = [255, 255, 255];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AugmentError {
    #[error("scene list is empty")]
    EmptySceneList,
    #[error("no character images")]
    EmptyCharacterDir,
    #[error("augmentation requested but no backgrounds available")]
    NoBackgrounds,
    #[error("character image `{0}` has no opaque pixel")]
    EmptyMask(String),
    #[error("character scaled to {width}x{height} does not fit background {bg_width}x{bg_height}")]
    CharacterTooLarge { width: u32, height: u32, bg_width: u32, bg_height: u32 },
    #[error("invalid scale range [{0}, {1}]")]
    BadScaleRange(f64, f64),
    #[error("count must be at least 1")]
    ZeroCount,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharacterImage {
    pub image: RgbaImage,
    pub source_path: String,
}

impl CharacterImage {
    pub fn new(image: RgbaImage, source_path: impl Into<String>) -> Result<Self, AugmentError> {
        let source_path = source_path.into();
        if !image.has_opaque_pixel() {
            return Err(AugmentError::EmptyMask(source_path));
        }
        Ok(Self { image, source_path })
    }

    /// Tight bounding box of the opaque pixels, `(x, y, w, h)`.
    pub fn opaque_bounds(&self) -> (u32, u32, u32, u32) {
        let img = &self.image;
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for y in 0..img.height {
            for x in 0..img.width {
                if img.pixel(x, y)[3] > 0 {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0, y0, x1 - x0 + 1, y1 - y0 + 1)
    }

    pub fn cropped(&self) -> RgbaImage {
        let (x0, y0, w, h) = self.opaque_bounds();
        let mut out = RgbaImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                out.put_pixel(x, y, self.image.pixel(x0 + x, y0 + y));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneDescriptionList {
    pub scenes: Vec<String>,
}

impl SceneDescriptionList {
    /// One scene per non-blank line.
    pub fn parse(text: &str) -> Result<Self, AugmentError> {
        let scenes: Vec<String> =
            text.lines().map(str::trim).filter(|l| !l.is_empty()).map(ToString::to_string).collect();
        if scenes.is_empty() {
            return Err(AugmentError::EmptySceneList);
        }
        Ok(Self { scenes })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Background {
    pub image: RgbImage,
    pub scene_index: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundOptions {
    pub steps: usize,
    pub guidance_scale: f64,
}

impl Default for BackgroundOptions {
    fn default() -> Self {
        Self { steps: sampler::DEFAULT_STEPS, guidance_scale: sampler::DEFAULT_GUIDANCE_SCALE }
    }
}

/// Seed the sampler uses for background `index`.
pub fn background_seed(seed: u64, index: usize) -> u64 {
    rng::stream(seed, rng::LABEL_BACKGROUND, index as u64).random()
}

/// Prompt for a scene sentence, truncated to the encoder's word budget.
fn scene_prompt(sentence: &str, max_words: usize) -> String {
    let words = WordTokenizer::words(sentence);
    words[..words.len().min(max_words)].join(" ")
}

/// Renders one background for `scenes[index % len]`.
pub fn generate_background<B: Backend + ?Sized>(
    backend: &B,
    scenes: &SceneDescriptionList,
    index: usize,
    seed: u64,
    options: &BackgroundOptions,
) -> Result<Background, AugmentError> {
    if scenes.scenes.is_empty() {
        return Err(AugmentError::EmptySceneList);
    }
    let scene_index = index % scenes.scenes.len();
    let prompt = scene_prompt(&scenes.scenes[scene_index], backend.descriptor().max_len - 2);
    let frozen = backend.frozen_encoder();
    let cond = backend.encode_tokens(frozen, &backend.tokenize(&prompt)?.tokens)?;
    let uncond = backend.encode_tokens(frozen, &backend.unconditional_tokens())?;
    let bg_seed = background_seed(seed, index);
    let latent =
        sampler::sample(backend, &cond, &uncond, bg_seed, options.steps, options.guidance_scale, &mut NoHooks)?;
    Ok(Background { image: backend.decode_latent(&latent)?, scene_index, seed: bg_seed })
}

/// `count` backgrounds cycling through the scene list.
pub fn generate_backgrounds<B: Backend + ?Sized>(
    backend: &B,
    scenes: &SceneDescriptionList,
    count: usize,
    seed: u64,
    options: &BackgroundOptions,
) -> Result<Vec<Background>, AugmentError> {
    if count == 0 {
        return Err(AugmentError::ZeroCount);
    }
    (0..count).map(|i| generate_background(backend, scenes, i, seed, options)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleReference {
    /// Scale is a fraction of the background's shorter side (applied to the
    /// character's longer side).
    BackgroundShortSide,
    /// Scale multiplies the character's own size.
    CharacterNative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PasteConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub reference: ScaleReference,
}

impl Default for PasteConfig {
    fn default() -> Self {
        Self { scale_min: 0.4, scale_max: 0.7, reference: ScaleReference::BackgroundShortSide }
    }
}

impl PasteConfig {
    pub fn fixed(scale: f64, reference: ScaleReference) -> Self {
        Self { scale_min: scale, scale_max: scale, reference }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pasted {
    pub image: RgbImage,
    pub scale: f64,
    /// Placed rectangle `(x, y, w, h)` in background pixels.
    pub rect: (u32, u32, u32, u32),
}

/// Alpha-composites the character, cropped to its opaque bounds, with its
/// center on the background center. The scale is the only random choice.
pub fn copy_paste(
    character: &CharacterImage,
    background: &RgbImage,
    config: &PasteConfig,
    seed: u64,
) -> Result<Pasted, AugmentError> {
    let (lo, hi) = (config.scale_min, config.scale_max);
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(AugmentError::BadScaleRange(lo, hi));
    }
    if !character.image.has_opaque_pixel() {
        return Err(AugmentError::EmptyMask(character.source_path.clone()));
    }
    let scale = if lo == hi { lo } else { rng::stream(seed, rng::LABEL_PASTE, 0).random_range(lo..hi) };
    let sprite = character.cropped();
    let k = match config.reference {
        ScaleReference::CharacterNative => scale,
        ScaleReference::BackgroundShortSide => {
            scale * background.width.min(background.height) as f64 / sprite.width.max(sprite.height) as f64
        }
    };
    let w = (libm::round(sprite.width as f64 * k) as u32).max(1);
    let h = (libm::round(sprite.height as f64 * k) as u32).max(1);
    if w > background.width || h > background.height {
        return Err(AugmentError::CharacterTooLarge {
            width: w,
            height: h,
            bg_width: background.width,
            bg_height: background.height,
        });
    }
    let sprite = if (w, h) == (sprite.width, sprite.height) { sprite } else { sprite.resize_nearest(w, h) };
    let (ox, oy) = ((background.width - w) / 2, (background.height - h) / 2);
    let mut out = background.clone();
    for y in 0..h {
        for x in 0..w {
            let px = sprite.pixel(x, y);
            let a = px[3] as u32;
            if a == 0 {
                continue;
            }
            let bg = out.pixel(ox + x, oy + y);
            out.put_pixel(ox + x, oy + y, [blend(px[0], bg[0], a), blend(px[1], bg[1], a), blend(px[2], bg[2], a)]);
        }
    }
    Ok(Pasted { image: out, scale, rect: (ox, oy, w, h) })
}

/// One (character, background) draw for augmented image `index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PastePlan {
    pub index: usize,
    pub character_index: usize,
    pub background_index: usize,
    pub paste_seed: u64,
}

/// Uniform random pairing. Each plan depends only on `(seed, index)`.
pub fn plan_augmentation(
    characters: usize,
    backgrounds: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<PastePlan>, AugmentError> {
    if characters == 0 {
        return Err(AugmentError::EmptyCharacterDir);
    }
    if n > 0 && backgrounds == 0 {
        return Err(AugmentError::NoBackgrounds);
    }
    Ok((0..n)
        .map(|index| {
            let mut r = rng::stream(seed, rng::LABEL_PAIRING, index as u64);
            PastePlan {
                index,
                character_index: r.random_range(0..characters),
                background_index: r.random_range(0..backgrounds),
                paste_seed: r.random(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedImage {
    pub image: RgbImage,
    pub plan: PastePlan,
    pub scale: f64,
}

pub fn apply_plan(
    plan: &PastePlan,
    characters: &[CharacterImage],
    backgrounds: &[Background],
    config: &PasteConfig,
) -> Result<AugmentedImage, AugmentError> {
    let pasted = copy_paste(
        &characters[plan.character_index],
        &backgrounds[plan.background_index].image,
        config,
        plan.paste_seed,
    )?;
    Ok(AugmentedImage { image: pasted.image, plan: *plan, scale: pasted.scale })
}

/// `D_char` plus `D_aug`, every image labelled with one class noun.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDataset {
    pub class_noun: String,
    pub character_images: Vec<RgbImage>,
    pub augmented_images: Vec<AugmentedImage>,
}

impl TrainingDataset {
    pub fn len(&self) -> usize {
        self.character_images.len() + self.augmented_images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Character images first, then augmented images in index order.
    pub fn images(&self) -> impl Iterator<Item = &RgbImage> {
        self.character_images.iter().chain(self.augmented_images.iter().map(|a| &a.image))
    }
}

pub fn build_training_set(
    characters: &[CharacterImage],
    backgrounds: &[Background],
    n: usize,
    class_noun: &str,
    seed: u64,
    config: &PasteConfig,
) -> Result<TrainingDataset, AugmentError> {
    let plans = plan_augmentation(characters.len(), backgrounds.len(), n, seed)?;
    let augmented_images =
        plans.iter().map(|p| apply_plan(p, characters, backgrounds, config)).collect::<Result<Vec<_>, _>>()?;
    Ok(TrainingDataset {
        class_noun: class_noun.into(),
        character_images: characters.iter().map(|c| c.image.flatten_onto(FLATTEN_BACKGROUND)).collect(),
        augmented_images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::toy::{ToyBackend, ToyConfig};
    use alloc::vec;

    fn solid_character(w: u32, h: u32, rgba: [u8; 4]) -> CharacterImage {
        let mut img = RgbaImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.put_pixel(x, y, rgba);
            }
        }
        CharacterImage::new(img, "solid.png").unwrap()
    }

    fn gradient_background(side: u32) -> RgbImage {
        let mut img = RgbImage::new(side, side);
        for y in 0..side {
            for x in 0..side {
                img.put_pixel(x, y, [x as u8, y as u8, 7]);
            }
        }
        img
    }

    #[test]
    fn native_scale_centers_32_on_64() {
        let c = solid_character(32, 32, [200, 10, 10, 255]);
        let bg = gradient_background(64);
        let out = copy_paste(&c, &bg, &PasteConfig::fixed(1.0, ScaleReference::CharacterNative), 0).unwrap();
        assert_eq!(out.rect, (16, 16, 32, 32));
        for y in 0..64 {
            for x in 0..64 {
                let inside = (16..48).contains(&x) && (16..48).contains(&y);
                let px = out.image.pixel(x, y);
                if inside {
                    assert_eq!(px, [200, 10, 10]);
                } else {
                    assert_eq!(px, bg.pixel(x, y));
                }
            }
        }
    }

    #[test]
    fn transparent_character_is_rejected() {
        let img = RgbaImage::new(8, 8);
        assert_eq!(CharacterImage::new(img.clone(), "ghost.png"), Err(AugmentError::EmptyMask("ghost.png".into())));
        let ghost = CharacterImage { image: img, source_path: "ghost.png".into() };
        let bg = gradient_background(16);
        assert!(matches!(copy_paste(&ghost, &bg, &PasteConfig::default(), 0), Err(AugmentError::EmptyMask(_))));
    }

    #[test]
    fn too_large_is_rejected() {
        let c = solid_character(40, 40, [1, 2, 3, 255]);
        let bg = gradient_background(32);
        assert!(matches!(
            copy_paste(&c, &bg, &PasteConfig::fixed(1.0, ScaleReference::CharacterNative), 0),
            Err(AugmentError::CharacterTooLarge { .. })
        ));
    }

    #[test]
    fn default_scale_range_is_deterministic_and_in_range() {
        let c = solid_character(20, 30, [9, 9, 9, 255]);
        let bg = gradient_background(64);
        let cfg = PasteConfig::default();
        let a = copy_paste(&c, &bg, &cfg, 11).unwrap();
        let b = copy_paste(&c, &bg, &cfg, 11).unwrap();
        assert_eq!(a, b);
        assert!((0.4..0.7).contains(&a.scale));
        // longer side follows the scale of the 64px background
        let expect = libm::round(a.scale * 64.0) as u32;
        assert_eq!(a.rect.3, expect);
    }

    #[test]
    fn scene_list_parsing() {
        assert_eq!(SceneDescriptionList::parse("\n  \n"), Err(AugmentError::EmptySceneList));
        let s = SceneDescriptionList::parse("a sunny park\n\n  a snowy forest  \n").unwrap();
        assert_eq!(s.scenes, vec!["a sunny park", "a snowy forest"]);
    }

    #[test]
    fn backgrounds_cycle_scenes_and_repeat() {
        let be = ToyBackend::new(ToyConfig::default()).unwrap();
        let scenes = SceneDescriptionList::parse("park\nforest\nbeach\ncity\nriver").unwrap();
        let opts = BackgroundOptions { steps: 4, guidance_scale: 7.5 };
        let a = generate_backgrounds(&be, &scenes, 12, 7, &opts).unwrap();
        let idx: Vec<_> = a.iter().map(|b| b.scene_index).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 0, 1]);
        let b = generate_backgrounds(&be, &scenes, 12, 7, &opts).unwrap();
        assert_eq!(a, b);
        let one = SceneDescriptionList::parse("park").unwrap();
        assert_eq!(generate_backgrounds(&be, &one, 1, 7, &opts).unwrap().len(), 1);
        assert_eq!(generate_backgrounds(&be, &one, 0, 7, &opts), Err(AugmentError::ZeroCount));
    }

    #[test]
    fn long_scene_sentences_are_truncated() {
        let be = ToyBackend::new(ToyConfig::default()).unwrap();
        let scenes = SceneDescriptionList::parse(
            "a very long sentence describing a quiet village by the river with old houses and tall trees at dusk",
        )
        .unwrap();
        let opts = BackgroundOptions { steps: 2, guidance_scale: 7.5 };
        assert!(generate_backgrounds(&be, &scenes, 1, 0, &opts).is_ok());
    }

    #[test]
    fn empty_augmentation_is_character_images_only() {
        let chars = vec![solid_character(8, 8, [1, 1, 1, 255]); 3];
        let ds = build_training_set(&chars, &[], 0, "girl", 0, &PasteConfig::default()).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(ds.augmented_images.is_empty());
        assert_eq!(
            build_training_set(&[], &[], 0, "girl", 0, &PasteConfig::default()),
            Err(AugmentError::EmptyCharacterDir)
        );
    }
}
