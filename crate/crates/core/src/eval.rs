//! Text-alignment and image-alignment scores, plus the rows of a manual
//! scoring sheet.

use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::image::RgbImage;
use crate::linalg::{dot, l2_norm};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("no images to score")]
    NoImages,
    #[error("character {0} has no reference images")]
    NoReferences(usize),
    #[error("no characters to score")]
    NoCharacters,
    #[error("embedding dimensions differ ({0} vs {1})")]
    DimMismatch(usize, usize),
    #[error("zero-length embedding")]
    ZeroVector,
    #[error("score {0} is outside 0..=3")]
    ScoreOutOfRange(u8),
}

/// Text and image encoder into a shared space. Outputs are unit-norm and
/// deterministic.
pub trait Embedder {
    fn embed_text(&self, text: &str) -> Vec<f64>;
    fn embed_image(&self, image: &RgbImage) -> Vec<f64>;
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::DimMismatch(a.len(), b.len()));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean cosine between `prompt` and each image embedding.
pub fn text_alignment_from_embeddings(images: &[Vec<f64>], prompt: &[f64]) -> Result<f64, EvalError> {
    if images.is_empty() {
        return Err(EvalError::NoImages);
    }
    let mut sum = 0.0;
    for im in images {
        sum += cosine(im, prompt)?;
    }
    Ok(sum / images.len() as f64)
}

/// Per character, the mean cosine over all (reference, image) pairs; then the
/// mean over characters.
pub fn image_alignment_from_embeddings(images: &[Vec<f64>], references: &[Vec<Vec<f64>>]) -> Result<f64, EvalError> {
    if images.is_empty() {
        return Err(EvalError::NoImages);
    }
    if references.is_empty() {
        return Err(EvalError::NoCharacters);
    }
    let mut total = 0.0;
    for (c, refs) in references.iter().enumerate() {
        if refs.is_empty() {
            return Err(EvalError::NoReferences(c));
        }
        let mut sum = 0.0;
        for r in refs {
            for im in images {
                sum += cosine(r, im)?;
            }
        }
        total += sum / (refs.len() * images.len()) as f64;
    }
    Ok(total / references.len() as f64)
}

pub fn text_alignment<E: Embedder + ?Sized>(images: &[RgbImage], prompt: &str, embedder: &E) -> Result<f64, EvalError> {
    let ims: Vec<_> = images.iter().map(|i| embedder.embed_image(i)).collect();
    text_alignment_from_embeddings(&ims, &embedder.embed_text(prompt))
}

pub fn image_alignment<E: Embedder + ?Sized>(
    images: &[RgbImage],
    character_refs: &[Vec<RgbImage>],
    embedder: &E,
) -> Result<f64, EvalError> {
    let ims: Vec<_> = images.iter().map(|i| embedder.embed_image(i)).collect();
    let refs: Vec<Vec<_>> =
        character_refs.iter().map(|set| set.iter().map(|i| embedder.embed_image(i)).collect()).collect();
    image_alignment_from_embeddings(&ims, &refs)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Deterministic stand-in scorer: each distinct input maps to a seeded random
/// unit vector. Identical inputs score 1.0; unrelated ones land near 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 64 }
    }
}

impl HashEmbedder {
    fn vector(&self, domain: u64, key: u64) -> Vec<f64> {
        let mut r = rng::stream(key, domain, 0);
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let n = l2_norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        v
    }
}

impl Embedder for HashEmbedder {
    fn embed_text(&self, text: &str) -> Vec<f64> {
        self.vector(0x7465_7874, fnv1a(text.trim().to_lowercase().as_bytes()))
    }

    fn embed_image(&self, image: &RgbImage) -> Vec<f64> {
        let mut h =
            fnv1a(&(image.width as u64).to_le_bytes()) ^ fnv1a(&(image.height as u64).to_le_bytes()).rotate_left(17);
        h ^= fnv1a(&image.data);
        self.vector(0x696d_6167, h)
    }
}

/// A manual 0..=3 rating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct HumanScore(u8);

impl HumanScore {
    pub const MAX: u8 = 3;

    pub fn new(v: u8) -> Result<Self, EvalError> {
        if v > Self::MAX {
            Err(EvalError::ScoreOutOfRange(v))
        } else {
            Ok(Self(v))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

/// Default questions: correspondence, coherence and quality.
pub const DEFAULT_QUESTIONS: [&str; 3] = ["correspondence", "coherence", "quality"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SheetRow {
    pub image: String,
    pub question: String,
}

/// One row per (image, question), images outermost.
pub fn human_eval_rows<S: AsRef<str>, Q: AsRef<str>>(images: &[S], questions: &[Q]) -> Vec<SheetRow> {
    let mut rows = Vec::with_capacity(images.len() * questions.len());
    for im in images {
        for q in questions {
            rows.push(SheetRow { image: im.as_ref().into(), question: q.as_ref().into() });
        }
    }
    rows
}
