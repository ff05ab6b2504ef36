//! The diffusion-backend abstraction every other module computes against.
//!
//! A backend bundles a tokenizer, a text encoder whose parameters live in an
//! [`EncoderState`], a noise predictor with cross-attention hooks, and a
//! latent codec. [`toy::ToyBackend`] is a small deterministic implementation
//! used for desk-scale runs and tests.

pub mod tokenizer;
pub mod toy;

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::image::RgbImage;
use crate::linalg::Mat;

pub use tokenizer::WordTokenizer;

/// `L x H` contextual token embeddings (row `l` is token position `l`).
pub type Embeddings = Mat;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("text is empty")]
    EmptyText,
    #[error("text has {tokens} content tokens, at most {max} fit")]
    TextTooLong { tokens: usize, max: usize },
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch { what: &'static str, expected: usize, got: usize },
    #[error("timestep {t} outside [0, {max})")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("descriptor mismatch: expected `{expected}`, got `{got}`")]
    DescriptorMismatch { expected: String, got: String },
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenIds {
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub backend_id: String,
    /// Maximum token-sequence length `L`.
    pub max_len: usize,
    /// Embedding width `H`.
    pub width: usize,
    pub latent_side: usize,
    pub latent_channels: usize,
    /// Spatial sides of the cross-attention maps, one per attention layer.
    pub attention_sides: Vec<usize>,
    pub token_ids: TokenIds,
    /// Length of the training noise schedule; valid timesteps are `0..train_timesteps`.
    pub train_timesteps: usize,
}

impl BackendDescriptor {
    /// Interface-level descriptor matching Stable Diffusion v2.1 (OpenCLIP
    /// ViT-H text encoder, 512px images with 64x64 latents).
    pub fn stable_diffusion_v2_1() -> Self {
        Self {
            backend_id: "stable-diffusion-2-1".into(),
            max_len: 77,
            width: 1024,
            latent_side: 64,
            latent_channels: 4,
            attention_sides: alloc::vec![64, 32, 16, 8],
            token_ids: TokenIds { bos: 49406, eos: 49407, pad: 0 },
            train_timesteps: 1000,
        }
    }

    /// Number of character positions, `L - 2`.
    pub fn character_positions(&self) -> usize {
        self.max_len - 2
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_len < 4 {
            return Err(BackendError::InvalidDescriptor("max_len must be at least 4"));
        }
        if self.width == 0 || self.latent_side == 0 || self.latent_channels == 0 {
            return Err(BackendError::InvalidDescriptor("dimensions must be positive"));
        }
        if self.attention_sides.iter().any(|&s| s == 0 || !self.latent_side.is_multiple_of(s)) {
            return Err(BackendError::InvalidDescriptor("attention side must divide latent side"));
        }
        let TokenIds { bos, eos, pad } = self.token_ids;
        if bos == eos || bos == pad || eos == pad {
            return Err(BackendError::InvalidDescriptor("bos/eos/pad ids must be distinct"));
        }
        if self.train_timesteps == 0 {
            return Err(BackendError::InvalidDescriptor("train_timesteps must be positive"));
        }
        Ok(())
    }

    pub fn ensure_same(&self, other_id: &str) -> Result<(), BackendError> {
        if self.backend_id == other_id {
            Ok(())
        } else {
            Err(BackendError::DescriptorMismatch { expected: self.backend_id.clone(), got: other_id.into() })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    /// Positions holding `id`, left to right.
    pub fn positions_of(&self, id: u32) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, &t)| t == id).map(|(i, _)| i).collect()
    }
}

/// Where one word of the input text landed in the token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordSpan {
    pub word: String,
    pub positions: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenized {
    pub tokens: TokenSequence,
    pub words: Vec<WordSpan>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Frozen,
    Finetuned,
}

/// Text-encoder parameters. The blob layout is backend-defined.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub kind: EncoderKind,
    pub params: Vec<f64>,
    pub descriptor: BackendDescriptor,
}

impl EncoderState {
    /// A trainable copy of this state.
    pub fn to_finetuned(&self) -> EncoderState {
        EncoderState { kind: EncoderKind::Finetuned, params: self.params.clone(), descriptor: self.descriptor.clone() }
    }
}

/// Latent grid, pixel-major: `data[(y * side + x) * channels + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub side: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Latent {
    pub fn zeros(side: usize, channels: usize) -> Self {
        Self { side, channels, data: alloc::vec![0.0; side * side * channels] }
    }

    pub fn as_mat(&self) -> Mat {
        Mat::from_slice(self.side * self.side, self.channels, &self.data)
    }
}

/// Identifies one cross-attention layer for an editor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionLayer {
    pub index: usize,
    /// Spatial side; the layer has `side * side` query cells.
    pub side: usize,
    /// Number of token positions (`L`).
    pub tokens: usize,
}

/// Post-softmax cross-attention of one layer, `cells x tokens` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub layer: AttentionLayer,
    pub probs: Vec<f64>,
}

impl AttentionMap {
    /// Spatial map of token position `token`, one value per cell.
    pub fn token_map(&self, token: usize) -> Vec<f64> {
        self.probs.chunks(self.layer.tokens).map(|row| row[token]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrediction {
    pub noise: Latent,
    pub attention: Vec<AttentionMap>,
}

/// Hook over pre-softmax cross-attention scores.
///
/// `scores` is `side * side` rows of `tokens` columns; whatever the editor
/// leaves in the buffer is what the softmax sees.
pub trait AttentionEditor {
    fn edit(&mut self, layer: &AttentionLayer, scores: &mut [f64]);
}

impl<F: FnMut(&AttentionLayer, &mut [f64])> AttentionEditor for F {
    fn edit(&mut self, layer: &AttentionLayer, scores: &mut [f64]) {
        self(layer, scores)
    }
}

pub trait Backend {
    fn descriptor(&self) -> &BackendDescriptor;

    fn tokenize(&self, text: &str) -> Result<Tokenized, BackendError>;

    /// `[bos, eos, pad, ...]`, the empty prompt used for classifier-free guidance.
    fn unconditional_tokens(&self) -> TokenSequence {
        let d = self.descriptor();
        let mut t = alloc::vec![d.token_ids.pad; d.max_len];
        t[0] = d.token_ids.bos;
        t[1] = d.token_ids.eos;
        TokenSequence(t)
    }

    /// The pretrained, never-trained text encoder.
    fn frozen_encoder(&self) -> &EncoderState;

    fn encode_tokens(&self, state: &EncoderState, tokens: &TokenSequence) -> Result<Embeddings, BackendError>;

    fn predict_noise(
        &self,
        latent: &Latent,
        embeddings: &Embeddings,
        t: usize,
        editor: Option<&mut dyn AttentionEditor>,
    ) -> Result<NoisePrediction, BackendError>;

    fn decode_latent(&self, latent: &Latent) -> Result<RgbImage, BackendError>;

    fn encode_image(&self, image: &RgbImage) -> Latent;

    /// Cumulative product of `1 - beta_t` over the training schedule.
    fn alphas_cumprod(&self) -> &[f64];
}

/// Backends that can backpropagate into text-encoder parameters.
pub trait DifferentiableBackend: Backend {
    /// Gradient of `<d_embeddings, encode(state, tokens)>` with respect to
    /// `state.params`.
    fn encoder_vjp(
        &self,
        state: &EncoderState,
        tokens: &TokenSequence,
        d_embeddings: &Embeddings,
    ) -> Result<Vec<f64>, BackendError>;

    /// Gradient of `<d_noise, predict_noise(latent, embeddings, t)>` with
    /// respect to `embeddings` (no attention editing).
    fn noise_vjp(
        &self,
        latent: &Latent,
        embeddings: &Embeddings,
        t: usize,
        d_noise: &Latent,
    ) -> Result<Embeddings, BackendError>;
}

/// Token id of `noun` if it is exactly one token under the backend's tokenizer.
pub fn class_noun_token<B: Backend + ?Sized>(backend: &B, noun: &str) -> Option<u32> {
    if !crate::plugin::is_single_token_noun(noun) {
        return None;
    }
    let t = backend.tokenize(noun).ok()?;
    match t.words.as_slice() {
        [w] if w.positions.len() == 1 => Some(t.tokens.0[w.positions.start]),
        _ => None,
    }
}

pub(crate) fn check_embeddings(d: &BackendDescriptor, e: &Embeddings) -> Result<(), BackendError> {
    if e.rows != d.max_len {
        return Err(BackendError::ShapeMismatch { what: "embedding rows", expected: d.max_len, got: e.rows });
    }
    if e.cols != d.width {
        return Err(BackendError::ShapeMismatch { what: "embedding width", expected: d.width, got: e.cols });
    }
    Ok(())
}
