//! Text-encoder fine-tuning.
//!
//! The objective is `L_total = L_sub + lambda * L_reg`:
//!
//! * `L_sub` is the noise-prediction MSE of the (frozen) noise predictor
//!   conditioned on the fine-tuned encoding of the bare class noun.
//! * `L_reg` is the summed squared distance between fine-tuned and frozen
//!   encodings at the non-character positions (bos, eos and pads) of the
//!   same class-noun sequence.
//!
//! Only encoder parameters move; the frozen state and the noise predictor
//! are never written.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::TrainingDataset;
use crate::backend::{
    class_noun_token, BackendError, DifferentiableBackend, Embeddings, EncoderKind, EncoderState, Latent, TokenSequence,
};
use crate::linalg::Mat;
use crate::rng;
use crate::sampler::add_noise;

/// Which positions of the class-noun sequence count as non-character tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NctPositions {
    /// bos, eos and every pad.
    #[default]
    All,
    /// bos and eos only.
    BosEos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub nct: NctPositions,
    /// Emit a checkpoint every this many steps (0 disables).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for FineTuneConfig {
    /// Desk-scale settings for the toy backend.
    fn default() -> Self {
        Self {
            lambda: 0.01,
            learning_rate: 0.01,
            steps: 2_000,
            batch_size: 1,
            seed: 0,
            nct: NctPositions::All,
            checkpoint_every: 0,
        }
    }
}

impl FineTuneConfig {
    /// Settings used with a full-size backend.
    pub fn full_scale() -> Self {
        Self { learning_rate: 5e-6, steps: 400_000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), FineTuneError> {
        if self.steps == 0 {
            return Err(FineTuneError::InvalidConfig("steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(FineTuneError::InvalidConfig("batch_size must be at least 1"));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(FineTuneError::InvalidConfig("lambda must be finite and non-negative"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(FineTuneError::InvalidConfig("learning_rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sub: f64,
    pub l_reg: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FineTuneError {
    #[error("class noun `{0}` is not a single token")]
    UnknownClassNoun(String),
    #[error("invalid config: {0}")]
    InvalidConfig(&'static str),
    #[error("encoder states belong to different descriptors")]
    DescriptorMismatch,
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize, checkpoint: Box<TrainingCheckpoint> },
    #[error("resume checkpoint does not match this run: {0}")]
    BadCheckpoint(&'static str),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

pub fn total_loss(l_sub: f64, l_reg: f64, lambda: f64) -> f64 {
    l_sub + lambda * l_reg
}

/// Token sequence of the bare class noun, plus its character position.
pub fn class_noun_sequence<B: DifferentiableBackend + ?Sized>(
    backend: &B,
    class_noun: &str,
) -> Result<(TokenSequence, usize), FineTuneError> {
    let id = class_noun_token(backend, class_noun).ok_or_else(|| FineTuneError::UnknownClassNoun(class_noun.into()))?;
    let tokens = backend.tokenize(class_noun)?.tokens;
    let pos = tokens.positions_of(id)[0];
    Ok((tokens, pos))
}

/// Positions regularized toward the frozen encoder.
pub fn nct_positions(tokens: &TokenSequence, character_position: usize, mode: NctPositions, eos: u32) -> Vec<usize> {
    (0..tokens.len())
        .filter(|&p| p != character_position)
        .filter(|&p| match mode {
            NctPositions::All => true,
            NctPositions::BosEos => p == 0 || tokens.0[p] == eos,
        })
        .collect()
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Mean squared error between predicted and true noise at timestep `t`.
pub fn subject_loss<B: DifferentiableBackend + ?Sized>(
    backend: &B,
    encoder: &EncoderState,
    image_latent: &Latent,
    class_noun: &str,
    t: usize,
    noise: &Latent,
) -> Result<f64, FineTuneError> {
    let (tokens, _) = class_noun_sequence(backend, class_noun)?;
    let emb = backend.encode_tokens(encoder, &tokens)?;
    let x_t = add_noise(backend.alphas_cumprod(), image_latent, noise, t);
    let pred = backend.predict_noise(&x_t, &emb, t, None)?;
    Ok(mse(&pred.noise.data, &noise.data))
}

fn reg_from_embeddings(ft: &Embeddings, fr: &Embeddings, positions: &[usize]) -> f64 {
    positions.iter().map(|&p| ft.row(p).iter().zip(fr.row(p)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum()
}

pub fn regularization_loss<B: DifferentiableBackend + ?Sized>(
    backend: &B,
    finetuned: &EncoderState,
    frozen: &EncoderState,
    class_noun: &str,
    mode: NctPositions,
) -> Result<f64, FineTuneError> {
    if finetuned.descriptor != frozen.descriptor {
        return Err(FineTuneError::DescriptorMismatch);
    }
    let (tokens, pos) = class_noun_sequence(backend, class_noun)?;
    let ft = backend.encode_tokens(finetuned, &tokens)?;
    let fr = backend.encode_tokens(frozen, &tokens)?;
    let positions = nct_positions(&tokens, pos, mode, backend.descriptor().token_ids.eos);
    Ok(reg_from_embeddings(&ft, &fr, &positions))
}

/// One `(latent, t, noise)` draw.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    pub image_index: usize,
    pub t: usize,
    pub noise: Latent,
}

/// Everything fixed across steps of one training run.
pub struct Objective<'a, B: DifferentiableBackend + ?Sized> {
    pub backend: &'a B,
    pub tokens: TokenSequence,
    pub nct: Vec<usize>,
    pub frozen_embeddings: Embeddings,
    pub lambda: f64,
}

impl<'a, B: DifferentiableBackend + ?Sized> Objective<'a, B> {
    pub fn new(backend: &'a B, class_noun: &str, lambda: f64, mode: NctPositions) -> Result<Self, FineTuneError> {
        let (tokens, pos) = class_noun_sequence(backend, class_noun)?;
        let frozen_embeddings = backend.encode_tokens(backend.frozen_encoder(), &tokens)?;
        let nct = nct_positions(&tokens, pos, mode, backend.descriptor().token_ids.eos);
        Ok(Self { backend, tokens, nct, frozen_embeddings, lambda })
    }

    /// Loss averaged over `samples`.
    pub fn loss(
        &self,
        state: &EncoderState,
        latents: &[Latent],
        samples: &[NoiseSample],
    ) -> Result<LossBreakdown, FineTuneError> {
        let emb = self.backend.encode_tokens(state, &self.tokens)?;
        let l_reg = reg_from_embeddings(&emb, &self.frozen_embeddings, &self.nct);
        let mut l_sub = 0.0;
        for s in samples {
            let x_t = add_noise(self.backend.alphas_cumprod(), &latents[s.image_index], &s.noise, s.t);
            let pred = self.backend.predict_noise(&x_t, &emb, s.t, None)?;
            l_sub += mse(&pred.noise.data, &s.noise.data);
        }
        l_sub /= samples.len().max(1) as f64;
        Ok(LossBreakdown { l_sub, l_reg, l_total: total_loss(l_sub, l_reg, self.lambda) })
    }

    /// Loss and its gradient with respect to `state.params`.
    pub fn loss_and_grad(
        &self,
        state: &EncoderState,
        latents: &[Latent],
        samples: &[NoiseSample],
    ) -> Result<(LossBreakdown, Vec<f64>), FineTuneError> {
        let b = self.backend;
        let emb = b.encode_tokens(state, &self.tokens)?;
        let mut d_emb = Mat::zeros(emb.rows, emb.cols);
        let inv_batch = 1.0 / samples.len().max(1) as f64;
        let mut l_sub = 0.0;
        for s in samples {
            let x_t = add_noise(b.alphas_cumprod(), &latents[s.image_index], &s.noise, s.t);
            let pred = b.predict_noise(&x_t, &emb, s.t, None)?;
            let n = pred.noise.data.len() as f64;
            l_sub += mse(&pred.noise.data, &s.noise.data) * inv_batch;
            let d_noise = Latent {
                side: x_t.side,
                channels: x_t.channels,
                data: pred.noise.data.iter().zip(&s.noise.data).map(|(p, e)| 2.0 * (p - e) / n * inv_batch).collect(),
            };
            d_emb.add_assign(&b.noise_vjp(&x_t, &emb, s.t, &d_noise)?);
        }
        let l_reg = reg_from_embeddings(&emb, &self.frozen_embeddings, &self.nct);
        for &p in &self.nct {
            let fr = self.frozen_embeddings.row(p).to_vec();
            for ((g, a), f) in d_emb.row_mut(p).iter_mut().zip(emb.row(p)).zip(&fr) {
                *g += self.lambda * 2.0 * (a - f);
            }
        }
        let grad = b.encoder_vjp(state, &self.tokens, &d_emb)?;
        Ok((LossBreakdown { l_sub, l_reg, l_total: total_loss(l_sub, l_reg, self.lambda) }, grad))
    }
}

/// Draws `count` samples from stream `label` at `index`.
#[allow(clippy::too_many_arguments)]
pub fn draw_samples(
    seed: u64,
    label: u64,
    index: u64,
    count: usize,
    images: usize,
    train_timesteps: usize,
    latent_side: usize,
    channels: usize,
) -> Vec<NoiseSample> {
    let mut r = rng::stream(seed, label, index);
    (0..count)
        .map(|_| {
            let image_index = r.random_range(0..images);
            let t = r.random_range(0..train_timesteps);
            let data = rng::standard_normal_vec(&mut r, latent_side * latent_side * channels);
            NoiseSample { image_index, t, noise: Latent { side: latent_side, channels, data } }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_sub: f64,
    pub l_reg: f64,
    pub l_total: f64,
}

/// Resumable training state after `step` completed steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCheckpoint {
    pub step: usize,
    pub config: FineTuneConfig,
    pub class_noun: String,
    pub descriptor_id: String,
    pub params: Vec<f64>,
    pub history: Vec<StepRecord>,
}

pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) {}
    fn on_checkpoint(&mut self, _checkpoint: &TrainingCheckpoint) {}
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub encoder: EncoderState,
    pub history: Vec<StepRecord>,
}

/// Encodes every dataset image to a latent, in dataset order.
pub fn dataset_latents<B: DifferentiableBackend + ?Sized>(backend: &B, dataset: &TrainingDataset) -> Vec<Latent> {
    dataset.images().map(|img| backend.encode_image(img)).collect()
}

/// Plain SGD on `L_total`, one seeded `(image, t, noise)` draw per batch
/// element per step. Step `s` draws from its own stream, so resuming from a
/// checkpoint reproduces an uninterrupted run exactly.
pub fn train_text_encoder<B: DifferentiableBackend + ?Sized>(
    backend: &B,
    dataset: &TrainingDataset,
    config: &FineTuneConfig,
    resume: Option<TrainingCheckpoint>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainingOutcome, FineTuneError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(FineTuneError::EmptyDataset);
    }
    let latents = dataset_latents(backend, dataset);
    let objective = Objective::new(backend, &dataset.class_noun, config.lambda, config.nct)?;
    let d = backend.descriptor();

    let (mut state, mut history, start) = match resume {
        Some(ck) => {
            if ck.descriptor_id != d.backend_id || ck.class_noun != dataset.class_noun {
                return Err(FineTuneError::BadCheckpoint("descriptor or class noun differs"));
            }
            if ck.params.len() != backend.frozen_encoder().params.len() || ck.step > config.steps {
                return Err(FineTuneError::BadCheckpoint("parameter count or step out of range"));
            }
            let state = EncoderState { kind: EncoderKind::Finetuned, params: ck.params, descriptor: d.clone() };
            (state, ck.history, ck.step)
        }
        None => (backend.frozen_encoder().to_finetuned(), Vec::with_capacity(config.steps), 0),
    };

    for step in start..config.steps {
        let samples = draw_samples(
            config.seed,
            rng::LABEL_TRAIN_STEP,
            step as u64,
            config.batch_size,
            latents.len(),
            d.train_timesteps,
            d.latent_side,
            d.latent_channels,
        );
        let (loss, grad) = objective.loss_and_grad(&state, &latents, &samples)?;
        if !loss.l_total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(FineTuneError::NonFiniteLoss {
                step,
                checkpoint: Box::new(TrainingCheckpoint {
                    step,
                    config: config.clone(),
                    class_noun: dataset.class_noun.clone(),
                    descriptor_id: d.backend_id.clone(),
                    params: state.params,
                    history,
                }),
            });
        }
        for (p, g) in state.params.iter_mut().zip(&grad) {
            *p -= config.learning_rate * g;
        }
        let record = StepRecord { step, l_sub: loss.l_sub, l_reg: loss.l_reg, l_total: loss.l_total };
        observer.on_step(&record);
        history.push(record);
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            observer.on_checkpoint(&TrainingCheckpoint {
                step: step + 1,
                config: config.clone(),
                class_noun: dataset.class_noun.clone(),
                descriptor_id: d.backend_id.clone(),
                params: state.params.clone(),
                history: history.clone(),
            });
        }
    }
    Ok(TrainingOutcome { encoder: state, history })
}

/// Mean loss over a fixed held-out draw, independent of the training stream.
pub fn held_out_loss<B: DifferentiableBackend + ?Sized>(
    backend: &B,
    state: &EncoderState,
    dataset: &TrainingDataset,
    lambda: f64,
    mode: NctPositions,
    count: usize,
    seed: u64,
) -> Result<LossBreakdown, FineTuneError> {
    let latents = dataset_latents(backend, dataset);
    let objective = Objective::new(backend, &dataset.class_noun, lambda, mode)?;
    let d = backend.descriptor();
    let samples = draw_samples(
        seed,
        rng::LABEL_HELD_OUT,
        0,
        count,
        latents.len(),
        d.train_timesteps,
        d.latent_side,
        d.latent_channels,
    );
    objective.loss(state, &latents, &samples)
}
