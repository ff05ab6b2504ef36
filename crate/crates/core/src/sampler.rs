//! Deterministic DDIM sampling (eta = 0) with classifier-free guidance.

use alloc::vec::Vec;

use crate::backend::{AttentionEditor, Backend, BackendError, Embeddings, Latent, NoisePrediction};
use crate::rng;

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.5;

/// Inference timesteps, descending: `s * (T / steps) + 1` for `s` in `steps-1..=0`.
pub fn ddim_timesteps(train_timesteps: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, train_timesteps);
    let ratio = train_timesteps / steps;
    let offset = usize::from(ratio > 1);
    (0..steps).map(|s| (s * ratio + offset).min(train_timesteps - 1)).rev().collect()
}

/// One DDIM update from timestep `t` to `t_prev` (`None` at the last step).
pub fn ddim_step(alphas_cumprod: &[f64], eps: &Latent, t: usize, t_prev: Option<usize>, sample: &Latent) -> Latent {
    let a_t = alphas_cumprod[t];
    let a_prev = t_prev.map_or(alphas_cumprod[0], |p| alphas_cumprod[p]);
    let (sa, sb) = (libm::sqrt(a_t), libm::sqrt(1.0 - a_t));
    let (pa, pb) = (libm::sqrt(a_prev), libm::sqrt(1.0 - a_prev));
    let data = sample
        .data
        .iter()
        .zip(&eps.data)
        .map(|(&x, &e)| {
            let x0 = (x - sb * e) / sa;
            pa * x0 + pb * e
        })
        .collect();
    Latent { side: sample.side, channels: sample.channels, data }
}

/// Forward-noises a clean latent: `sqrt(a) x0 + sqrt(1 - a) noise`.
pub fn add_noise(alphas_cumprod: &[f64], x0: &Latent, noise: &Latent, t: usize) -> Latent {
    let a = alphas_cumprod[t];
    let (sa, sb) = (libm::sqrt(a), libm::sqrt(1.0 - a));
    let data = x0.data.iter().zip(&noise.data).map(|(x, n)| sa * x + sb * n).collect();
    Latent { side: x0.side, channels: x0.channels, data }
}

/// Seeded standard-normal starting latent.
pub fn initial_latent<B: Backend + ?Sized>(backend: &B, seed: u64) -> Latent {
    let d = backend.descriptor();
    let mut r = rng::stream(seed, rng::LABEL_SAMPLER_NOISE, 0);
    Latent {
        side: d.latent_side,
        channels: d.latent_channels,
        data: rng::standard_normal_vec(&mut r, d.latent_side * d.latent_side * d.latent_channels),
    }
}

/// What the sampler reports after each step.
pub struct StepInfo<'a> {
    pub index: usize,
    pub timestep: usize,
    pub conditional: &'a NoisePrediction,
}

/// Per-step hooks for the sampler. `editor_for_step` supplies the attention
/// editor for the conditional pass of step `index`.
pub trait SamplerHooks {
    fn editor_for_step(&mut self, _index: usize, _total: usize) -> Option<&mut dyn AttentionEditor> {
        None
    }

    fn after_step(&mut self, _info: &StepInfo<'_>) {}
}

/// No hooks: the plain sampler.
pub struct NoHooks;

impl SamplerHooks for NoHooks {}

/// Runs DDIM from seeded noise and returns the final latent.
pub fn sample<B: Backend + ?Sized, H: SamplerHooks>(
    backend: &B,
    conditional: &Embeddings,
    unconditional: &Embeddings,
    seed: u64,
    steps: usize,
    guidance_scale: f64,
    hooks: &mut H,
) -> Result<Latent, BackendError> {
    let alphas = backend.alphas_cumprod();
    let timesteps = ddim_timesteps(alphas.len(), steps);
    let mut x = initial_latent(backend, seed);
    for (i, &t) in timesteps.iter().enumerate() {
        let cond = backend.predict_noise(&x, conditional, t, hooks.editor_for_step(i, timesteps.len()))?;
        let uncond = backend.predict_noise(&x, unconditional, t, None)?;
        let eps = Latent {
            side: x.side,
            channels: x.channels,
            data: uncond.noise.data.iter().zip(&cond.noise.data).map(|(u, c)| u + guidance_scale * (c - u)).collect(),
        };
        hooks.after_step(&StepInfo { index: i, timestep: t, conditional: &cond });
        x = ddim_step(alphas, &eps, t, timesteps.get(i + 1).copied(), &x);
    }
    Ok(x)
}
