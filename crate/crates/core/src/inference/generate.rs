//! One frame: fuse, sample with the layout editor, decode, and record
//! diagnostics.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::fusion::{bind_plugins, fuse_embeddings};
use super::layout::{edit_token_column, in_box_mass, rasterize_box, xi, EditSchedule, LayoutSpec, NormBox};
use super::InferenceError;
use crate::backend::{AttentionEditor, AttentionLayer, AttentionMap, Backend, Latent};
use crate::image::RgbImage;
use crate::plugin::CharacterPlugin;
use crate::sampler::{self, SamplerHooks, StepInfo};

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: String,
    pub plugins: Vec<CharacterPlugin>,
    pub layout: LayoutSpec,
    pub seed: u64,
    pub steps: usize,
    pub guidance_scale: f64,
    pub schedule: EditSchedule,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, seed: u64) -> Self {
        Self {
            prompt: prompt.into(),
            plugins: Vec::new(),
            layout: LayoutSpec::default(),
            seed,
            steps: sampler::DEFAULT_STEPS,
            guidance_scale: sampler::DEFAULT_GUIDANCE_SCALE,
            schedule: EditSchedule::default(),
        }
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.steps == 0 {
            return Err(InferenceError::ZeroSteps);
        }
        self.layout.validate()?;
        self.schedule.validate()?;
        if let Some(name) = self.layout.boxes.keys().find(|n| !self.plugins.iter().any(|p| &p.name == *n)) {
            return Err(InferenceError::UnknownCharacter(name.clone()));
        }
        Ok(())
    }
}

/// Spatial attention map of one layer, row-major `side x side`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionGrid {
    pub layer: usize,
    pub side: usize,
    pub values: Vec<f64>,
}

impl AttentionGrid {
    /// `(row, col)` of the largest value.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.side, best % self.side)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    pub seed: u64,
    pub steps: usize,
    /// Edit strength used at each step.
    pub xi: Vec<f64>,
    /// Token positions fused with each character's plugin.
    pub positions: BTreeMap<String, Vec<usize>>,
    /// Per step, share of each boxed character's attention that lands in its box.
    pub in_box_mass: BTreeMap<String, Vec<f64>>,
    /// Final-step attention per character, averaged over its positions.
    pub final_attention: BTreeMap<String, Vec<AttentionGrid>>,
    pub overlapping_boxes: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub image: RgbImage,
    pub latent: Latent,
    pub diagnostics: FrameDiagnostics,
}

struct CharacterEdit {
    positions: Vec<usize>,
    /// Bias map per attention side.
    bias: BTreeMap<usize, Vec<f64>>,
}

struct LayoutEditor {
    characters: Vec<CharacterEdit>,
    xi: f64,
}

impl AttentionEditor for LayoutEditor {
    fn edit(&mut self, layer: &AttentionLayer, scores: &mut [f64]) {
        if self.xi == 0.0 {
            return;
        }
        for c in &self.characters {
            if let Some(bias) = c.bias.get(&layer.side) {
                for &p in &c.positions {
                    edit_token_column(scores, layer.tokens, p, bias, self.xi);
                }
            }
        }
    }
}

struct Tracked {
    name: String,
    positions: Vec<usize>,
    bounds: Option<NormBox>,
}

struct FrameHooks {
    editor: LayoutEditor,
    schedule: EditSchedule,
    tracked: Vec<Tracked>,
    xi: Vec<f64>,
    in_box_mass: BTreeMap<String, Vec<f64>>,
    final_attention: BTreeMap<String, Vec<AttentionGrid>>,
    total: usize,
}

fn mean_map(map: &AttentionMap, positions: &[usize]) -> Vec<f64> {
    let cells = map.layer.side * map.layer.side;
    let mut out = alloc::vec![0.0; cells];
    for &p in positions {
        for (o, v) in out.iter_mut().zip(map.token_map(p)) {
            *o += v;
        }
    }
    let n = positions.len().max(1) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

impl SamplerHooks for FrameHooks {
    fn editor_for_step(&mut self, index: usize, total: usize) -> Option<&mut dyn AttentionEditor> {
        let x = xi(&self.schedule, index, total);
        self.xi.push(x);
        if self.editor.characters.is_empty() {
            return None;
        }
        self.editor.xi = x;
        Some(&mut self.editor)
    }

    fn after_step(&mut self, info: &StepInfo<'_>) {
        let maps = &info.conditional.attention;
        for c in &self.tracked {
            if let Some(b) = &c.bounds {
                let mut sum = 0.0;
                let mut n = 0usize;
                for m in maps {
                    for &p in &c.positions {
                        sum += in_box_mass(&m.token_map(p), m.layer.side, b);
                        n += 1;
                    }
                }
                let v = if n > 0 { sum / n as f64 } else { 0.0 };
                self.in_box_mass.entry(c.name.clone()).or_default().push(v);
            }
            if info.index + 1 == self.total {
                let grids = maps
                    .iter()
                    .map(|m| AttentionGrid {
                        layer: m.layer.index,
                        side: m.layer.side,
                        values: mean_map(m, &c.positions),
                    })
                    .collect();
                self.final_attention.insert(c.name.clone(), grids);
            }
        }
    }
}

/// Generates one frame. With no plugins and no boxes this is plain
/// classifier-free-guided DDIM from the frozen prompt embedding.
/// Every check [`generate_frame`] makes before sampling starts, without
/// sampling.
pub fn check_request<B: Backend + ?Sized>(backend: &B, request: &GenerationRequest) -> Result<(), InferenceError> {
    request.validate()?;
    let bindings = bind_plugins(backend, &request.plugins)?;
    let tokens = backend.tokenize(&request.prompt)?.tokens;
    let prompt = backend.encode_tokens(backend.frozen_encoder(), &tokens)?;
    fuse_embeddings(&prompt, &tokens, &bindings)?;
    Ok(())
}

pub fn generate_frame<B: Backend + ?Sized>(
    backend: &B,
    request: &GenerationRequest,
) -> Result<FrameOutput, InferenceError> {
    request.validate()?;
    let d = backend.descriptor();
    let bindings = bind_plugins(backend, &request.plugins)?;
    let tokens = backend.tokenize(&request.prompt)?.tokens;
    let frozen = backend.frozen_encoder();
    let prompt = backend.encode_tokens(frozen, &tokens)?;
    let uncond = backend.encode_tokens(frozen, &backend.unconditional_tokens())?;
    let fused = fuse_embeddings(&prompt, &tokens, &bindings)?;

    let layout = &request.layout;
    let mut characters = Vec::new();
    let mut tracked = Vec::new();
    for b in &bindings {
        let name = &b.plugin.name;
        let positions = fused.positions[name].clone();
        let bounds = layout.boxes.get(name).copied();
        if let Some(bx) = &bounds {
            let bias = d
                .attention_sides
                .iter()
                .map(|&s| (s, rasterize_box(bx, s, layout.positive_value, layout.negative_value)))
                .collect();
            characters.push(CharacterEdit { positions: positions.clone(), bias });
        }
        tracked.push(Tracked { name: name.clone(), positions, bounds });
    }

    let mut hooks = FrameHooks {
        editor: LayoutEditor { characters, xi: 0.0 },
        schedule: request.schedule,
        tracked,
        xi: Vec::with_capacity(request.steps),
        in_box_mass: BTreeMap::new(),
        final_attention: BTreeMap::new(),
        total: request.steps,
    };
    let latent = sampler::sample(
        backend,
        &fused.embeddings,
        &uncond,
        request.seed,
        request.steps,
        request.guidance_scale,
        &mut hooks,
    )?;
    let image = backend.decode_latent(&latent)?;
    Ok(FrameOutput {
        image,
        latent,
        diagnostics: FrameDiagnostics {
            seed: request.seed,
            steps: request.steps,
            xi: hooks.xi,
            positions: fused.positions,
            in_box_mass: hooks.in_box_mass,
            final_attention: hooks.final_attention,
            overlapping_boxes: layout.overlapping_pairs(),
        },
    })
}
