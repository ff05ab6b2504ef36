//! Replacing class-noun rows of the prompt embedding with plugin rows.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::InferenceError;
use crate::backend::{class_noun_token, Backend, Embeddings, TokenSequence};
use crate::plugin::{self, CharacterPlugin};

/// A plugin resolved against a backend's tokenizer.
#[derive(Debug, Clone, Copy)]
pub struct PluginBinding<'a> {
    pub token: u32,
    pub plugin: &'a CharacterPlugin,
}

/// Validates plugins against the backend and resolves their class-noun tokens.
pub fn bind_plugins<'a, B: Backend + ?Sized>(
    backend: &B,
    plugins: &'a [CharacterPlugin],
) -> Result<Vec<PluginBinding<'a>>, InferenceError> {
    let d = backend.descriptor();
    let mut out: Vec<PluginBinding<'a>> = Vec::with_capacity(plugins.len());
    for p in plugins {
        if p.descriptor_id != d.backend_id {
            return Err(InferenceError::DescriptorMismatch {
                name: p.name.clone(),
                plugin: p.descriptor_id.clone(),
                session: d.backend_id.clone(),
            });
        }
        if let Err(v) = plugin::validate(p, d) {
            let reason = v.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ");
            return Err(InferenceError::InvalidPlugin { name: p.name.clone(), reason });
        }
        let token = class_noun_token(backend, &p.class_noun)
            .ok_or_else(|| InferenceError::UnknownClassNoun(p.class_noun.clone()))?;
        if let Some(prev) = out.iter().find(|b| b.token == token) {
            return Err(InferenceError::DuplicateClassNoun(prev.plugin.name.clone(), p.name.clone()));
        }
        out.push(PluginBinding { token, plugin: p });
    }
    Ok(out)
}

/// Fused prompt embedding plus the positions each character occupies.
#[derive(Debug, Clone, PartialEq)]
pub struct Fused {
    pub embeddings: Embeddings,
    pub positions: BTreeMap<String, Vec<usize>>,
}

/// Row `p` of the result is plugin row `p - 1` wherever `tokens[p]` is a bound
/// class noun, and the frozen prompt row otherwise.
pub fn fuse_embeddings(
    prompt: &Embeddings,
    tokens: &TokenSequence,
    bindings: &[PluginBinding<'_>],
) -> Result<Fused, InferenceError> {
    if prompt.rows != tokens.len() {
        return Err(InferenceError::ShapeMismatch("prompt embedding rows must equal sequence length"));
    }
    let max = tokens.len().saturating_sub(2);
    let mut embeddings = prompt.clone();
    let mut positions = BTreeMap::new();
    for b in bindings {
        if b.plugin.width != prompt.cols {
            return Err(InferenceError::ShapeMismatch("plugin width must equal embedding width"));
        }
        let at = tokens.positions_of(b.token);
        if at.is_empty() {
            return Err(InferenceError::CharacterNotInPrompt {
                name: b.plugin.name.clone(),
                class_noun: b.plugin.class_noun.clone(),
            });
        }
        for &p in &at {
            let row = b.plugin.row_for_position(p).filter(|_| p <= max);
            let row = row.ok_or(InferenceError::PositionOutOfRange { position: p, max })?;
            for (dst, &v) in embeddings.row_mut(p).iter_mut().zip(row) {
                *dst = v as f64;
            }
        }
        positions.insert(b.plugin.name.clone(), at);
    }
    Ok(Fused { embeddings, positions })
}
