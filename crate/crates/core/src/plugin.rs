//! Character plugins and the `.cgcp` file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CGCP"            4 bytes magic
//! version           u32
//! metadata length   u32
//! metadata          UTF-8 JSON object {name, class_noun, descriptor_id, created_at}
//! rows, cols        u32, u32   (L - 2, H)
//! payload           rows * cols f32, row-major
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backend::BackendDescriptor;

pub const MAGIC: &[u8; 4] = b"CGCP";
pub const FORMAT_VERSION: u32 = 1;
pub const FILE_EXTENSION: &str = "cgcp";

/// Per-position character-token embeddings distilled from a fine-tuned
/// text encoder. Row `r` belongs to sequence position `r + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacterPlugin {
    pub name: String,
    pub class_noun: String,
    pub rows: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub descriptor_id: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub format_version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PluginMetadata {
    pub name: String,
    pub class_noun: String,
    pub descriptor_id: String,
    pub created_at: u64,
}

impl CharacterPlugin {
    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.width..(r + 1) * self.width]
    }

    /// Row for sequence position `position` (1-based, `1..=L-2`).
    pub fn row_for_position(&self, position: usize) -> Option<&[f32]> {
        (position >= 1 && position <= self.rows).then(|| self.row(position - 1))
    }

    pub fn metadata(&self) -> PluginMetadata {
        PluginMetadata {
            name: self.name.clone(),
            class_noun: self.class_noun.clone(),
            descriptor_id: self.descriptor_id.clone(),
            created_at: self.created_at,
        }
    }

    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.rows).map(|r| libm::sqrt(self.row(r).iter().map(|&v| (v as f64) * (v as f64)).sum())).collect()
    }

    pub fn payload_len(&self) -> usize {
        4 * self.rows * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PluginFormatError {
    #[error("not a plugin file (bad magic)")]
    BadMagic,
    #[error("unsupported plugin format version {0}")]
    VersionUnsupported(u32),
    #[error("file truncated inside the header")]
    Truncated,
    #[error("metadata block is not valid: {0}")]
    BadMetadata(String),
    #[error("payload holds {got} bytes, dims need {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteEntry { row: usize, col: usize },
}

fn metadata_bytes(plugin: &CharacterPlugin) -> Vec<u8> {
    serde_json::to_vec(&plugin.metadata()).expect("metadata serializes")
}

/// Bytes before the payload for this plugin.
pub fn header_len(plugin: &CharacterPlugin) -> usize {
    4 + 4 + 4 + metadata_bytes(plugin).len() + 8
}

pub fn serialize(plugin: &CharacterPlugin) -> Vec<u8> {
    let meta = metadata_bytes(plugin);
    let mut out = Vec::with_capacity(20 + meta.len() + plugin.payload_len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&plugin.format_version.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(plugin.rows as u32).to_le_bytes());
    out.extend_from_slice(&(plugin.width as u32).to_le_bytes());
    for v in &plugin.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PluginFormatError> {
        let end = self.at.checked_add(n).ok_or(PluginFormatError::Truncated)?;
        let s = self.buf.get(self.at..end).ok_or(PluginFormatError::Truncated)?;
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PluginFormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<CharacterPlugin, PluginFormatError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(PluginFormatError::BadMagic);
    }
    let mut r = Reader { buf: bytes, at: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(PluginFormatError::VersionUnsupported(version));
    }
    let meta_len = r.u32()? as usize;
    let meta_raw = r.take(meta_len)?;
    let meta: PluginMetadata =
        serde_json::from_slice(meta_raw).map_err(|e| PluginFormatError::BadMetadata(alloc::format!("{e}")))?;
    let rows = r.u32()? as usize;
    let width = r.u32()? as usize;
    let payload = &bytes[r.at..];
    let expected = rows.checked_mul(width).and_then(|n| n.checked_mul(4)).unwrap_or(usize::MAX);
    if payload.len() != expected {
        return Err(PluginFormatError::DimMismatch { expected, got: payload.len() });
    }
    let mut values = Vec::with_capacity(rows * width);
    for (i, c) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() {
            return Err(PluginFormatError::NonFiniteEntry { row: i / width, col: i % width });
        }
        values.push(v);
    }
    Ok(CharacterPlugin {
        name: meta.name,
        class_noun: meta.class_noun,
        rows,
        width,
        values,
        descriptor_id: meta.descriptor_id,
        created_at: meta.created_at,
        format_version: version,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Violation {
    #[error("plugin name is empty")]
    EmptyName,
    #[error("plugin has {got} rows, descriptor needs {expected}")]
    RowCount { expected: usize, got: usize },
    #[error("plugin width is {got}, descriptor needs {expected}")]
    Width { expected: usize, got: usize },
    #[error("value buffer has {got} entries, dims need {expected}")]
    ValuesLength { expected: usize, got: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("plugin built for `{got}`, session is `{expected}`")]
    DescriptorId { expected: String, got: String },
    #[error("class noun `{0}` is not a single token")]
    ClassNoun(String),
}

/// True for a single word token under the word-level tokenizer rule.
pub fn is_single_token_noun(noun: &str) -> bool {
    !noun.is_empty() && noun.chars().all(|c| c.is_alphanumeric())
}

pub fn validate(plugin: &CharacterPlugin, descriptor: &BackendDescriptor) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    if plugin.name.trim().is_empty() {
        v.push(Violation::EmptyName);
    }
    if plugin.rows != descriptor.character_positions() {
        v.push(Violation::RowCount { expected: descriptor.character_positions(), got: plugin.rows });
    }
    if plugin.width != descriptor.width {
        v.push(Violation::Width { expected: descriptor.width, got: plugin.width });
    }
    if plugin.values.len() != plugin.rows * plugin.width {
        v.push(Violation::ValuesLength { expected: plugin.rows * plugin.width, got: plugin.values.len() });
    }
    if let Some(i) = plugin.values.iter().position(|x| !x.is_finite()) {
        let w = plugin.width.max(1);
        v.push(Violation::NonFinite { row: i / w, col: i % w });
    }
    if plugin.descriptor_id != descriptor.backend_id {
        v.push(Violation::DescriptorId { expected: descriptor.backend_id.clone(), got: plugin.descriptor_id.clone() });
    }
    if !is_single_token_noun(&plugin.class_noun) {
        v.push(Violation::ClassNoun(plugin.class_noun.clone()));
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}
