//! Plugin extraction: slide the character token across every valid
//! position, encode each sequence with the fine-tuned encoder, and keep the
//! character token's embedding from each row.

use alloc::string::String;
use alloc::vec::Vec;

use crate::backend::{class_noun_token, Backend, BackendDescriptor, BackendError, EncoderState, TokenSequence};
use crate::plugin::{CharacterPlugin, PluginMetadata, FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExtractError {
    #[error("class noun `{0}` is not a single token")]
    MultiTokenNoun(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("embedding matrix shape mismatch: {0}")]
    ShapeMismatch(&'static str),
}

/// `Q x L` token ids, `Q = L - 2`. Row `q` is `bos` at column `q`, the
/// character token at `q + 1`, `eos` at `q + 2`, and `pad` elsewhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMatrix {
    pub rows: Vec<TokenSequence>,
    pub character_token: u32,
}

impl TokenMatrix {
    pub fn q(&self) -> usize {
        self.rows.len()
    }

    /// Column of the character token in row `q`.
    pub fn character_column(&self, q: usize) -> Option<usize> {
        self.rows[q].as_slice().iter().position(|&t| t == self.character_token)
    }
}

pub fn build_token_matrix(descriptor: &BackendDescriptor, character_token: u32) -> TokenMatrix {
    let l = descriptor.max_len;
    let ids = descriptor.token_ids;
    let rows = (0..l - 2)
        .map(|q| {
            let mut row = alloc::vec![ids.pad; l];
            row[q] = ids.bos;
            row[q + 1] = character_token;
            row[q + 2] = ids.eos;
            TokenSequence(row)
        })
        .collect();
    TokenMatrix { rows, character_token }
}

/// Resolves `class_noun` with the backend's tokenizer, then builds the matrix.
pub fn token_matrix_for_noun<B: Backend + ?Sized>(backend: &B, class_noun: &str) -> Result<TokenMatrix, ExtractError> {
    let id = class_noun_token(backend, class_noun).ok_or_else(|| ExtractError::MultiTokenNoun(class_noun.into()))?;
    Ok(build_token_matrix(backend.descriptor(), id))
}

/// `Q x L x H` encoder output over a token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub q: usize,
    pub len: usize,
    pub width: usize,
    /// `values[(q * len + l) * width + h]`
    pub values: Vec<f64>,
    /// Character-token column of each row, read from the token matrix.
    pub character_columns: Vec<usize>,
}

impl EmbeddingMatrix {
    pub fn embedding(&self, q: usize, l: usize) -> &[f64] {
        &self.values[(q * self.len + l) * self.width..][..self.width]
    }
}

/// Encodes every row of the token matrix independently.
pub fn encode_token_matrix<B: Backend + ?Sized>(
    backend: &B,
    state: &EncoderState,
    tm: &TokenMatrix,
) -> Result<EmbeddingMatrix, ExtractError> {
    let d = backend.descriptor();
    if tm.q() != d.max_len - 2 || tm.rows.iter().any(|r| r.len() != d.max_len) {
        return Err(ExtractError::ShapeMismatch("token matrix must be (L-2) x L"));
    }
    let mut values = Vec::with_capacity(tm.q() * d.max_len * d.width);
    let mut character_columns = Vec::with_capacity(tm.q());
    for (q, row) in tm.rows.iter().enumerate() {
        let col = tm.character_column(q).ok_or(ExtractError::ShapeMismatch("row without character token"))?;
        character_columns.push(col);
        values.extend_from_slice(&backend.encode_tokens(state, row)?.data);
    }
    Ok(EmbeddingMatrix { q: tm.q(), len: d.max_len, width: d.width, values, character_columns })
}

/// Plugin row `r` is the character-token embedding of matrix row `r`.
pub fn extract_plugin(em: &EmbeddingMatrix, metadata: PluginMetadata) -> Result<CharacterPlugin, ExtractError> {
    if em.character_columns.len() != em.q || em.values.len() != em.q * em.len * em.width {
        return Err(ExtractError::ShapeMismatch("embedding matrix buffers"));
    }
    let mut values = Vec::with_capacity(em.q * em.width);
    for (q, &col) in em.character_columns.iter().enumerate() {
        if col >= em.len {
            return Err(ExtractError::ShapeMismatch("character column out of range"));
        }
        values.extend(em.embedding(q, col).iter().map(|&v| v as f32));
    }
    Ok(CharacterPlugin {
        name: metadata.name,
        class_noun: metadata.class_noun,
        rows: em.q,
        width: em.width,
        values,
        descriptor_id: metadata.descriptor_id,
        created_at: metadata.created_at,
        format_version: FORMAT_VERSION,
    })
}

/// Token matrix, encoding and extraction in one call.
pub fn extract_character_plugin<B: Backend + ?Sized>(
    backend: &B,
    finetuned: &EncoderState,
    name: &str,
    class_noun: &str,
    created_at: u64,
) -> Result<CharacterPlugin, ExtractError> {
    let tm = token_matrix_for_noun(backend, class_noun)?;
    let em = encode_token_matrix(backend, finetuned, &tm)?;
    extract_plugin(
        &em,
        PluginMetadata {
            name: name.into(),
            class_noun: class_noun.into(),
            descriptor_id: backend.descriptor().backend_id.clone(),
            created_at,
        },
    )
}
