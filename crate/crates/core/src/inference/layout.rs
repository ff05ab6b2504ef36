//! Layout boxes, bias-map rasterization, the edit-strength schedule, and the
//! additive cross-attention edit.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::InferenceError;

pub const DEFAULT_POSITIVE_VALUE: f64 = 2.5;
pub const DEFAULT_NEGATIVE_VALUE: f64 = -1e8;

/// Normalized box, serialized as `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct NormBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for NormBox {
    fn from([x0, y0, x1, y1]: [f64; 4]) -> Self {
        Self { x0, y0, x1, y1 }
    }
}

impl From<NormBox> for [f64; 4] {
    fn from(b: NormBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl NormBox {
    pub const FULL: NormBox = NormBox { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 };

    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.x0)
            && (0.0..=1.0).contains(&self.x1)
            && (0.0..=1.0).contains(&self.y0)
            && (0.0..=1.0).contains(&self.y1)
            && self.x0 < self.x1
            && self.y0 < self.y1
    }

    /// Whether the center of cell `(row, col)` of a `side x side` grid is inside.
    #[inline]
    pub fn contains_cell(&self, row: usize, col: usize, side: usize) -> bool {
        let cx = (col as f64 + 0.5) / side as f64;
        let cy = (row as f64 + 0.5) / side as f64;
        cx >= self.x0 && cx < self.x1 && cy >= self.y0 && cy < self.y1
    }

    pub fn overlaps(&self, other: &NormBox) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

fn default_positive() -> f64 {
    DEFAULT_POSITIVE_VALUE
}

fn default_negative() -> f64 {
    DEFAULT_NEGATIVE_VALUE
}

/// Per-character boxes for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    #[serde(default)]
    pub boxes: BTreeMap<String, NormBox>,
    #[serde(default = "default_positive")]
    pub positive_value: f64,
    #[serde(default = "default_negative")]
    pub negative_value: f64,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        Self { boxes: BTreeMap::new(), positive_value: DEFAULT_POSITIVE_VALUE, negative_value: DEFAULT_NEGATIVE_VALUE }
    }
}

impl LayoutSpec {
    pub fn with_box(mut self, name: impl Into<String>, b: NormBox) -> Self {
        self.boxes.insert(name.into(), b);
        self
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        if let Some((name, _)) = self.boxes.iter().find(|(_, b)| !b.is_valid()) {
            return Err(InferenceError::InvalidBox(name.clone()));
        }
        if !(self.positive_value > 0.0 && self.negative_value < 0.0) {
            return Err(InferenceError::InvalidLayoutValues);
        }
        Ok(())
    }

    /// Pairs of characters whose boxes overlap (allowed, reported for UIs).
    pub fn overlapping_pairs(&self) -> Vec<(String, String)> {
        let items: Vec<_> = self.boxes.iter().collect();
        let mut out = Vec::new();
        for (i, (a, ba)) in items.iter().enumerate() {
            for (b, bb) in &items[i + 1..] {
                if ba.overlaps(bb) {
                    out.push(((*a).clone(), (*b).clone()));
                }
            }
        }
        out
    }
}

/// `side x side` map (row-major, row = y): `positive` where the cell center
/// is inside `b`, `negative` elsewhere.
pub fn rasterize_box(b: &NormBox, side: usize, positive: f64, negative: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            out.push(if b.contains_cell(row, col, side) { positive } else { negative });
        }
    }
    out
}

pub fn rasterize_layout(layout: &LayoutSpec, character: &str, side: usize) -> Result<Vec<f64>, InferenceError> {
    let b = layout.boxes.get(character).ok_or_else(|| InferenceError::UnknownCharacter(character.into()))?;
    Ok(rasterize_box(b, side, layout.positive_value, layout.negative_value))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    LinearDecay,
    ConstantWindow,
}

/// Edit strength over inference steps; non-increasing, zero after the window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditSchedule {
    pub kind: ScheduleKind,
    pub active_fraction: f64,
    pub base_scale: f64,
}

impl Default for EditSchedule {
    fn default() -> Self {
        Self { kind: ScheduleKind::LinearDecay, active_fraction: 0.5, base_scale: 1.0 }
    }
}

impl EditSchedule {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if !(self.active_fraction > 0.0 && self.active_fraction <= 1.0) {
            return Err(InferenceError::InvalidSchedule("active_fraction must be in (0, 1]"));
        }
        if !self.base_scale.is_finite() || self.base_scale < 0.0 {
            return Err(InferenceError::InvalidSchedule("base_scale must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Edit strength at inference step `t` of `total`.
pub fn xi(schedule: &EditSchedule, t: usize, total: usize) -> f64 {
    let window = schedule.active_fraction * total as f64;
    match schedule.kind {
        ScheduleKind::LinearDecay => schedule.base_scale * (1.0 - t as f64 / window).max(0.0),
        ScheduleKind::ConstantWindow => {
            if (t as f64) < window {
                schedule.base_scale
            } else {
                0.0
            }
        }
    }
}

/// `cam + xi * bias`, elementwise.
pub fn edit_cross_attention(cam: &[f64], bias: &[f64], xi_value: f64) -> Result<Vec<f64>, InferenceError> {
    if cam.len() != bias.len() {
        return Err(InferenceError::ShapeMismatch("bias map must match the attention map"));
    }
    if xi_value == 0.0 {
        return Ok(cam.to_vec());
    }
    Ok(cam.iter().zip(bias).map(|(c, b)| c + xi_value * b).collect())
}

/// Adds `xi * bias` to column `token` of a `cells x tokens` score buffer.
pub(crate) fn edit_token_column(scores: &mut [f64], tokens: usize, token: usize, bias: &[f64], xi_value: f64) {
    for (row, b) in scores.chunks_mut(tokens).zip(bias) {
        row[token] += xi_value * b;
    }
}

/// Fraction of `map`'s mass (one value per cell) whose cell center lies in `b`.
pub fn in_box_mass(map: &[f64], side: usize, b: &NormBox) -> f64 {
    let mut inside = 0.0;
    let mut total = 0.0;
    for row in 0..side {
        for col in 0..side {
            let v = map[row * side + col];
            total += v;
            if b.contains_cell(row, col, side) {
                inside += v;
            }
        }
    }
    if total > 0.0 {
        inside / total
    } else {
        0.0
    }
}
