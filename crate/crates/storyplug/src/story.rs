//! Story scripts and multi-frame rendering.
//!
//! A script is JSON:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "title": "park day",
//!   "style_suffix": "cartoon style",
//!   "frames": [
//!     {
//!       "id": "f01",
//!       "prompt": "a girl and a dog in a park",
//!       "characters": ["mia", "rex"],
//!       "layout": { "boxes": { "mia": [0.0, 0.1, 0.5, 1.0], "rex": [0.5, 0.4, 1.0, 1.0] } },
//!       "seed": 7
//!     }
//!   ]
//! }
//! ```
//!
//! Boxes are `[x0, y0, x1, y1]` in normalized image coordinates, keyed by
//! plugin name. `steps`, `guidance_scale` and `schedule` may be set per
//! script or per frame.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use storyplug_core::inference::{
    generate_frame, EditSchedule, FrameDiagnostics, FrameOutput, GenerationRequest, LayoutSpec,
};
use storyplug_core::sampler::{DEFAULT_GUIDANCE_SCALE, DEFAULT_STEPS};
use storyplug_core::{Backend, CharacterPlugin};

use crate::error::{Error, Result};
use crate::io;

pub const SCHEMA_VERSION: u32 = 1;
/// Characters per frame beyond which a warning is issued.
pub const CHARACTER_SOFT_CAP: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSpec {
    pub id: String,
    pub prompt: String,
    #[serde(default)]
    pub characters: Vec<String>,
    #[serde(default)]
    pub layout: LayoutSpec,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<EditSchedule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoryScript {
    pub schema_version: u32,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_suffix: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<EditSchedule>,
    pub frames: Vec<FrameSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, thiserror::Error)]
#[error("schema violation at {}{field}: {message}", line.map(|l| format!("line {l}, ")).unwrap_or_default())]
pub struct SchemaViolation {
    pub line: Option<usize>,
    pub field: String,
    pub message: String,
}

impl SchemaViolation {
    fn at(line: Option<usize>, field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { line, field: field.into(), message: message.into() }
    }
}

/// Line (1-based) where each element of the top-level `frames` array begins.
fn frame_lines(text: &str) -> Vec<usize> {
    let mut lines = Vec::new();
    let mut depth = 0usize;
    let mut line = 1usize;
    let mut in_string = false;
    let mut escaped = false;
    let mut last_key = String::new();
    let mut current = String::new();
    let mut frames_depth = None;
    for ch in text.chars() {
        if ch == '\n' {
            line += 1;
        }
        if in_string {
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_string = false;
                last_key = std::mem::take(&mut current);
            } else {
                current.push(ch);
            }
            continue;
        }
        match ch {
            '"' => in_string = true,
            '{' | '[' => {
                if ch == '[' && depth == 1 && last_key == "frames" {
                    frames_depth = Some(depth + 1);
                } else if ch == '{' && frames_depth == Some(depth) {
                    lines.push(line);
                }
                depth += 1;
            }
            '}' | ']' => {
                depth = depth.saturating_sub(1);
                if frames_depth == Some(depth + 1) && ch == ']' {
                    frames_depth = None;
                }
            }
            _ => {}
        }
    }
    lines
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl StoryScript {
    /// Checks the rules serde cannot express. `lines[i]` is where frame `i`
    /// starts, when known.
    pub fn check(&self, lines: &[usize]) -> Result<(), SchemaViolation> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(SchemaViolation::at(
                Some(1),
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        if self.frames.is_empty() {
            return Err(SchemaViolation::at(None, "frames", "a story needs at least one frame"));
        }
        if let Some(s) = self.steps.filter(|&s| s == 0) {
            return Err(SchemaViolation::at(None, "steps", format!("must be at least 1, found {s}")));
        }
        if let Some(s) = &self.schedule {
            s.validate().map_err(|e| SchemaViolation::at(None, "schedule", e.to_string()))?;
        }
        let mut ids = BTreeSet::new();
        for (i, f) in self.frames.iter().enumerate() {
            let line = lines.get(i).copied();
            let field = |name: &str| format!("frames[{i}].{name}");
            if !valid_id(&f.id) {
                return Err(SchemaViolation::at(line, field("id"), "ids are 1-64 characters of [A-Za-z0-9_-]"));
            }
            if !ids.insert(f.id.as_str()) {
                return Err(SchemaViolation::at(line, field("id"), format!("duplicate frame id `{}`", f.id)));
            }
            if f.prompt.trim().is_empty() {
                return Err(SchemaViolation::at(line, field("prompt"), "prompt is empty"));
            }
            let mut seen = BTreeSet::new();
            for c in &f.characters {
                if !seen.insert(c.as_str()) {
                    return Err(SchemaViolation::at(line, field("characters"), format!("`{c}` listed twice")));
                }
                if !f.layout.boxes.contains_key(c) {
                    return Err(SchemaViolation::at(
                        line,
                        field("layout.boxes"),
                        format!("character `{c}` has no box"),
                    ));
                }
            }
            if let Some(extra) = f.layout.boxes.keys().find(|k| !seen.contains(k.as_str())) {
                return Err(SchemaViolation::at(
                    line,
                    field("layout.boxes"),
                    format!("box `{extra}` is not in the character list"),
                ));
            }
            f.layout.validate().map_err(|e| SchemaViolation::at(line, field("layout"), e.to_string()))?;
            if f.steps == Some(0) {
                return Err(SchemaViolation::at(line, field("steps"), "must be at least 1"));
            }
            if let Some(s) = &f.schedule {
                s.validate().map_err(|e| SchemaViolation::at(line, field("schedule"), e.to_string()))?;
            }
        }
        Ok(())
    }

    /// Non-fatal remarks: frames with more than three characters and
    /// overlapping boxes.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for f in &self.frames {
            if f.characters.len() > CHARACTER_SOFT_CAP {
                out.push(format!(
                    "frame `{}` has {} characters (more than {CHARACTER_SOFT_CAP})",
                    f.id,
                    f.characters.len()
                ));
            }
            for (a, b) in f.layout.overlapping_pairs() {
                out.push(format!("frame `{}`: boxes of `{a}` and `{b}` overlap", f.id));
            }
        }
        out
    }

    /// The prompt after the style suffix is appended.
    pub fn frame_prompt(&self, frame: &FrameSpec) -> String {
        match self.style_suffix.as_deref().map(str::trim).filter(|s| !s.is_empty()) {
            Some(s) => format!("{}, {s}", frame.prompt.trim()),
            None => frame.prompt.trim().to_string(),
        }
    }
}

pub fn parse_script(text: &str) -> Result<StoryScript, SchemaViolation> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let script: StoryScript = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        SchemaViolation::at(Some(inner.line()), if field == "." { String::new() } else { field }, inner.to_string())
    })?;
    script.check(&frame_lines(text))?;
    Ok(script)
}

pub fn read_script(path: &Path) -> Result<StoryScript> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_script(&text)?)
}

/// Lookup of plugins by name.
pub trait PluginStore: Sync {
    fn plugin(&self, name: &str) -> Option<CharacterPlugin>;
}

impl PluginStore for BTreeMap<String, CharacterPlugin> {
    fn plugin(&self, name: &str) -> Option<CharacterPlugin> {
        self.get(name).cloned()
    }
}

/// Loads every `.cgcp` in a directory, keyed by the plugin's own name.
pub fn load_plugin_dir(dir: &Path, backend: &dyn Backend) -> Result<BTreeMap<String, CharacterPlugin>> {
    let mut out = BTreeMap::new();
    for path in io::list_with_extension(dir, storyplug_core::plugin::FILE_EXTENSION)? {
        let p = io::read_valid_plugin(&path, backend.descriptor())?;
        if out.contains_key(&p.name) {
            return Err(Error::Usage(format!("two plugins named `{}` in {}", p.name, dir.display())));
        }
        out.insert(p.name.clone(), p);
    }
    Ok(out)
}

/// What the request hash covers. Plugins enter by fingerprint, so the hash
/// ignores plugin creation times.
#[derive(Serialize)]
struct HashedRequest<'a> {
    backend_id: &'a str,
    prompt: &'a str,
    seed: u64,
    steps: usize,
    guidance_scale: f64,
    schedule: &'a EditSchedule,
    layout: &'a LayoutSpec,
    plugins: BTreeMap<&'a str, String>,
}

/// SHA-256 over a canonical JSON form of the request.
pub fn request_hash(backend_id: &str, request: &GenerationRequest) -> String {
    let h = HashedRequest {
        backend_id,
        prompt: &request.prompt,
        seed: request.seed,
        steps: request.steps,
        guidance_scale: request.guidance_scale,
        schedule: &request.schedule,
        layout: &request.layout,
        plugins: request.plugins.iter().map(|p| (p.name.as_str(), io::plugin_fingerprint(p))).collect(),
    };
    io::sha256_hex(&serde_json::to_vec(&h).expect("serializable"))
}

/// The generation request for one frame, with plugins resolved.
pub fn frame_request(script: &StoryScript, frame: &FrameSpec, store: &dyn PluginStore) -> Result<GenerationRequest> {
    let plugins = frame
        .characters
        .iter()
        .map(|c| store.plugin(c).ok_or_else(|| Error::MissingPlugin { frame: frame.id.clone(), character: c.clone() }))
        .collect::<Result<Vec<_>>>()?;
    Ok(GenerationRequest {
        prompt: script.frame_prompt(frame),
        plugins,
        layout: frame.layout.clone(),
        seed: frame.seed,
        steps: frame.steps.or(script.steps).unwrap_or(DEFAULT_STEPS),
        guidance_scale: frame.guidance_scale.or(script.guidance_scale).unwrap_or(DEFAULT_GUIDANCE_SCALE),
        schedule: frame.schedule.or(script.schedule).unwrap_or_default(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub id: String,
    pub request: GenerationRequest,
    pub request_hash: String,
    pub output: FrameOutput,
}

/// Renders every frame on a pool of `workers` threads. All plugins are
/// resolved before any frame starts; output order follows the script.
pub fn render_frames<B: Backend + Sync + ?Sized>(
    backend: &B,
    script: &StoryScript,
    store: &dyn PluginStore,
    workers: usize,
) -> Result<Vec<RenderedFrame>> {
    let requests = script.frames.iter().map(|f| frame_request(script, f, store)).collect::<Result<Vec<_>>>()?;
    let backend_id = backend.descriptor().backend_id.as_str();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Usage(format!("worker pool: {e}")))?;
    pool.install(|| {
        script
            .frames
            .par_iter()
            .zip(requests.into_par_iter())
            .map(|(f, request)| {
                let output = generate_frame(backend, &request)?;
                let request_hash = request_hash(backend_id, &request);
                Ok(RenderedFrame { id: f.id.clone(), request, request_hash, output })
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub id: String,
    pub prompt: String,
    pub characters: Vec<String>,
    pub seed: u64,
    pub request_hash: String,
    pub image: String,
    pub image_sha256: String,
    pub diagnostics: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryManifest {
    pub title: String,
    pub backend_id: String,
    pub frames: Vec<FrameRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DiagnosticsFile {
    pub id: String,
    pub request_hash: String,
    #[serde(flatten)]
    pub diagnostics: FrameDiagnostics,
}

pub fn manifest_for(
    script: &StoryScript,
    backend_id: &str,
    frames: &[RenderedFrame],
    pngs: &[Vec<u8>],
) -> StoryManifest {
    StoryManifest {
        title: script.title.clone(),
        backend_id: backend_id.into(),
        frames: frames
            .iter()
            .zip(pngs)
            .map(|(f, png)| FrameRecord {
                id: f.id.clone(),
                prompt: f.request.prompt.clone(),
                characters: f.request.plugins.iter().map(|p| p.name.clone()).collect(),
                seed: f.request.seed,
                request_hash: f.request_hash.clone(),
                image: format!("frames/{}.png", f.id),
                image_sha256: io::sha256_hex(png),
                diagnostics: format!("diagnostics/{}.json", f.id),
            })
            .collect(),
    }
}

/// Renders the script into `out`: `frames/<id>.png`, `diagnostics/<id>.json`
/// and `manifest.json`.
pub fn render_story<B: Backend + Sync + ?Sized>(
    backend: &B,
    script: &StoryScript,
    store: &dyn PluginStore,
    workers: usize,
    out: &Path,
) -> Result<StoryManifest> {
    let frames = render_frames(backend, script, store, workers)?;
    let pngs: Vec<Vec<u8>> = frames.iter().map(|f| io::encode_png(&f.output.image)).collect();
    for (f, png) in frames.iter().zip(&pngs) {
        io::write_atomic(&out.join("frames").join(format!("{}.png", f.id)), png)?;
        io::write_json(
            &out.join("diagnostics").join(format!("{}.json", f.id)),
            &DiagnosticsFile {
                id: f.id.clone(),
                request_hash: f.request_hash.clone(),
                diagnostics: f.output.diagnostics.clone(),
            },
        )?;
    }
    let manifest = manifest_for(script, &backend.descriptor().backend_id, &frames, &pngs);
    io::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
