//! PNG, JSON and plugin files on disk.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use storyplug_core::image::{RgbImage, RgbaImage};
use storyplug_core::plugin::{self, CharacterPlugin};
use storyplug_core::BackendDescriptor;

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json { path: path.into(), message: e.to_string() })
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable value");
    v.push(b'\n');
    v
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_pretty(value))
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let buf = image::RgbImage::from_raw(img.width, img.height, img.data.clone()).expect("consistent buffer");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).expect("in-memory PNG encode");
    out.into_inner()
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    write_atomic(path, &encode_png(img))
}

pub fn encode_rgba_png(img: &RgbaImage) -> Vec<u8> {
    let buf = image::RgbaImage::from_raw(img.width, img.height, img.data.clone()).expect("consistent buffer");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).expect("in-memory PNG encode");
    out.into_inner()
}

pub fn write_rgba_png(path: &Path, img: &RgbaImage) -> Result<()> {
    write_atomic(path, &encode_rgba_png(img))
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    let bytes = read(path)?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.into(), message: e.to_string() })
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = open_image(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(RgbImage::from_raw(w, h, img.into_raw()).expect("rgb8 buffer"))
}

pub fn read_rgba(path: &Path) -> Result<RgbaImage> {
    let img = open_image(path)?.into_rgba8();
    let (w, h) = img.dimensions();
    Ok(RgbaImage::from_raw(w, h, img.into_raw()).expect("rgba8 buffer"))
}

/// `*.png` files directly inside `dir`, sorted by file name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    list_with_extension(dir, "png")
}

pub fn list_with_extension(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x.eq_ignore_ascii_case(ext)) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_plugin(path: &Path) -> Result<CharacterPlugin> {
    Ok(plugin::deserialize(&read(path)?)?)
}

/// Parses and validates a plugin against `descriptor`.
pub fn read_valid_plugin(path: &Path, descriptor: &BackendDescriptor) -> Result<CharacterPlugin> {
    let p = read_plugin(path)?;
    plugin::validate(&p, descriptor).map_err(|violations| Error::PluginInvalid { name: p.name.clone(), violations })?;
    Ok(p)
}

pub fn write_plugin(path: &Path, p: &CharacterPlugin) -> Result<()> {
    write_atomic(path, &plugin::serialize(p))
}

/// Digest of everything in a plugin that affects generation: name, class
/// noun, descriptor, dims and values. The creation time is left out.
pub fn plugin_fingerprint(p: &CharacterPlugin) -> String {
    let mut h = Sha256::new();
    for s in [&p.name, &p.class_noun, &p.descriptor_id] {
        h.update((s.len() as u64).to_le_bytes());
        h.update(s.as_bytes());
    }
    h.update((p.rows as u64).to_le_bytes());
    h.update((p.width as u64).to_le_bytes());
    for v in &p.values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}
