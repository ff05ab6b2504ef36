#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use storyplug::core::extract::extract_character_plugin;
use storyplug::core::image::RgbaImage;
use storyplug::core::{Backend, CharacterPlugin, ToyBackend};
use storyplug::io;

pub fn toy() -> ToyBackend {
    storyplug::default_backend()
}

/// Opaque ellipse on a transparent canvas.
pub fn ellipse(w: u32, h: u32, rgb: [u8; 3]) -> RgbaImage {
    let mut img = RgbaImage::new(w, h);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    for y in 0..h {
        for x in 0..w {
            let dx = (x as f64 + 0.5 - cx) / cx;
            let dy = (y as f64 + 0.5 - cy) / cy;
            if dx * dx + dy * dy <= 1.0 {
                img.put_pixel(x, y, [rgb[0], rgb[1], rgb[2], 255]);
            }
        }
    }
    img
}

/// Writes `m` character cutouts and a scene list under `root`.
pub fn character_fixture(root: &Path, m: usize) -> (PathBuf, PathBuf) {
    let chars = root.join("chars");
    for i in 0..m {
        let shade = (40 * i as u32 % 200) as u8;
        let img = ellipse(20 + 2 * i as u32, 28, [200, 60 + shade, 40]);
        io::write_rgba_png(&chars.join(format!("c{i}.png")), &img).unwrap();
    }
    let scenes = root.join("scenes.txt");
    std::fs::write(&scenes, "a sunny park with trees\na quiet street at night\na beach with waves\n").unwrap();
    (chars, scenes)
}

/// A plugin from the untrained encoder; valid and cheap.
pub fn frozen_plugin(be: &ToyBackend, name: &str, noun: &str) -> CharacterPlugin {
    extract_character_plugin(be, be.frozen_encoder(), name, noun, 0).unwrap()
}

pub fn two_plugins(be: &ToyBackend) -> BTreeMap<String, CharacterPlugin> {
    [frozen_plugin(be, "mia", "girl"), frozen_plugin(be, "rex", "dog")]
        .into_iter()
        .map(|p| (p.name.clone(), p))
        .collect()
}

/// A script of `n` frames alternating between the two characters of
/// [`two_plugins`], with few sampling steps so tests stay quick.
pub fn script_json(n: usize, steps: usize) -> String {
    let frames: Vec<serde_json::Value> = (0..n)
        .map(|i| match i % 3 {
            0 => serde_json::json!({
                "id": format!("f{i:02}"),
                "prompt": "a girl and a dog in a park",
                "characters": ["mia", "rex"],
                "layout": {"boxes": {"mia": [0.0, 0.0, 0.5, 1.0], "rex": [0.5, 0.25, 1.0, 1.0]}},
                "seed": 100 + i,
            }),
            1 => serde_json::json!({
                "id": format!("f{i:02}"),
                "prompt": "a girl walking home",
                "characters": ["mia"],
                "layout": {"boxes": {"mia": [0.25, 0.0, 0.75, 1.0]}},
                "seed": 100 + i,
            }),
            _ => serde_json::json!({
                "id": format!("f{i:02}"),
                "prompt": "an empty street at night",
                "seed": 100 + i,
            }),
        })
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({
        "schema_version": 1,
        "title": "walk",
        "style_suffix": "cartoon style",
        "steps": steps,
        "frames": frames,
    }))
    .unwrap()
}
