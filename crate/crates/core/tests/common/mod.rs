#![allow(dead_code)]

use storyplug_core::augment::CharacterImage;
use storyplug_core::extract::extract_character_plugin;
use storyplug_core::image::RgbaImage;
use storyplug_core::{CharacterPlugin, EncoderState, ToyBackend, ToyConfig};

pub fn toy() -> ToyBackend {
    ToyBackend::new(ToyConfig::default()).unwrap()
}

pub fn toy_seeded(seed: u64) -> ToyBackend {
    ToyBackend::new(ToyConfig { seed, ..ToyConfig::default() }).unwrap()
}

/// Opaque ellipse on a transparent canvas.
pub fn ellipse_character(w: u32, h: u32, rgb: [u8; 3]) -> CharacterImage {
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
    CharacterImage::new(img, "ellipse.png").unwrap()
}

pub fn plugin_from(be: &ToyBackend, state: &EncoderState, name: &str, noun: &str) -> CharacterPlugin {
    extract_character_plugin(be, state, name, noun, 0).unwrap()
}
