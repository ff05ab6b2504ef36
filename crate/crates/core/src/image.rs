//! Plain 8-bit RGB / RGBA pixel buffers.
//!
//! PNG encoding and decoding live in the std crate; these types only carry
//! pixels around.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    /// Row-major, 3 bytes per pixel.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![0; (width * height * 3) as usize] }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Option<Self> {
        (data.len() == (width as usize) * (height as usize) * 3).then_some(Self { width, height, data })
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put_pixel(&mut self, x: u32, y: u32, px: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    /// Nearest-neighbour resize.
    pub fn resize_nearest(&self, width: u32, height: u32) -> RgbImage {
        let mut out = RgbImage::new(width, height);
        for y in 0..height {
            let sy = (y as u64 * self.height as u64 / height as u64) as u32;
            for x in 0..width {
                let sx = (x as u64 * self.width as u64 / width as u64) as u32;
                out.put_pixel(x, y, self.pixel(sx, sy));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbaImage {
    pub width: u32,
    pub height: u32,
    /// Row-major, 4 bytes per pixel; alpha is the character mask.
    pub data: Vec<u8>,
}

impl RgbaImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![0; (width * height * 4) as usize] }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Option<Self> {
        (data.len() == (width as usize) * (height as usize) * 4).then_some(Self { width, height, data })
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 4] {
        let i = ((y * self.width + x) * 4) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2], self.data[i + 3]]
    }

    #[inline]
    pub fn put_pixel(&mut self, x: u32, y: u32, px: [u8; 4]) {
        let i = ((y * self.width + x) * 4) as usize;
        self.data[i..i + 4].copy_from_slice(&px);
    }

    pub fn has_opaque_pixel(&self) -> bool {
        self.data.chunks_exact(4).any(|px| px[3] > 0)
    }

    pub fn resize_nearest(&self, width: u32, height: u32) -> RgbaImage {
        let mut out = RgbaImage::new(width, height);
        for y in 0..height {
            let sy = (y as u64 * self.height as u64 / height as u64) as u32;
            for x in 0..width {
                let sx = (x as u64 * self.width as u64 / width as u64) as u32;
                out.put_pixel(x, y, self.pixel(sx, sy));
            }
        }
        out
    }

    /// Flattens onto a solid background colour.
    pub fn flatten_onto(&self, background: [u8; 3]) -> RgbImage {
        let mut out = RgbImage::new(self.width, self.height);
        for (dst, src) in out.data.chunks_exact_mut(3).zip(self.data.chunks_exact(4)) {
            let a = src[3] as u32;
            for c in 0..3 {
                dst[c] = blend(src[c], background[c], a);
            }
        }
        out
    }
}

/// `round((fg * a + bg * (255 - a)) / 255)`, exact for a = 0 and a = 255.
#[inline]
pub fn blend(fg: u8, bg: u8, alpha: u32) -> u8 {
    let v = fg as u32 * alpha + bg as u32 * (255 - alpha);
    ((v + 127) / 255) as u8
}
