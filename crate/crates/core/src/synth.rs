//! Deterministic synthetic leaf corpus with 21 visually distinct classes.
//!
//! Each class is one of seven hues crossed with one of three textures
//! (solid, striped, checkered), drawn as a jittered disk on black. The disk
//! is the class-signature region used for localisation checks.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::preprocess::{BinaryMask, RgbImage};

pub const NUM_CLASSES: usize = 21;
const HUES: [f64; 7] = [0.0, 50.0, 100.0, 150.0, 200.0, 250.0, 300.0];
const TEXTURES: [&str; 3] = ["solid", "stripes", "checker"];

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub image: RgbImage,
    pub class: usize,
    /// Pixels of the drawn disk.
    pub region: BinaryMask,
}

pub fn class_name(class: usize) -> String {
    let (hue, tex) = (HUES[class / 3], TEXTURES[class % 3]);
    format!("c{class:02}_{tex}_h{hue:03}")
}

fn hue_rgb(hue_deg: f64, value: f64) -> [f64; 3] {
    let h = hue_deg / 60.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r * value, g * value, b * value]
}

/// Sample `index` of `class`; identical arguments give identical pixels.
pub fn sample(class: usize, index: usize, seed: u64, size: usize) -> SyntheticSample {
    assert!(class < NUM_CLASSES, "class {class} out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ ((class as u64) << 32) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let s = size as f64;
    let radius = s * rng.gen_range(0.30..0.36);
    let cx = s * rng.gen_range(0.40..0.60);
    let cy = s * rng.gen_range(0.40..0.60);
    let value = rng.gen_range(220.0..255.0);
    let hue = HUES[class / 3] + rng.gen_range(-4.0..4.0);
    let base = hue_rgb((hue + 360.0) % 360.0, value);
    let period = (size / 16).max(2);
    let texture = class % 3;
    let mut image = RgbImage::filled(size, size, [0, 0, 0]);
    let region = BinaryMask::from_fn(size, size, |x, y| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        dx * dx + dy * dy <= radius * radius
    });
    for y in 0..size {
        for x in 0..size {
            if !region.get(x, y) {
                continue;
            }
            let bright = match texture {
                0 => true,
                1 => (y / period).is_multiple_of(2),
                _ => ((x / period) + (y / period)).is_multiple_of(2),
            };
            let scale = if bright { 1.0 } else { 0.15 };
            let noise = rng.gen_range(-6.0..6.0);
            let px = base.map(|c| (c * scale + noise).round().clamp(0.0, 255.0) as u8);
            image.put_pixel(x, y, px);
        }
    }
    SyntheticSample {
        image,
        class,
        region,
    }
}

/// `per_class` samples of every class, ordered by class then index.
pub fn corpus(per_class: usize, seed: u64, size: usize) -> Vec<SyntheticSample> {
    (0..NUM_CLASSES)
        .flat_map(|c| (0..per_class).map(move |i| sample(c, i, seed, size)))
        .collect()
}

/// Writes the corpus as `dir/<class name>/img_<index>.png`.
pub fn write_corpus(dir: &Path, per_class: usize, seed: u64, size: usize) -> Result<()> {
    for class in 0..NUM_CLASSES {
        let class_dir = dir.join(class_name(class));
        fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
        for i in 0..per_class {
            sample(class, i, seed, size)
                .image
                .save_png(&class_dir.join(format!("img_{i:04}.png")))?;
        }
    }
    Ok(())
}
