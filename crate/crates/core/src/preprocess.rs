//! Leaf background removal and resizing to model resolution.
//!
//! Pipeline: RGB -> HSV, inclusive green-range mask, morphological opening
//! then closing, leaf kept on black, bilinear resize, scale to `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::resize::bilinear_resize;
use crate::tensor::Tensor;

/// 8-bit RGB image, row-major, three bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Input(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        RgbImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn from_image(img: image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        RgbImage {
            width: w as usize,
            height: h as usize,
            data: img.into_raw(),
        }
    }

    pub fn to_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length checked at construction")
    }

    /// Decodes a PNG or JPEG file (any colour type is converted to RGB8).
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            source => Error::Decode {
                path: path.to_path_buf(),
                source,
            },
        })?;
        Ok(Self::from_image(img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_image()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| match source {
                image::ImageError::IoError(e) => Error::io(path, e),
                source => Error::Decode {
                    path: path.to_path_buf(),
                    source,
                },
            })
    }

    /// Channel-first `[3, H, W]` tensor with the raw 0..=255 values.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.width * self.height;
        Tensor::from_fn(vec![3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            self.data[p * 3 + c] as f32
        })
    }

    /// Inverse of [`preprocess_image`]'s scaling: `[3, H, W]` in `[0, 1]` back to bytes.
    pub fn from_unit_tensor(t: &Tensor<f32>) -> Result<Self> {
        let &[3, h, w] = t.shape() else {
            return Err(Error::Dimension(format!(
                "expected a [3,H,W] image tensor, got {:?}",
                t.shape()
            )));
        };
        let plane = h * w;
        let mut data = vec![0u8; plane * 3];
        for (i, &v) in t.data().iter().enumerate() {
            let (c, p) = (i / plane, i % plane);
            data[p * 3 + c] = (v as f64 * 255.0).round().clamp(0.0, 255.0) as u8;
        }
        RgbImage::new(w, h, data)
    }
}

/// HSV image with hue on the half-degree scale `[0, 180)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HsvImage {
    width: usize,
    height: usize,
    data: Vec<[u8; 3]>,
}

impl HsvImage {
    pub fn new(width: usize, height: usize, data: Vec<[u8; 3]>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} pixels for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(HsvImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        self.data[y * self.width + x]
    }
    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.data
    }
}

/// Binary mask with values in {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Input(format!(
                "{width}x{height} mask needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Input("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        BinaryMask { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == 1
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }
    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a & b) as usize;
            union += (a | b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Per-pixel RGB to HSV: hue halved into `[0, 180)`, S and V scaled to 0..=255.
pub fn rgb_to_hsv(img: &RgbImage) -> HsvImage {
    let data = img.pixels().map(hsv_pixel).collect();
    HsvImage {
        width: img.width,
        height: img.height,
        data,
    }
}

pub(crate) fn hsv_pixel([r, g, b]: [u8; 3]) -> [u8; 3] {
    let (r, g, b) = (r as f64, g as f64, b as f64);
    let v = r.max(g).max(b);
    let diff = v - r.min(g).min(b);
    let s = if v == 0.0 { 0.0 } else { diff / v * 255.0 };
    let mut h = if diff == 0.0 {
        0.0
    } else if v == r {
        60.0 * (g - b) / diff
    } else if v == g {
        120.0 + 60.0 * (b - r) / diff
    } else {
        240.0 + 60.0 * (r - g) / diff
    };
    if h < 0.0 {
        h += 360.0;
    }
    let h = (h / 2.0).round() as u32 % 180;
    [h as u8, s.round() as u8, v as u8]
}

/// Lower bound of the leaf-green box in HSV.
pub const GREEN_LOWER: [u8; 3] = [25, 40, 40];
/// Upper bound of the leaf-green box in HSV.
pub const GREEN_UPPER: [u8; 3] = [90, 255, 255];

/// 1 where every HSV component lies inside `[lower, upper]`, bounds inclusive.
pub fn green_mask(img: &HsvImage, lower: [u8; 3], upper: [u8; 3]) -> BinaryMask {
    let data = img
        .data
        .iter()
        .map(|p| (0..3).all(|c| lower[c] <= p[c] && p[c] <= upper[c]) as u8)
        .collect();
    BinaryMask {
        width: img.width,
        height: img.height,
        data,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MorphOp {
    /// Erosion then dilation.
    Open,
    /// Dilation then erosion.
    Close,
}

/// Sliding-window count of ones along rows (`horizontal`) or columns, radius `r`.
/// Out-of-bounds cells count as zero.
fn window_counts(data: &[u8], w: usize, h: usize, r: usize, horizontal: bool) -> Vec<u32> {
    let mut out = vec![0u32; w * h];
    let (lines, len) = if horizontal { (h, w) } else { (w, h) };
    let at = |line: usize, i: usize| if horizontal { line * w + i } else { i * w + line };
    let mut prefix = vec![0u32; len + 1];
    for line in 0..lines {
        for i in 0..len {
            prefix[i + 1] = prefix[i] + data[at(line, i)] as u32;
        }
        for i in 0..len {
            let lo = i.saturating_sub(r);
            let hi = (i + r + 1).min(len);
            out[at(line, i)] = prefix[hi] - prefix[lo];
        }
    }
    out
}

fn erode(mask: &[u8], w: usize, h: usize, side: usize) -> Vec<u8> {
    let r = side / 2;
    let full = side as u32;
    let rows: Vec<u8> = window_counts(mask, w, h, r, true)
        .into_iter()
        .map(|c| (c == full) as u8)
        .collect();
    window_counts(&rows, w, h, r, false)
        .into_iter()
        .map(|c| (c == full) as u8)
        .collect()
}

fn dilate(mask: &[u8], w: usize, h: usize, side: usize) -> Vec<u8> {
    let r = side / 2;
    let rows: Vec<u8> = window_counts(mask, w, h, r, true)
        .into_iter()
        .map(|c| (c > 0) as u8)
        .collect();
    window_counts(&rows, w, h, r, false)
        .into_iter()
        .map(|c| (c > 0) as u8)
        .collect()
}

type MorphPass = fn(&[u8], usize, usize, usize) -> Vec<u8>;

/// Opening or closing with a flat `kernel x kernel` square.
///
/// `iterations` repeats each primitive (n erosions then n dilations for an
/// opening). Pixels outside the image count as 0 for both primitives, so
/// border pixels erode unless the element fits entirely inside.
pub fn morph_refine(mask: &BinaryMask, op: MorphOp, kernel: usize, iterations: usize) -> Result<BinaryMask> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::Input(format!("kernel side must be odd, got {kernel}")));
    }
    if iterations == 0 {
        return Err(Error::Input("iterations must be positive".into()));
    }
    let (w, h) = (mask.width, mask.height);
    let mut data = mask.data.clone();
    let order: [MorphPass; 2] = match op {
        MorphOp::Open => [erode, dilate],
        MorphOp::Close => [dilate, erode],
    };
    for step in order {
        for _ in 0..iterations {
            data = step(&data, w, h, kernel);
        }
    }
    Ok(BinaryMask {
        width: w,
        height: h,
        data,
    })
}

/// Keeps pixels under the mask and paints everything else black.
pub fn extract_foreground(img: &RgbImage, mask: &BinaryMask) -> Result<RgbImage> {
    if img.width != mask.width || img.height != mask.height {
        return Err(Error::Input(format!(
            "image is {}x{} but mask is {}x{}",
            img.width, img.height, mask.width, mask.height
        )));
    }
    let mut out = img.clone();
    for (px, &m) in out.data.chunks_exact_mut(3).zip(&mask.data) {
        if m == 0 {
            px.fill(0);
        }
    }
    Ok(out)
}

/// Settings for [`preprocess_image`].
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub background_removal: bool,
    pub size: usize,
    pub lower: [u8; 3],
    pub upper: [u8; 3],
    pub kernel: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            background_removal: true,
            size: 128,
            lower: GREEN_LOWER,
            upper: GREEN_UPPER,
            kernel: 5,
        }
    }
}

/// The refined leaf mask at native resolution.
pub fn leaf_mask(img: &RgbImage, cfg: &PreprocessConfig) -> Result<BinaryMask> {
    let mask = green_mask(&rgb_to_hsv(img), cfg.lower, cfg.upper);
    let opened = morph_refine(&mask, MorphOp::Open, cfg.kernel, 1)?;
    morph_refine(&opened, MorphOp::Close, cfg.kernel, 1)
}

/// Background-removed image at native resolution (or the input unchanged when disabled).
pub fn remove_background(img: &RgbImage, cfg: &PreprocessConfig) -> Result<RgbImage> {
    if !cfg.background_removal {
        return Ok(img.clone());
    }
    extract_foreground(img, &leaf_mask(img, cfg)?)
}

/// Full pipeline to a `[3, size, size]` tensor with values in `[0, 1]`.
pub fn preprocess_image(img: &RgbImage, cfg: &PreprocessConfig) -> Result<Tensor<f32>> {
    if img.width == 0 || img.height == 0 {
        return Err(Error::Input("image must be at least 1x1".into()));
    }
    if cfg.size == 0 {
        return Err(Error::Input("output size must be positive".into()));
    }
    let fg = remove_background(img, cfg)?;
    let resized = bilinear_resize(&fg.to_tensor(), cfg.size, cfg.size)?;
    Ok(resized.map(|v| v / 255.0))
}
