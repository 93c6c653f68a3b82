//! Stochastic positive-view generation: random resized crop, horizontal
//! flip, color jitter, grayscale, each view drawn with independent
//! parameters. Everything is pure given an explicit rng.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Channel-major float image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// `data[c * height * width + y * width + x]`, c in 0..3.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; 3 * height * width] }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.height * self.width + y * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[c * self.height * self.width + y * self.width + x] = v;
    }

    /// Flatten to one row of length 3*H*W (channel-major), the MLP input.
    pub fn flat(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    /// Application order, randomized per draw.
    pub order: Vec<JitterOp>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugParams {
    pub crop_area_frac: f64,
    pub crop_aspect: f64,
    /// Top-left corner (row, col) of the crop.
    pub crop_origin: (usize, usize),
    /// Crop size in pixels (rows, cols), derived from area and aspect.
    pub crop_size: (usize, usize),
    pub flip: bool,
    pub jitter: Option<Jitter>,
    pub grayscale: bool,
}

impl AugParams {
    /// Full-area, no-op parameters; `apply` reproduces the input exactly.
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            crop_area_frac: 1.0,
            crop_aspect: 1.0,
            crop_origin: (0, 0),
            crop_size: (height, width),
            flip: false,
            jitter: None,
            grayscale: false,
        }
    }
}

/// Jitter strengths (brightness, contrast, saturation, hue) and gating
/// probabilities used for CIFAR-scale training.
pub const JITTER_STRENGTH: (f64, f64, f64, f64) = (0.4, 0.4, 0.4, 0.1);
pub const JITTER_PROB: f64 = 0.8;
pub const GRAYSCALE_PROB: f64 = 0.1;
pub const FLIP_PROB: f64 = 0.5;
pub const CROP_AREA_RANGE: (f64, f64) = (0.2, 1.0);
pub const CROP_ASPECT_RANGE: (f64, f64) = (0.75, 4.0 / 3.0);

/// Draw augmentation parameters for an image of the given size. The crop
/// origin is retried up to 10 times; if the sampled rectangle never fits,
/// falls back to a fitted center crop.
pub fn sample_params<R: Rng>(rng: &mut R, height: usize, width: usize) -> AugParams {
    let crop_area_frac = rng.gen_range(CROP_AREA_RANGE.0..=CROP_AREA_RANGE.1);
    let crop_aspect = rng.gen_range(CROP_ASPECT_RANGE.0..=CROP_ASPECT_RANGE.1);
    let area = crop_area_frac * (height * width) as f64;
    // aspect = w / h
    let ch = (area / crop_aspect).sqrt().round().max(1.0) as usize;
    let cw = (area * crop_aspect).sqrt().round().max(1.0) as usize;
    let mut crop_size = (ch, cw);
    let mut crop_origin = ((height - ch.min(height)) / 2, (width - cw.min(width)) / 2);
    let mut placed = false;
    for _ in 0..10 {
        let oy = rng.gen_range(0..height);
        let ox = rng.gen_range(0..width);
        if oy + ch <= height && ox + cw <= width {
            crop_origin = (oy, ox);
            placed = true;
            break;
        }
    }
    if !placed {
        // Center-crop fallback with the rectangle clamped to fit.
        let ch = ch.min(height);
        let cw = cw.min(width);
        crop_size = (ch, cw);
        crop_origin = ((height - ch) / 2, (width - cw) / 2);
    }
    let flip = rng.gen_bool(FLIP_PROB);
    let jitter = if rng.gen_bool(JITTER_PROB) {
        let (sb, sc, ss, sh) = JITTER_STRENGTH;
        let mut order = vec![
            JitterOp::Brightness,
            JitterOp::Contrast,
            JitterOp::Saturation,
            JitterOp::Hue,
        ];
        order.shuffle(rng);
        Some(Jitter {
            brightness: rng.gen_range(-sb..=sb),
            contrast: rng.gen_range(-sc..=sc),
            saturation: rng.gen_range(-ss..=ss),
            hue: rng.gen_range(-sh..=sh),
            order,
        })
    } else {
        None
    };
    let grayscale = rng.gen_bool(GRAYSCALE_PROB);
    AugParams { crop_area_frac, crop_aspect, crop_origin, crop_size, flip, jitter, grayscale }
}

pub const LUMA: (f64, f64, f64) = (0.299, 0.587, 0.114);

fn luma_at(img: &Image, y: usize, x: usize) -> f64 {
    LUMA.0 * img.get(0, y, x) + LUMA.1 * img.get(1, y, x) + LUMA.2 * img.get(2, y, x)
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

fn apply_jitter(img: &mut Image, jit: &Jitter) {
    for &op in &jit.order {
        match op {
            JitterOp::Brightness => {
                let f = 1.0 + jit.brightness;
                for v in &mut img.data {
                    *v = (*v * f).clamp(0.0, 1.0);
                }
            }
            JitterOp::Contrast => {
                // Interpolate toward the per-image mean luma.
                let mut mean = 0.0;
                for y in 0..img.height {
                    for x in 0..img.width {
                        mean += luma_at(img, y, x);
                    }
                }
                mean /= (img.height * img.width) as f64;
                let f = 1.0 + jit.contrast;
                for v in &mut img.data {
                    *v = (mean + (*v - mean) * f).clamp(0.0, 1.0);
                }
            }
            JitterOp::Saturation => {
                let f = 1.0 + jit.saturation;
                for y in 0..img.height {
                    for x in 0..img.width {
                        let gray = luma_at(img, y, x);
                        for c in 0..3 {
                            let v = img.get(c, y, x);
                            img.set(c, y, x, (gray + (v - gray) * f).clamp(0.0, 1.0));
                        }
                    }
                }
            }
            JitterOp::Hue => {
                for y in 0..img.height {
                    for x in 0..img.width {
                        let (h, s, v) =
                            rgb_to_hsv(img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
                        let (r, g, b) = hsv_to_rgb(h + jit.hue, s, v);
                        img.set(0, y, x, r.clamp(0.0, 1.0));
                        img.set(1, y, x, g.clamp(0.0, 1.0));
                        img.set(2, y, x, b.clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
}

/// Apply parameters: crop + bilinear resize back to the input resolution,
/// then flip, jitter and grayscale per flags. Output stays in [0, 1].
pub fn apply(image: &Image, p: &AugParams) -> Image {
    let (h, w) = (image.height, image.width);
    let (ch, cw) = p.crop_size;
    let (oy, ox) = p.crop_origin;
    let mut out = Image::new(h, w);
    // Bilinear sample from the crop rectangle scaled to the full resolution.
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let sy = if h > 1 { y as f64 / (h - 1) as f64 * (ch - 1) as f64 } else { 0.0 };
                let sx = if w > 1 { x as f64 / (w - 1) as f64 * (cw - 1) as f64 } else { 0.0 };
                let y0 = sy.floor() as usize;
                let x0 = sx.floor() as usize;
                let y1 = (y0 + 1).min(ch - 1);
                let x1 = (x0 + 1).min(cw - 1);
                let fy = sy - y0 as f64;
                let fx = sx - x0 as f64;
                let v00 = image.get(c, oy + y0, ox + x0);
                let v01 = image.get(c, oy + y0, ox + x1);
                let v10 = image.get(c, oy + y1, ox + x0);
                let v11 = image.get(c, oy + y1, ox + x1);
                let v = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
                out.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    if p.flip {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w / 2 {
                    let a = out.get(c, y, x);
                    let b = out.get(c, y, w - 1 - x);
                    out.set(c, y, x, b);
                    out.set(c, y, w - 1 - x, a);
                }
            }
        }
    }
    if let Some(jit) = &p.jitter {
        apply_jitter(&mut out, jit);
    }
    if p.grayscale {
        for y in 0..h {
            for x in 0..w {
                let gray = luma_at(&out, y, x);
                for c in 0..3 {
                    out.set(c, y, x, gray);
                }
            }
        }
    }
    out
}

/// Generate `d` positive views of one image with independent parameters.
pub fn make_views<R: Rng>(image: &Image, d: usize, rng: &mut R) -> Vec<Image> {
    assert!(d >= 2, "need at least 2 positive views");
    (0..d)
        .map(|_| {
            let p = sample_params(rng, image.height, image.width);
            apply(image, &p)
        })
        .collect()
}

/// Per-sample derived seed so parallel view generation stays deterministic
/// regardless of scheduling.
pub fn derived_seed(global_seed: u64, epoch: usize, sample_index: usize) -> u64 {
    // splitmix64-style mixing.
    let mut z = global_seed
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul((epoch as u64).wrapping_add(1)))
        .wrapping_add(0xbf58476d1ce4e5b9u64.wrapping_mul((sample_index as u64).wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
