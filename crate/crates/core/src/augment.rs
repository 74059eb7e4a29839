//! Random augmentation of (structure, appearance) pairs.
//!
//! Structure images get a square crop, horizontal flip, color jitter and a
//! 3x3 Gaussian blur; appearance images get only the crop and flip. Both
//! images draw their parameters independently from the same RNG stream.

use candle_core::{DType, Device};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    /// Crop side as a fraction of the image height, sampled uniformly in `[crop_min, crop_max]`.
    pub crop_min: f64,
    pub crop_max: f64,
    pub hflip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub blur_p: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self::splice()
    }
}

impl AugmentPolicy {
    pub fn splice() -> Self {
        Self {
            crop_min: 0.95,
            crop_max: 1.0,
            hflip_p: 0.5,
            jitter_p: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            blur_p: 0.5,
            blur_sigma_min: 0.1,
            blur_sigma_max: 2.0,
        }
    }

    pub fn splicenet() -> Self {
        Self {
            crop_min: 0.95,
            crop_max: 0.95,
            jitter_p: 0.2,
            blur_p: 0.1,
            ..Self::splice()
        }
    }

    /// Every transform off and full-height crops: the identity on square inputs.
    pub fn disabled() -> Self {
        Self {
            crop_min: 1.0,
            crop_max: 1.0,
            hflip_p: 0.0,
            jitter_p: 0.0,
            blur_p: 0.0,
            ..Self::splice()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("hflip_p", self.hflip_p), ("jitter_p", self.jitter_p), ("blur_p", self.blur_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.crop_min > 0.0 && self.crop_min <= self.crop_max && self.crop_max <= 1.0) {
            return Err(Error::Config(format!(
                "crop fractions must satisfy 0 < min <= max <= 1, got [{}, {}]",
                self.crop_min, self.crop_max
            )));
        }
        if !(self.blur_sigma_min > 0.0 && self.blur_sigma_min <= self.blur_sigma_max) {
            return Err(Error::Config("blur sigma range must be positive and ordered".into()));
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} strength must lie in [0, 1), got {v}")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::Config(format!("hue strength must lie in [0, 0.5], got {}", self.hue)));
        }
        Ok(())
    }
}

/// Host-side RGB buffer in `H x W x 3` order.
#[derive(Debug, Clone)]
struct Pixels {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Pixels {
    fn from_image(img: &ImageTensor) -> Result<Self> {
        Ok(Self {
            h: img.height(),
            w: img.width(),
            data: img.to_hwc()?,
        })
    }

    fn into_image(self, device: &Device, dtype: DType) -> Result<ImageTensor> {
        ImageTensor::from_hwc(self.h, self.w, &self.data, device, dtype)
    }

    fn crop(&self, top: usize, left: usize, size: usize) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        for y in top..top + size {
            let start = (y * self.w + left) * 3;
            data.extend_from_slice(&self.data[start..start + size * 3]);
        }
        Self { h: size, w: size, data }
    }

    fn hflip(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.h {
            for x in (0..self.w).rev() {
                let i = (y * self.w + x) * 3;
                data.extend_from_slice(&self.data[i..i + 3]);
            }
        }
        Self { h: self.h, w: self.w, data }
    }

    fn gray(px: &[f32]) -> f32 {
        0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
    }

    fn brightness(&mut self, f: f32) {
        for v in &mut self.data {
            *v = (*v * f).clamp(0.0, 1.0);
        }
    }

    fn contrast(&mut self, f: f32) {
        let mean = self.data.chunks(3).map(Self::gray).sum::<f32>() / (self.h * self.w) as f32;
        for v in &mut self.data {
            *v = ((*v - mean) * f + mean).clamp(0.0, 1.0);
        }
    }

    fn saturation(&mut self, f: f32) {
        for px in self.data.chunks_mut(3) {
            let g = Self::gray(px);
            for c in px.iter_mut() {
                *c = (*c * f + g * (1.0 - f)).clamp(0.0, 1.0);
            }
        }
    }

    fn hue(&mut self, shift: f32) {
        for px in self.data.chunks_mut(3) {
            let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
            let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
            px[0] = r;
            px[1] = g;
            px[2] = b;
        }
    }

    /// 3x3 Gaussian blur with reflect padding.
    fn blur(&self, sigma: f64) -> Self {
        let k: Vec<f32> = {
            let w: Vec<f64> = [-1.0f64, 0.0, 1.0]
                .iter()
                .map(|x| (-x * x / (2.0 * sigma * sigma)).exp())
                .collect();
            let s: f64 = w.iter().sum();
            w.iter().map(|v| (v / s) as f32).collect()
        };
        let reflect = |i: isize, n: usize| -> usize {
            if n == 1 {
                0
            } else if i < 0 {
                (-i) as usize
            } else if i as usize >= n {
                2 * (n - 1) - i as usize
            } else {
                i as usize
            }
        };
        let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
            let mut out = vec![0.0; src.len()];
            for y in 0..self.h {
                for x in 0..self.w {
                    for c in 0..3 {
                        let mut acc = 0.0;
                        for (t, kv) in k.iter().enumerate() {
                            let d = t as isize - 1;
                            let (yy, xx) = if horizontal {
                                (y, reflect(x as isize + d, self.w))
                            } else {
                                (reflect(y as isize + d, self.h), x)
                            };
                            acc += kv * src[(yy * self.w + xx) * 3 + c];
                        }
                        out[(y * self.w + x) * 3 + c] = acc;
                    }
                }
            }
            out
        };
        let tmp = pass(&self.data, true);
        Self {
            h: self.h,
            w: self.w,
            data: pass(&tmp, false),
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Square crop side for an `h x w` image; clamped to the shorter side.
fn crop_size(h: usize, w: usize, fraction: f64) -> usize {
    ((fraction * h as f64).round() as usize).clamp(1, h.min(w))
}

fn geometric(px: &Pixels, policy: &AugmentPolicy, rng: &mut impl Rng) -> Pixels {
    let fraction = if policy.crop_max > policy.crop_min {
        rng.random_range(policy.crop_min..=policy.crop_max)
    } else {
        policy.crop_min
    };
    let n = crop_size(px.h, px.w, fraction);
    let top = rng.random_range(0..=px.h - n);
    let left = rng.random_range(0..=px.w - n);
    let cropped = if n == px.h && n == px.w {
        px.clone()
    } else {
        px.crop(top, left, n)
    };
    if rng.random_bool(policy.hflip_p) {
        cropped.hflip()
    } else {
        cropped
    }
}

fn uniform_factor(rng: &mut impl Rng, strength: f64) -> f32 {
    if strength > 0.0 {
        rng.random_range(1.0 - strength..=1.0 + strength) as f32
    } else {
        1.0
    }
}

/// Applies `policy` to a (structure, appearance) pair.
pub fn augment_pair(
    structure: &ImageTensor,
    appearance: &ImageTensor,
    policy: &AugmentPolicy,
    rng: &mut impl Rng,
) -> Result<(ImageTensor, ImageTensor)> {
    policy.validate()?;
    let mut s = geometric(&Pixels::from_image(structure)?, policy, rng);
    if rng.random_bool(policy.jitter_p) {
        let b = uniform_factor(rng, policy.brightness);
        let c = uniform_factor(rng, policy.contrast);
        let sat = uniform_factor(rng, policy.saturation);
        let hue = if policy.hue > 0.0 {
            rng.random_range(-policy.hue..=policy.hue) as f32
        } else {
            0.0
        };
        s.brightness(b);
        s.contrast(c);
        s.saturation(sat);
        if hue != 0.0 {
            s.hue(hue);
        }
    }
    if rng.random_bool(policy.blur_p) {
        let sigma = rng.random_range(policy.blur_sigma_min..=policy.blur_sigma_max);
        s = s.blur(sigma);
    }
    let t = geometric(&Pixels::from_image(appearance)?, policy, rng);
    Ok((
        s.into_image(structure.device(), structure.dtype())?,
        t.into_image(appearance.device(), appearance.dtype())?,
    ))
}

/// Photometric-only jitter with fixed factors, for building test fixtures.
pub fn jitter_image(img: &ImageTensor, brightness: f32, contrast: f32, saturation: f32, hue: f32) -> Result<ImageTensor> {
    let mut px = Pixels::from_image(img)?;
    px.brightness(brightness);
    px.contrast(contrast);
    px.saturation(saturation);
    if hue != 0.0 {
        px.hue(hue);
    }
    px.into_image(img.device(), img.dtype())
}
