//! Two-view image augmentation: random resized crop, horizontal flip, color
//! jitter, grayscale, Gaussian blur and per-channel normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::vit::Image;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewAugment {
    pub crop_scale: [f64; 2],
    pub crop_ratio: [f64; 2],
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
}

impl Default for ViewAugment {
    fn default() -> Self {
        Self {
            crop_scale: [0.4, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            grayscale_prob: 0.2,
            blur_prob: 1.0,
            blur_sigma: [0.1, 2.0],
        }
    }
}

impl ViewAugment {
    pub fn identity() -> Self {
        Self {
            crop_scale: [1.0, 1.0],
            crop_ratio: [1.0, 1.0],
            flip_prob: 0.0,
            jitter_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma: [0.1, 2.0],
        }
    }

    fn validate(&self, which: &str) -> Result<()> {
        let probs = [self.flip_prob, self.jitter_prob, self.grayscale_prob, self.blur_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::ConfigValidation(format!("augment.{which}: probabilities must lie in [0, 1]")));
        }
        let [s0, s1] = self.crop_scale;
        let [r0, r1] = self.crop_ratio;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) || !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::ConfigValidation(format!("augment.{which}: invalid crop bounds")));
        }
        if !(self.blur_sigma[0] > 0.0 && self.blur_sigma[0] <= self.blur_sigma[1]) {
            return Err(Error::ConfigValidation(format!("augment.{which}: invalid blur sigma range")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    /// Output side length of both views.
    pub output_size: usize,
    pub normalize: bool,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    /// View fed first to both networks (strong blur).
    pub view1: ViewAugment,
    /// Second view (weak blur).
    pub view2: ViewAugment,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            output_size: 32,
            normalize: true,
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
            view1: ViewAugment::default(),
            view2: ViewAugment {
                blur_prob: 0.1,
                ..ViewAugment::default()
            },
        }
    }
}

impl AugmentationConfig {
    pub fn identity(output_size: usize) -> Self {
        Self {
            output_size,
            normalize: false,
            view1: ViewAugment::identity(),
            view2: ViewAugment::identity(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_size == 0 {
            return Err(Error::ConfigValidation("augment: output_size must be positive".into()));
        }
        if self.mean.len() != self.std.len() || self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::ConfigValidation("augment: mean/std must match in length, std > 0".into()));
        }
        self.view1.validate("view1")?;
        self.view2.validate("view2")
    }

    /// Deterministic evaluation transform: resize to `output_size`, normalize.
    pub fn eval_view(&self, image: &Image) -> Image {
        let out = resize_bilinear(image, 0, 0, image.height, image.width, self.output_size, self.output_size);
        self.finish(out)
    }

    /// Channel normalization applied to every view.
    pub fn finish(&self, mut img: Image) -> Image {
        if self.normalize && img.channels == self.mean.len() {
            for px in img.data.chunks_exact_mut(img.channels) {
                for (c, v) in px.iter_mut().enumerate() {
                    *v = (*v - self.mean[c]) / self.std[c];
                }
            }
        }
        img
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    if hi > lo {
        lo + (hi - lo) * u
    } else {
        lo
    }
}

/// Crop rectangle `(top, left, height, width)` following the usual
/// random-resized-crop sampling with ten attempts and a centered fallback.
pub fn sample_crop<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, scale: [f64; 2], ratio: [f64; 2]) -> (usize, usize, usize, usize) {
    let area = (height * width) as f64;
    let (lr0, lr1) = (ratio[0].ln(), ratio[1].ln());
    for _ in 0..10 {
        let target = area * uniform(rng, scale[0], scale[1]);
        let aspect = uniform(rng, lr0, lr1).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return (top, left, h, w);
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (h, w) = if in_ratio < ratio[0] {
        let w = width;
        (((w as f64) / ratio[0]).round() as usize, w)
    } else if in_ratio > ratio[1] {
        let h = height;
        (h, ((h as f64) * ratio[1]).round() as usize)
    } else {
        (height, width)
    };
    let (h, w) = (h.clamp(1, height), w.clamp(1, width));
    ((height - h) / 2, (width - w) / 2, h, w)
}

/// Bilinear resize (half-pixel centers, edge clamped) of the crop
/// `[top, top+h) x [left, left+w)` to `out_h x out_w`.
pub fn resize_bilinear(img: &Image, top: usize, left: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Image {
    let c = img.channels;
    let mut out = Image::zeros(out_h, out_w, c);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let coord = |o: usize, scale: f64, len: usize| -> (usize, usize, f32) {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(len - 1);
        let hi = (lo + 1).min(len - 1);
        (lo, hi, (src - lo as f64) as f32)
    };
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, sy, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, sx, w);
            for ch in 0..c {
                let p00 = img.at(top + y0, left + x0, ch);
                let p01 = img.at(top + y0, left + x1, ch);
                let p10 = img.at(top + y1, left + x0, ch);
                let p11 = img.at(top + y1, left + x1, ch);
                let a = p00 + (p01 - p00) * fx;
                let b = p10 + (p11 - p10) * fx;
                *out.at_mut(oy, ox, ch) = a + (b - a) * fy;
            }
        }
    }
    out
}

fn flip_horizontal(img: &mut Image) {
    let (w, c) = (img.width, img.channels);
    for y in 0..img.height {
        let row = &mut img.data[y * w * c..(y + 1) * w * c];
        for x in 0..w / 2 {
            for ch in 0..c {
                row.swap(x * c + ch, (w - 1 - x) * c + ch);
            }
        }
    }
}

fn luma(px: &[f32]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn color_jitter<R: Rng + ?Sized>(img: &mut Image, aug: &ViewAugment, rng: &mut R) {
    let b = uniform(rng, (1.0 - aug.brightness).max(0.0), 1.0 + aug.brightness) as f32;
    let c = uniform(rng, (1.0 - aug.contrast).max(0.0), 1.0 + aug.contrast) as f32;
    let s = uniform(rng, (1.0 - aug.saturation).max(0.0), 1.0 + aug.saturation) as f32;
    for v in img.data.iter_mut() {
        *v = (*v * b).clamp(0.0, 1.0);
    }
    if img.channels == 3 {
        let n = (img.height * img.width) as f32;
        let mean = img.data.chunks_exact(3).map(luma).sum::<f32>() / n;
        for v in img.data.iter_mut() {
            *v = (mean + (*v - mean) * c).clamp(0.0, 1.0);
        }
        for px in img.data.chunks_exact_mut(3) {
            let g = luma(px);
            for v in px.iter_mut() {
                *v = (g + (*v - g) * s).clamp(0.0, 1.0);
            }
        }
    }
}

fn grayscale(img: &mut Image) {
    if img.channels != 3 {
        return;
    }
    for px in img.data.chunks_exact_mut(3) {
        let g = luma(px);
        px.fill(g);
    }
}

fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = ((3.0 * sigma).ceil() as usize).max(1);
    let kernel: Vec<f32> = {
        let raw: Vec<f64> = (0..=2 * radius)
            .map(|i| {
                let d = i as f64 - radius as f64;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let z: f64 = raw.iter().sum();
        raw.iter().map(|v| (v / z) as f32).collect()
    };
    let reflect = |i: isize, len: usize| -> usize {
        let len = len as isize;
        let mut i = i;
        while i < 0 || i >= len {
            i = if i < 0 { -i } else { 2 * (len - 1) - i };
            if len == 1 {
                return 0;
            }
        }
        i as usize
    };
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut tmp = Image::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let xx = reflect(x as isize + k as isize - radius as isize, w);
                    acc += kv * img.at(y, xx, ch);
                }
                *tmp.at_mut(y, x, ch) = acc;
            }
        }
    }
    let mut out = Image::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let yy = reflect(y as isize + k as isize - radius as isize, h);
                    acc += kv * tmp.at(yy, x, ch);
                }
                *out.at_mut(y, x, ch) = acc;
            }
        }
    }
    out
}

/// One augmented view. Consumes a fixed number of draws per enabled step.
pub fn augment_view<R: Rng + ?Sized>(image: &Image, aug: &ViewAugment, output_size: usize, rng: &mut R) -> Image {
    let (top, left, h, w) = sample_crop(rng, image.height, image.width, aug.crop_scale, aug.crop_ratio);
    let mut out = resize_bilinear(image, top, left, h, w, output_size, output_size);
    if rng.random::<f64>() < aug.flip_prob {
        flip_horizontal(&mut out);
    }
    if rng.random::<f64>() < aug.jitter_prob {
        color_jitter(&mut out, aug, rng);
    }
    if rng.random::<f64>() < aug.grayscale_prob {
        grayscale(&mut out);
    }
    if rng.random::<f64>() < aug.blur_prob {
        let sigma = uniform(rng, aug.blur_sigma[0], aug.blur_sigma[1]);
        out = gaussian_blur(&out, sigma);
    }
    out
}

/// Two independently augmented views `(student-first, teacher-first)` of one image.
pub fn make_views<R: Rng + ?Sized>(image: &Image, aug: &AugmentationConfig, rng: &mut R) -> (Image, Image) {
    let a = augment_view(image, &aug.view1, aug.output_size, rng);
    let b = augment_view(image, &aug.view2, aug.output_size, rng);
    (aug.finish(a), aug.finish(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        Image::new(h, w, c, (0..h * w * c).map(|i| i as f32 / (h * w * c) as f32).collect()).unwrap()
    }

    #[test]
    fn identity_config_copies_input() {
        let img = ramp(8, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = make_views(&img, &AugmentationConfig::identity(8), &mut rng);
        assert_eq!(a, img);
        assert_eq!(b, img);
    }

    #[test]
    fn replayed_rng_gives_same_views() {
        let img = ramp(16, 16, 3);
        let aug = AugmentationConfig {
            output_size: 16,
            ..Default::default()
        };
        let a = make_views(&img, &aug, &mut ChaCha8Rng::seed_from_u64(5));
        let b = make_views(&img, &aug, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let c = make_views(&img, &aug, &mut ChaCha8Rng::seed_from_u64(6));
        assert_ne!(a, c);
        assert_eq!(a.0.height, 16);
        assert_eq!(a.1.width, 16);
    }

    #[test]
    fn full_scale_crop_is_plain_resize() {
        // 4x4 ramp, upsampled to 8x8. With half-pixel centers, output pixel o
        // samples source coordinate (o + 0.5) / 2 - 0.5 clamped at 0.
        let img = Image::new(4, 4, 1, (0..16).map(|v| v as f32).collect()).unwrap();
        let view = ViewAugment {
            crop_scale: [1.0, 1.0],
            ..ViewAugment::identity()
        };
        let aug = AugmentationConfig {
            output_size: 8,
            normalize: false,
            view1: ViewAugment {
                crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
                ..view.clone()
            },
            view2: view,
            ..Default::default()
        };
        let (a, b) = make_views(&img, &aug, &mut ChaCha8Rng::seed_from_u64(1));
        let axis = |o: usize| -> f32 {
            let s = ((o as f32 + 0.5) / 2.0 - 0.5).max(0.0);
            s.min(3.0)
        };
        for oy in 0..8 {
            for ox in 0..8 {
                // the ramp is linear (v = 4y + x), so bilinear sampling is exact
                let expect = 4.0 * axis(oy) + axis(ox);
                assert!((a.at(oy, ox, 0) - expect).abs() < 1e-5, "({oy},{ox})");
                assert!((b.at(oy, ox, 0) - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn crop_stays_inside_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (t, l, h, w) = sample_crop(&mut rng, 20, 12, [0.08, 1.0], [0.75, 4.0 / 3.0]);
            assert!(h >= 1 && w >= 1 && t + h <= 20 && l + w <= 12);
        }
    }

    #[test]
    fn flip_and_gray() {
        let mut img = Image::new(1, 3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        flip_horizontal(&mut img);
        assert_eq!(img.data, vec![3.0, 2.0, 1.0]);
        let mut rgb = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        grayscale(&mut rgb);
        assert!(rgb.data.iter().all(|v| (*v - 0.299).abs() < 1e-6));
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Image::new(5, 5, 3, vec![0.25; 75]).unwrap();
        let out = gaussian_blur(&img, 1.3);
        assert!(out.data.iter().all(|v| (*v - 0.25).abs() < 1e-6));
    }
}
