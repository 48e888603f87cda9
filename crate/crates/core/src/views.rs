//! Multi-crop view generation: global and local random-resized crops, each
//! independently augmented.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::RngState;

const CROP_ATTEMPTS: usize = 10;
const MIN_RATIO: f64 = 3.0 / 4.0;
const MAX_RATIO: f64 = 4.0 / 3.0;

/// Probabilities and strengths for the per-view augmentation chain
/// (flip → color jitter → grayscale → blur → solarize).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma: [f64; 2],
    pub solarize_p: f64,
    pub solarize_threshold: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma: [0.1, 2.0],
            solarize_p: 0.0,
            solarize_threshold: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            flip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            solarize_p: 0.0,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_p", self.flip_p),
            ("jitter_p", self.jitter_p),
            ("grayscale_p", self.grayscale_p),
            ("blur_p", self.blur_p),
            ("solarize_p", self.solarize_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::param(format!("{name} {p} outside [0, 1]")));
            }
        }
        if !(self.blur_sigma[0] > 0.0 && self.blur_sigma[0] <= self.blur_sigma[1]) {
            return Err(Error::param("blur_sigma must satisfy 0 < min <= max"));
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::param("hue jitter must lie in [0, 0.5]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewConfig {
    pub n_global: usize,
    pub n_local: usize,
    /// Crop area as a fraction of the source, `[min, max]`.
    pub global_scale: [f64; 2],
    pub local_scale: [f64; 2],
    pub global_size: usize,
    pub local_size: usize,
    /// One entry per global view; the last entry repeats if there are more views.
    pub global_augment: Vec<AugmentConfig>,
    pub local_augment: AugmentConfig,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self::cifar()
    }
}

impl ViewConfig {
    fn with_scales(size: usize, local: [f64; 2], global: [f64; 2]) -> Self {
        let first = AugmentConfig {
            blur_p: 1.0,
            ..Default::default()
        };
        let second = AugmentConfig {
            blur_p: 0.1,
            solarize_p: 0.2,
            ..Default::default()
        };
        ViewConfig {
            n_global: 2,
            n_local: 8,
            global_scale: global,
            local_scale: local,
            global_size: size,
            local_size: size / 2,
            global_augment: vec![first, second],
            local_augment: AugmentConfig::default(),
        }
    }

    /// 32×32 sources: local crops 20–50 %, global crops 70–100 %.
    pub fn cifar() -> Self {
        Self::with_scales(32, [0.2, 0.5], [0.7, 1.0])
    }

    /// 64×64 sources: local crops 20–40 %, global crops 50–100 %.
    pub fn tiny_imagenet() -> Self {
        Self::with_scales(64, [0.2, 0.4], [0.5, 1.0])
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_global == 0 {
            return Err(Error::param("n_global must be >= 1"));
        }
        if self.local_size * 2 != self.global_size {
            return Err(Error::param(format!(
                "local view side {} must be half the global side {} (1:4 area)",
                self.local_size, self.global_size
            )));
        }
        for (name, [lo, hi]) in [("global_scale", self.global_scale), ("local_scale", self.local_scale)] {
            if !(lo > 0.0 && lo < hi && hi <= 1.0) {
                return Err(Error::param(format!("{name} [{lo}, {hi}] must satisfy 0 < min < max <= 1")));
            }
        }
        if self.global_augment.is_empty() {
            return Err(Error::param("global_augment needs at least one entry"));
        }
        for a in self.global_augment.iter().chain(std::iter::once(&self.local_augment)) {
            a.validate()?;
        }
        Ok(())
    }

    pub fn global_augment_for(&self, i: usize) -> &AugmentConfig {
        &self.global_augment[i.min(self.global_augment.len() - 1)]
    }
}

/// Crop rectangle in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropBox {
    pub fn area_fraction(&self, h: usize, w: usize) -> f64 {
        (self.height * self.width) as f64 / (h * w) as f64
    }
}

/// Samples a crop whose area fraction lies in `scale` and whose aspect ratio
/// lies in `[3/4, 4/3]`. After 10 failed attempts, falls back to a centered
/// square whose area is closest to the middle of `scale`.
pub fn sample_crop(h: usize, w: usize, scale: [f64; 2], rng: &mut RngState) -> CropBox {
    let area = (h * w) as f64;
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.uniform_range(scale[0], scale[1]);
        let ratio = rng.uniform_range(MIN_RATIO.ln(), MAX_RATIO.ln()).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw == 0 || ch == 0 || cw > w || ch > h {
            continue;
        }
        let frac = (cw * ch) as f64 / area;
        if frac < scale[0] || frac > scale[1] {
            continue;
        }
        let top = rng.below(h - ch + 1);
        let left = rng.below(w - cw + 1);
        return CropBox {
            top,
            left,
            height: ch,
            width: cw,
        };
    }
    let mid = 0.5 * (scale[0] + scale[1]);
    let side = ((mid * area).sqrt().round() as usize).clamp(1, h.min(w));
    CropBox {
        top: (h - side) / 2,
        left: (w - side) / 2,
        height: side,
        width: side,
    }
}

pub fn random_resized_crop(image: &Image, scale: [f64; 2], out_size: usize, rng: &mut RngState) -> Image {
    let b = sample_crop(image.height, image.width, scale, rng);
    image
        .crop(b.top, b.left, b.height, b.width)
        .resize(out_size, out_size)
}

/// Applies the augmentation chain in place; the result stays in `[0, 1]`.
pub fn augment(view: &mut Image, cfg: &AugmentConfig, rng: &mut RngState) {
    if rng.bernoulli(cfg.flip_p) {
        view.flip_horizontal();
    }
    if rng.bernoulli(cfg.jitter_p) {
        let mut factor = |s: f64| rng.uniform_range((1.0 - s).max(0.0), 1.0 + s) as f32;
        let (b, c, s) = (factor(cfg.brightness), factor(cfg.contrast), factor(cfg.saturation));
        let h = rng.uniform_range(-cfg.hue, cfg.hue) as f32;
        view.adjust_brightness(b);
        view.adjust_contrast(c);
        view.adjust_saturation(s);
        if h != 0.0 {
            view.adjust_hue(h);
        }
    }
    if rng.bernoulli(cfg.grayscale_p) {
        view.to_grayscale();
    }
    if rng.bernoulli(cfg.blur_p) {
        let sigma = rng.uniform_range(cfg.blur_sigma[0], cfg.blur_sigma[1]) as f32;
        view.gaussian_blur(sigma);
    }
    if rng.bernoulli(cfg.solarize_p) {
        view.solarize(cfg.solarize_threshold as f32);
    }
    view.clamp();
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub globals: Vec<Image>,
    pub locals: Vec<Image>,
    pub source_id: u64,
}

/// Global and local views of one image. View `i` draws from its own stream
/// forked from `rng`, so the result depends only on `(image, rng seed)`.
pub fn generate_views(image: &Image, source_id: u64, cfg: &ViewConfig, rng: &RngState) -> Result<ViewBatch> {
    let make = |i: usize, scale: [f64; 2], size: usize, aug: &AugmentConfig| {
        let mut r = rng.fork(i as u64);
        let mut v = random_resized_crop(image, scale, size, &mut r);
        augment(&mut v, aug, &mut r);
        v
    };
    let globals = (0..cfg.n_global)
        .map(|i| make(i, cfg.global_scale, cfg.global_size, cfg.global_augment_for(i)))
        .collect();
    let locals = (0..cfg.n_local)
        .map(|i| make(cfg.n_global + i, cfg.local_scale, cfg.local_size, &cfg.local_augment))
        .collect();
    Ok(ViewBatch {
        globals,
        locals,
        source_id,
    })
}
