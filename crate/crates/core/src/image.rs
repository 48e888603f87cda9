//! RGB images in `[0, 1]` pixel space and the geometric / photometric
//! primitives used by the view pipeline and fine-tuning augmentation.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Height × width × 3, row-major, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::shape("Image::new", &[height, width, 3], &[data.len()]));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Image {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(3)
    }

    pub fn pixels_mut(&mut self) -> std::slice::ChunksExactMut<'_, f32> {
        self.data.chunks_exact_mut(3)
    }

    pub fn clamp(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        assert!(top + h <= self.height && left + w <= self.width);
        let mut data = Vec::with_capacity(h * w * 3);
        for y in top..top + h {
            let start = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Image {
            height: h,
            width: w,
            data,
        }
    }

    /// Bilinear resize with half-pixel centers. Same-size resize is exact.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Self {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let coords = |dst: usize, src: usize| -> Vec<(usize, usize, f32)> {
            let scale = src as f32 / dst as f32;
            (0..dst)
                .map(|i| {
                    let s = ((i as f32 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f32);
                    let lo = s.floor() as usize;
                    let hi = (lo + 1).min(src - 1);
                    (lo, hi, s - lo as f32)
                })
                .collect()
        };
        let ys = coords(out_h, self.height);
        let xs = coords(out_w, self.width);
        let mut data = Vec::with_capacity(out_h * out_w * 3);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for c in 0..3 {
                    let top = self.at(y0, x0, c) * (1.0 - fx) + self.at(y0, x1, c) * fx;
                    let bottom = self.at(y1, x0, c) * (1.0 - fx) + self.at(y1, x1, c) * fx;
                    data.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        Image {
            height: out_h,
            width: out_w,
            data,
        }
    }

    pub fn flip_horizontal(&mut self) {
        let w = self.width;
        for row in self.data.chunks_exact_mut(w * 3) {
            for x in 0..w / 2 {
                for c in 0..3 {
                    row.swap(x * 3 + c, (w - 1 - x) * 3 + c);
                }
            }
        }
    }

    /// Luma, ITU-R 601.
    pub fn gray_levels(&self) -> Vec<f32> {
        self.pixels().map(luma).collect()
    }

    pub fn to_grayscale(&mut self) {
        for px in self.pixels_mut() {
            let l = luma(px);
            px.fill(l);
        }
    }

    pub fn adjust_brightness(&mut self, factor: f32) {
        for v in &mut self.data {
            *v = (*v * factor).clamp(0.0, 1.0);
        }
    }

    pub fn adjust_contrast(&mut self, factor: f32) {
        let mean = self.gray_levels().iter().sum::<f32>() / (self.height * self.width) as f32;
        for v in &mut self.data {
            *v = (mean + (*v - mean) * factor).clamp(0.0, 1.0);
        }
    }

    pub fn adjust_saturation(&mut self, factor: f32) {
        for px in self.pixels_mut() {
            let l = luma(px);
            for v in px.iter_mut() {
                *v = (l + (*v - l) * factor).clamp(0.0, 1.0);
            }
        }
    }

    /// Rotates hue by `shift` turns (in `[-0.5, 0.5]`).
    pub fn adjust_hue(&mut self, shift: f32) {
        for px in self.pixels_mut() {
            let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
            let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
            px[0] = r;
            px[1] = g;
            px[2] = b;
        }
    }

    /// Separable Gaussian blur, kernel radius `⌈3σ⌉`, clamped borders.
    pub fn gaussian_blur(&mut self, sigma: f32) {
        let radius = (3.0 * sigma).ceil().max(1.0) as isize;
        let kernel: Vec<f32> = (-radius..=radius)
            .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f32 = kernel.iter().sum();
        let kernel: Vec<f32> = kernel.iter().map(|k| k / total).collect();
        let (h, w) = (self.height as isize, self.width as isize);
        let pass = |src: &Image, horizontal: bool| -> Vec<f32> {
            let mut out = vec![0.0; src.data.len()];
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        let mut acc = 0.0;
                        for (k, &wgt) in kernel.iter().enumerate() {
                            let off = k as isize - radius;
                            let (yy, xx) = if horizontal {
                                (y, (x + off).clamp(0, w - 1))
                            } else {
                                ((y + off).clamp(0, h - 1), x)
                            };
                            acc += wgt * src.at(yy as usize, xx as usize, c);
                        }
                        out[((y * w + x) * 3) as usize + c] = acc;
                    }
                }
            }
            out
        };
        self.data = pass(self, true);
        self.data = pass(self, false);
        self.clamp();
    }

    /// Inverts every value strictly above `threshold`.
    pub fn solarize(&mut self, threshold: f32) {
        for v in &mut self.data {
            if *v > threshold {
                *v = 1.0 - *v;
            }
        }
    }

    /// Stacks equally-sized images into a `[B, h, w, 3]` tensor, applying
    /// per-channel `(x − mean) / std`.
    pub fn batch<T: Element>(images: &[&Image], mean: [f32; 3], std: [f32; 3]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| Error::param("empty image batch"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * h * w * 3);
        for img in images {
            if img.height != h || img.width != w {
                return Err(Error::shape("Image::batch", &[h, w], &[img.height, img.width]));
            }
            for px in img.pixels() {
                for c in 0..3 {
                    data.push(T::from_f64_lossy(((px[c] - mean[c]) / std[c]) as f64));
                }
            }
        }
        Tensor::new(vec![images.len(), h, w, 3], data)
    }
}

fn luma(px: &[f32]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
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
