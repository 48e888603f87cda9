//! Dataset ingestion: CIFAR binary records, a raw-tensor import format, and
//! deterministic synthetic datasets for tests.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::RngState;

pub const CIFAR10_TRAIN: usize = 50_000;
pub const CIFAR10_TEST: usize = 10_000;
pub const CIFAR100_TRAIN: usize = 50_000;
pub const CIFAR100_TEST: usize = 10_000;
pub const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Pixels in `[0, 1]`; channel normalization is applied at batch time.
    pub image: Image,
    pub label: usize,
    pub id: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub train_count: usize,
    pub test_count: usize,
    pub image_size: [usize; 2],
    pub classes: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// Builds a dataset, recording counts and training-split channel statistics.
    pub fn new(name: &str, classes: usize, train: Vec<Sample>, test: Vec<Sample>) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::validation(format!("dataset `{name}` has no training samples")))?;
        let size = [first.image.height, first.image.width];
        for s in train.iter().chain(&test) {
            if s.label >= classes {
                return Err(Error::validation(format!(
                    "sample {} has label {} >= {classes}",
                    s.id, s.label
                )));
            }
            if [s.image.height, s.image.width] != size {
                return Err(Error::validation(format!("sample {} has a different image size", s.id)));
            }
        }
        let (mean, std) = channel_stats(&train);
        Ok(Dataset {
            spec: DatasetSpec {
                name: name.to_string(),
                train_count: train.len(),
                test_count: test.len(),
                image_size: size,
                classes,
                mean,
                std,
            },
            train,
            test,
        })
    }

    /// Keeps the first `n_train` / `n_test` samples (counts recomputed).
    pub fn subset(&self, n_train: usize, n_test: usize) -> Result<Self> {
        Dataset::new(
            &self.spec.name,
            self.spec.classes,
            self.train.iter().take(n_train).cloned().collect(),
            self.test.iter().take(n_test).cloned().collect(),
        )
    }
}

/// Per-channel mean and standard deviation over all pixels.
pub fn channel_stats(samples: &[Sample]) -> ([f32; 3], [f32; 3]) {
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    let mut n = 0f64;
    for s in samples {
        for px in s.image.pixels() {
            for c in 0..3 {
                sum[c] += px[c] as f64;
                sq[c] += (px[c] as f64).powi(2);
            }
            n += 1.0;
        }
    }
    let mut mean = [0f32; 3];
    let mut std = [1f32; 3];
    if n > 0.0 {
        for c in 0..3 {
            let m = sum[c] / n;
            mean[c] = m as f32;
            let var = (sq[c] / n - m * m).max(0.0);
            std[c] = if var > 1e-12 { var.sqrt() as f32 } else { 1.0 };
        }
    }
    (mean, std)
}

/// `(x − mean) / std` per channel, in place on channel-last data.
pub fn normalize(data: &mut [f32], mean: [f32; 3], std: [f32; 3]) -> Result<()> {
    if std.iter().any(|&s| s == 0.0 || !s.is_finite()) {
        return Err(Error::param(format!("normalization std {std:?} contains zero")));
    }
    for px in data.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = (px[c] - mean[c]) / std[c];
        }
    }
    Ok(())
}

pub fn denormalize(data: &mut [f32], mean: [f32; 3], std: [f32; 3]) {
    for px in data.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = px[c] * std[c] + mean[c];
        }
    }
}

/// Decodes CIFAR records: `label_bytes` label bytes (the last one is used)
/// followed by 3072 planar pixel bytes (R, G, B planes, each 32×32 row-major).
pub fn parse_cifar_records(
    bytes: &[u8],
    label_bytes: usize,
    classes: usize,
    first_id: u64,
    path: &Path,
) -> Result<Vec<Sample>> {
    let record = label_bytes + CIFAR_PIXELS;
    if !bytes.len().is_multiple_of(record) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("length {} is not a multiple of the {record}-byte record", bytes.len()),
        });
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    bytes
        .chunks_exact(record)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[label_bytes - 1] as usize;
            if label >= classes {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("record {i}: label {label} >= {classes} (corrupt record)"),
                });
            }
            let pixels = &rec[label_bytes..];
            let mut data = Vec::with_capacity(CIFAR_PIXELS);
            for p in 0..plane {
                for c in 0..3 {
                    data.push(pixels[c * plane + p] as f32 / 255.0);
                }
            }
            Ok(Sample {
                image: Image::new(CIFAR_SIDE, CIFAR_SIDE, data)?,
                label,
                id: first_id + i as u64,
            })
        })
        .collect()
}

/// Encodes samples back into CIFAR records (pixels quantized to bytes).
pub fn encode_cifar_records(samples: &[Sample], label_bytes: usize) -> Vec<u8> {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(samples.len() * (label_bytes + CIFAR_PIXELS));
    for s in samples {
        out.extend(std::iter::repeat_n(s.label as u8, label_bytes));
        for c in 0..3 {
            out.extend((0..plane).map(|p| (s.image.data[p * 3 + c] * 255.0).round().clamp(0.0, 255.0) as u8));
        }
    }
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn load_split(dir: &Path, files: &[&str], label_bytes: usize, classes: usize, first_id: u64) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for f in files {
        let path = dir.join(f);
        let bytes = read(&path)?;
        out.extend(parse_cifar_records(&bytes, label_bytes, classes, first_id + out.len() as u64, &path)?);
    }
    Ok(out)
}

/// Reads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let train_files = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
    let train = load_split(dir, &train_files, 1, 10, 0)?;
    let test = load_split(dir, &["test_batch.bin"], 1, 10, 1 << 32)?;
    Dataset::new("cifar10", 10, train, test)
}

/// Reads `train.bin` and `test.bin` (coarse + fine label bytes; fine label used).
pub fn load_cifar100(dir: &Path) -> Result<Dataset> {
    let train = load_split(dir, &["train.bin"], 2, 100, 0)?;
    let test = load_split(dir, &["test.bin"], 2, 100, 1 << 32)?;
    Dataset::new("cifar100", 100, train, test)
}

const RAW_MAGIC: &[u8; 4] = b"SVTR";
const RAW_VERSION: u32 = 1;

/// Raw-tensor import format, little-endian throughout:
///
/// ```text
/// magic "SVTR" | version u32 (=1) | count u32 | height u32 | width u32 | channels u32 (=3)
/// labels: count × u32
/// pixels: count × height × width × 3 × f32, channel-last, values in [0, 1]
/// ```
pub fn write_raw(path: &Path, samples: &[Sample]) -> Result<()> {
    let first = samples.first().ok_or_else(|| Error::param("nothing to write"))?;
    let (h, w) = (first.image.height, first.image.width);
    let mut out = Vec::new();
    out.extend_from_slice(RAW_MAGIC);
    for v in [RAW_VERSION, samples.len() as u32, h as u32, w as u32, 3] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in samples {
        out.extend_from_slice(&(s.label as u32).to_le_bytes());
    }
    for s in samples {
        if (s.image.height, s.image.width) != (h, w) {
            return Err(Error::validation("raw export needs equally sized images"));
        }
        for v in &s.image.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: &Path, classes: usize) -> Result<Vec<Sample>> {
    let bytes = read(path)?;
    let fail = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 24 || &bytes[..4] != RAW_MAGIC {
        return Err(fail("missing SVTR header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (version, n, h, w, c) = (word(0), word(1), word(2), word(3), word(4));
    if version != RAW_VERSION as usize {
        return Err(fail(format!("unsupported raw version {version}")));
    }
    if c != 3 || h == 0 || w == 0 {
        return Err(fail(format!("unsupported geometry {h}x{w}x{c}")));
    }
    let labels_at = 24;
    let pixels_at = labels_at + 4 * n;
    let expected = pixels_at + n * h * w * 3 * 4;
    if bytes.len() != expected {
        return Err(fail(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    (0..n)
        .map(|i| {
            let label = u32::from_le_bytes(bytes[labels_at + 4 * i..labels_at + 4 * i + 4].try_into().expect("4 bytes")) as usize;
            if label >= classes {
                return Err(fail(format!("sample {i}: label {label} >= {classes}")));
            }
            let start = pixels_at + i * h * w * 12;
            let data: Vec<f32> = bytes[start..start + h * w * 12]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(fail(format!("sample {i}: non-finite pixel")));
            }
            Ok(Sample {
                image: Image::new(h, w, data)?,
                label,
                id: i as u64,
            })
        })
        .collect()
}

/// Synthetic dataset options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub noise: f64,
    /// Draw each class pattern inside one random quadrant over a noisy
    /// background instead of across the whole image.
    pub quadrant: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 4,
            train_per_class: 64,
            test_per_class: 16,
            size: 32,
            noise: 0.05,
            quadrant: false,
        }
    }
}

/// Pattern `class` evaluated at relative coordinates `(u, v) ∈ [0,1)²`;
/// returns whether the pixel is foreground.
fn pattern(class: usize, u: f64, v: f64) -> bool {
    let (cu, cv) = (u - 0.5, v - 0.5);
    match class % 6 {
        0 => cu.abs() < 0.3 && cv.abs() < 0.3,
        1 => cu * cu + cv * cv < 0.12,
        2 => ((v * 4.0) as usize).is_multiple_of(2),
        3 => ((u * 4.0) as usize).is_multiple_of(2),
        4 => (cu.abs() < 0.12) || (cv.abs() < 0.12),
        _ => (u + v - 1.0).abs() < 0.25,
    }
}

fn class_colors(class: usize, classes: usize) -> ([f32; 3], [f32; 3]) {
    let hue = class as f64 / classes.max(1) as f64;
    let fg = hsv(hue, 0.8, 0.9);
    let bg = hsv((hue + 0.5) % 1.0, 0.3, 0.25);
    (fg, bg)
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// One synthetic image; `quadrant` selects where the pattern sits when the
/// config asks for quadrant placement (0 = top-left, then row-major).
pub fn synthetic_image(cfg: &SyntheticConfig, class: usize, quadrant: usize, rng: &mut RngState) -> Image {
    let s = cfg.size;
    let (fg, bg) = class_colors(class, cfg.classes);
    let mut data = Vec::with_capacity(s * s * 3);
    let half = s / 2;
    let (qy, qx) = ((quadrant / 2) * half, (quadrant % 2) * half);
    for y in 0..s {
        for x in 0..s {
            let on = if cfg.quadrant {
                let inside = (qy..qy + half).contains(&y) && (qx..qx + half).contains(&x);
                inside && pattern(class, (x - qx) as f64 / half as f64, (y - qy) as f64 / half as f64)
            } else {
                pattern(class, x as f64 / s as f64, y as f64 / s as f64)
            };
            let base = if cfg.quadrant && !on {
                [0.5, 0.5, 0.5]
            } else if on {
                fg
            } else {
                bg
            };
            for c in base {
                let n = if cfg.noise > 0.0 { rng.normal(0.0, cfg.noise) } else { 0.0 };
                data.push((c as f64 + n).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Image::new(s, s, data).expect("consistent geometry")
}

/// Balanced synthetic classification set; byte-identical for a given seed.
pub fn synthetic_dataset(seed: u64, cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.train_per_class == 0 || cfg.size < 4 || !cfg.size.is_multiple_of(2) {
        return Err(Error::param("synthetic dataset needs classes >= 1, samples >= 1, even size >= 4"));
    }
    let root = RngState::new(seed);
    let split = |tag: u64, per_class: usize| -> Vec<Sample> {
        let mut out = Vec::with_capacity(per_class * cfg.classes);
        for i in 0..per_class {
            for class in 0..cfg.classes {
                let id = (i * cfg.classes + class) as u64;
                let mut r = root.fork_path(&[tag, id]);
                let quadrant = r.below(4);
                out.push(Sample {
                    image: synthetic_image(cfg, class, quadrant, &mut r),
                    label: class,
                    id: (tag << 32) | id,
                });
            }
        }
        out
    };
    let train = split(0, cfg.train_per_class);
    let test = split(1, cfg.test_per_class);
    Dataset::new("synthetic", cfg.classes, train, test)
}

/// Quadrant that holds the pattern of a quadrant-mode synthetic sample.
pub fn synthetic_quadrant(seed: u64, sample_id: u64) -> usize {
    let (tag, id) = (sample_id >> 32, sample_id & 0xFFFF_FFFF);
    RngState::new(seed).fork_path(&[tag, id]).below(4)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_zero_record() {
        let bytes = vec![0u8; 3073];
        let s = parse_cifar_records(&bytes, 1, 10, 0, Path::new("x")).unwrap();
        assert_eq!(s[0].label, 0);
        assert!(s[0].image.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_length_and_label() {
        assert!(matches!(
            parse_cifar_records(&[0u8; 3072], 1, 10, 0, Path::new("x")),
            Err(Error::Format { .. })
        ));
        let mut bytes = vec![0u8; 3073];
        bytes[0] = 10;
        assert!(parse_cifar_records(&bytes, 1, 10, 0, Path::new("x")).is_err());
        let mut bytes = vec![0u8; 3074];
        bytes[1] = 99;
        assert_eq!(parse_cifar_records(&bytes, 2, 100, 0, Path::new("x")).unwrap()[0].label, 99);
        assert!(parse_cifar_records(&bytes[..3073], 2, 100, 0, Path::new("x")).is_err());
    }

    #[test]
    fn normalize_identity_and_inverse() {
        let orig: Vec<f32> = (0..30).map(|i| i as f32 / 29.0).collect();
        let mut d = orig.clone();
        normalize(&mut d, [0.0; 3], [1.0; 3]).unwrap();
        assert_eq!(d, orig);
        normalize(&mut d, [0.4, 0.5, 0.6], [0.2, 0.25, 0.3]).unwrap();
        denormalize(&mut d, [0.4, 0.5, 0.6], [0.2, 0.25, 0.3]);
        for (a, b) in d.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(normalize(&mut d, [0.0; 3], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn synthetic_determinism_and_noise_free_classes() {
        let cfg = SyntheticConfig {
            noise: 0.0,
            ..Default::default()
        };
        let a = synthetic_dataset(3, &cfg).unwrap();
        let b = synthetic_dataset(3, &cfg).unwrap();
        assert_eq!(a.train, b.train);
        for s in &a.train {
            let first = a.train.iter().find(|t| t.label == s.label).unwrap();
            assert_eq!(s.image, first.image);
        }
        assert_eq!(a.spec.train_count, 4 * 64);
    }

    #[test]
    fn normalized_training_set_is_centered() {
        let ds = synthetic_dataset(1, &SyntheticConfig::default()).unwrap();
        let (mean, std) = (ds.spec.mean, ds.spec.std);
        let mut acc = [0f64; 3];
        let mut n = 0.0;
        for s in &ds.train {
            let mut d = s.image.data.clone();
            normalize(&mut d, mean, std).unwrap();
            for px in d.chunks_exact(3) {
                for c in 0..3 {
                    acc[c] += px[c] as f64;
                }
                n += 1.0;
            }
        }
        for a in acc {
            assert!((a / n).abs() < 0.01);
        }
    }

    #[test]
    fn quadrant_lookup_matches_generation() {
        let cfg = SyntheticConfig {
            quadrant: true,
            noise: 0.0,
            ..Default::default()
        };
        let ds = synthetic_dataset(12, &cfg).unwrap();
        for s in ds.test.iter().take(10) {
            let q = synthetic_quadrant(12, s.id);
            let (qy, qx) = ((q / 2) * 16, (q % 2) * 16);
            let mut outside_gray = true;
            for y in 0..32 {
                for x in 0..32 {
                    let inside = (qy..qy + 16).contains(&y) && (qx..qx + 16).contains(&x);
                    if !inside && s.image.at(y, x, 0) != 0.5 {
                        outside_gray = false;
                    }
                }
            }
            assert!(outside_gray);
        }
    }
}
