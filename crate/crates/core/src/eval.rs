//! Evaluation math: top-1 accuracy, mean corruption error and CLS attention
//! maps with graymap rasters.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::finetune::Classifier;
use crate::image::Image;
use crate::tensor::{Element, Tensor};
use crate::vit::ViTModel;

/// Index of the largest entry; ties go to the lower index.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `logits [N, k]` whose argmax equals the label.
pub fn top1<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::validation("top-1 accuracy of an empty set"));
    }
    let rows = logits.numel() / logits.last_dim();
    if rows != labels.len() {
        return Err(Error::shape("top1", logits.shape(), &[labels.len()]));
    }
    let hits = logits.rows().zip(labels).filter(|(r, &y)| argmax(r) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Unweighted mean of per-set top-1 error percentages.
pub fn mce(errors: &[(String, f64)]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::validation("mCE needs at least one corrupted set"));
    }
    Ok(errors.iter().map(|(_, e)| e).sum::<f64>() / errors.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorruptionReport {
    pub clean_error: f64,
    pub per_set: Vec<(String, f64)>,
    pub mce: f64,
}

/// Evaluates the clean test set and each corrupted set independently
/// (errors in percent).
pub fn corruption_report(
    model: &Classifier,
    clean: &[Sample],
    corrupted: &[(String, Vec<Sample>)],
    mean: [f32; 3],
    std: [f32; 3],
    batch: usize,
) -> Result<CorruptionReport> {
    let clean_error = 100.0 * (1.0 - model.accuracy(clean, mean, std, batch)?);
    let per_set = corrupted
        .iter()
        .map(|(name, set)| Ok((name.clone(), 100.0 * (1.0 - model.accuracy(set, mean, std, batch)?))))
        .collect::<Result<Vec<_>>>()?;
    let mce = mce(&per_set)?;
    Ok(CorruptionReport {
        clean_error,
        per_set,
        mce,
    })
}

/// CLS attention of one image in one block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub grid: [usize; 2],
    /// Full CLS row per head, CLS→CLS first.
    pub raw: Vec<Vec<f64>>,
    /// Patch entries per head, renormalized to sum to 1.
    pub heads: Vec<Vec<f64>>,
    /// Mean of `heads`.
    pub mean: Vec<f64>,
}

impl AttentionMap {
    /// From a block's attention tensor `[B, H, N, N]`, image `index`.
    pub fn from_attention(att: &Tensor<f32>, index: usize, grid: [usize; 2]) -> Result<Self> {
        let s = att.shape();
        let n = grid[0] * grid[1] + 1;
        if s.len() != 4 || s[2] != n || s[3] != n || index >= s[0] {
            return Err(Error::shape("attention_map", s, &[index + 1, 0, n, n]));
        }
        let h = s[1];
        let mut raw = Vec::with_capacity(h);
        let mut heads = Vec::with_capacity(h);
        for head in 0..h {
            let start = ((index * h + head) * n) * n;
            let row: Vec<f64> = att.data()[start..start + n].iter().map(|&v| v as f64).collect();
            let patch_mass: f64 = row[1..].iter().sum();
            let display = if patch_mass > 0.0 {
                row[1..].iter().map(|v| v / patch_mass).collect()
            } else {
                vec![1.0 / (n - 1) as f64; n - 1]
            };
            raw.push(row);
            heads.push(display);
        }
        let mut mean = vec![0.0; n - 1];
        for d in &heads {
            for (m, v) in mean.iter_mut().zip(d) {
                *m += v / h as f64;
            }
        }
        Ok(AttentionMap { grid, raw, heads, mean })
    }

    /// Share of the mean map inside quadrant `q` (0 = top-left, row-major).
    pub fn quadrant_mass(&self, q: usize) -> f64 {
        let [gh, gw] = self.grid;
        let (y0, x0) = ((q / 2) * gh / 2, (q % 2) * gw / 2);
        let mut mass = 0.0;
        for y in y0..y0 + gh / 2 {
            for x in x0..x0 + gw / 2 {
                mass += self.mean[y * gw + x];
            }
        }
        mass
    }

    /// Per-head dump: `head,cls,p0,p1,…` with the raw (un-renormalized) row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("head,cls");
        for i in 0..self.mean.len() {
            let _ = write!(out, ",p{i}");
        }
        out.push('\n');
        for (h, row) in self.raw.iter().enumerate() {
            let _ = write!(out, "{h}");
            for v in row {
                let _ = write!(out, ",{v:.8}");
            }
            out.push('\n');
        }
        out
    }
}

/// Last-block CLS attention for one image.
pub fn attention_map(model: &ViTModel<f32>, image: &Image, mean: [f32; 3], std: [f32; 3]) -> Result<AttentionMap> {
    let x = Image::batch::<f32>(&[image], mean, std)?;
    let (_, att) = model.features(&x, true)?;
    let last = att.last().ok_or_else(|| Error::validation("encoder has no blocks"))?;
    AttentionMap::from_attention(last, 0, model.config.grid())
}

/// Nearest-neighbour upsampling of a row-major `[gh, gw]` grid.
pub fn upsample_nearest(values: &[f64], grid: [usize; 2], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let gy = y * grid[0] / h;
        for x in 0..w {
            out.push(values[gy * grid[1] + x * grid[1] / w]);
        }
    }
    out
}

/// Binary graymap (P5), scaled so the maximum maps to 255.
pub fn encode_pgm(values: &[f64], h: usize, w: usize) -> Vec<u8> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| if max > 0.0 { (v / max * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 }));
    out
}

/// Writes `{stem}.pgm` (mean map upsampled to the image size) and
/// `{stem}_heads.csv`.
pub fn write_attention(dir: &Path, stem: &str, map: &AttentionMap, size: [usize; 2]) -> Result<()> {
    let up = upsample_nearest(&map.mean, map.grid, size[0], size[1]);
    let pgm = dir.join(format!("{stem}.pgm"));
    fs::write(&pgm, encode_pgm(&up, size[0], size[1])).map_err(|e| Error::io(&pgm, e))?;
    let csv = dir.join(format!("{stem}_heads.csv"));
    fs::write(&csv, map.to_csv()).map_err(|e| Error::io(&csv, e))
}
