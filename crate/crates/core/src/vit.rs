//! Monolithic Vision Transformer encoder.
//!
//! Pre-norm blocks (`x + attn(norm(x))`, `x + mlp(norm(x))`), a learned CLS
//! token and a learned absolute position table sized for the configured
//! input. Views smaller than the configured input get a bilinearly resampled
//! position table.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::rng::RngState;
use crate::tensor::{Element, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    /// `[height, width]` of the largest input, in pixels.
    pub image_size: [usize; 2],
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub dropout: f64,
    pub attn_dropout: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: [32, 32],
            patch_size: 4,
            depth: 9,
            dim: 192,
            heads: 12,
            mlp_ratio: 2.0,
            dropout: 0.0,
            attn_dropout: 0.0,
        }
    }
}

impl ViTConfig {
    /// Patch size policy for square inputs: 8 for 64-pixel inputs, 4 otherwise.
    pub fn for_image_size(size: usize) -> Self {
        ViTConfig {
            image_size: [size, size],
            patch_size: if size >= 64 { 8 } else { 4 },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        let p = self.patch_size;
        let fail = |m: String| Err(Error::param(m));
        if p == 0 || h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return fail(format!("image size {h}x{w} not divisible by patch size {p}"));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.depth == 0 {
            return fail("depth must be >= 1".into());
        }
        if !(self.mlp_ratio >= 1.0) {
            return fail(format!("mlp_ratio {} must be >= 1", self.mlp_ratio));
        }
        for (name, p) in [("dropout", self.dropout), ("attn_dropout", self.attn_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("{name} {p} outside [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> [usize; 2] {
        [self.image_size[0] / self.patch_size, self.image_size[1] / self.patch_size]
    }

    pub fn num_patches(&self) -> usize {
        let [gh, gw] = self.grid();
        gh * gw
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.dim as f64).round() as usize
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    /// Parameter shapes in registration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (self.dim, self.mlp_hidden());
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![self.patch_len(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![1, 1, d]),
            ("pos_embed".to_string(), vec![self.num_patches() + 1, d]),
        ];
        for i in 0..self.depth {
            let b = |s: &str| format!("blocks.{i}.{s}");
            out.extend([
                (b("norm1.gain"), vec![d]),
                (b("norm1.bias"), vec![d]),
                (b("attn.qkv.weight"), vec![d, 3 * d]),
                (b("attn.qkv.bias"), vec![3 * d]),
                (b("attn.proj.weight"), vec![d, d]),
                (b("attn.proj.bias"), vec![d]),
                (b("norm2.gain"), vec![d]),
                (b("norm2.bias"), vec![d]),
                (b("mlp.fc1.weight"), vec![d, h]),
                (b("mlp.fc1.bias"), vec![h]),
                (b("mlp.fc2.weight"), vec![h, d]),
                (b("mlp.fc2.bias"), vec![d]),
            ]);
        }
        out.push(("norm.gain".to_string(), vec![d]));
        out.push(("norm.bias".to_string(), vec![d]));
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    Uniform,
    Xavier,
    TruncatedNormal,
}

impl std::str::FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(InitScheme::Uniform),
            "xavier" => Ok(InitScheme::Xavier),
            "truncated-normal" => Ok(InitScheme::TruncatedNormal),
            other => Err(Error::param(format!("unknown init scheme `{other}`"))),
        }
    }
}

pub const UNIFORM_BOUND: f64 = 0.05;
pub const TRUNC_STD: f64 = 0.02;

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Draws one weight matrix `[fan_in, fan_out]` under `scheme`.
pub fn init_matrix<T: Element>(
    shape: &[usize],
    scheme: InitScheme,
    rng: &mut RngState,
) -> Tensor<T> {
    let (fan_in, fan_out) = (shape[0], shape[shape.len() - 1]);
    Tensor::from_fn(shape.to_vec(), |_| {
        T::from_f64_lossy(match scheme {
            InitScheme::Uniform => rng.uniform_range(-UNIFORM_BOUND, UNIFORM_BOUND),
            InitScheme::Xavier => {
                let b = xavier_bound(fan_in, fan_out);
                rng.uniform_range(-b, b)
            }
            InitScheme::TruncatedNormal => rng.truncated_normal(TRUNC_STD, 2.0 * TRUNC_STD),
        })
    })
}

pub fn truncated_normal<T: Element>(shape: &[usize], rng: &mut RngState) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| {
        T::from_f64_lossy(rng.truncated_normal(TRUNC_STD, 2.0 * TRUNC_STD))
    })
}

/// Fresh encoder parameters. Linear weights follow `scheme`; biases are zero;
/// CLS and position tables are truncated-normal; norms start at gain 1, bias 0.
pub fn init_weights<T: Element>(
    config: &ViTConfig,
    scheme: InitScheme,
    rng: &RngState,
) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut params = ParamStore::new();
    for (i, (name, shape)) in config.param_shapes().into_iter().enumerate() {
        let mut r = rng.fork(i as u64);
        let t = if name.ends_with(".gain") {
            Tensor::ones(shape)
        } else if name.ends_with(".bias") {
            Tensor::zeros(shape)
        } else if name == "cls_token" || name == "pos_embed" {
            truncated_normal(&shape, &mut r)
        } else {
            init_matrix(&shape, scheme, &mut r)
        };
        params.insert(name, t)?;
    }
    Ok(params)
}

/// Splits `[B, h, w, C]` images into `[B, n, p·p·C]` row-major patch tokens.
pub fn patchify<T: Element>(images: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || p == 0 || !s[1].is_multiple_of(p) || !s[2].is_multiple_of(p) {
        return Err(Error::shape("patchify", s, &[p]));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / p, w / p);
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..p {
                    let row = ((bi * h + py * p + y) * w + px * p) * c;
                    out.extend_from_slice(&src[row..row + p * c]);
                }
            }
        }
    }
    Tensor::new(vec![b, gh * gw, p * p * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Element>(tokens: &Tensor<T>, p: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = tokens.shape();
    if s.len() != 3 || p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) || s[1] != (h / p) * (w / p) || !s[2].is_multiple_of(p * p) {
        return Err(Error::shape("unpatchify", s, &[p, h, w]));
    }
    let (b, c) = (s[0], s[2] / (p * p));
    let gw = w / p;
    let mut out = vec![T::zero(); b * h * w * c];
    for (t, tok) in tokens.rows().enumerate() {
        let (bi, idx) = (t / s[1], t % s[1]);
        let (py, px) = (idx / gw, idx % gw);
        for y in 0..p {
            let dst = ((bi * h + py * p + y) * w + px * p) * c;
            out[dst..dst + p * c].copy_from_slice(&tok[y * p * c..(y + 1) * p * c]);
        }
    }
    Tensor::new(vec![b, h, w, c], out)
}

/// Align-corners bilinear sample positions and weights along one axis.
fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = if dst == 1 || src == 1 {
                0.0
            } else {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// `[dst_h·dst_w, src_h·src_w]` matrix performing align-corners bilinear
/// resampling of a row-major grid.
pub fn bilinear_matrix<T: Element>(src: [usize; 2], dst: [usize; 2]) -> Tensor<T> {
    let wy = axis_weights(src[0], dst[0]);
    let wx = axis_weights(src[1], dst[1]);
    let cols = src[0] * src[1];
    let mut m = vec![0.0f64; dst[0] * dst[1] * cols];
    for (i, &(y0, y1, fy)) in wy.iter().enumerate() {
        for (j, &(x0, x1, fx)) in wx.iter().enumerate() {
            let row = &mut m[(i * dst[1] + j) * cols..(i * dst[1] + j + 1) * cols];
            row[y0 * src[1] + x0] += (1.0 - fy) * (1.0 - fx);
            row[y0 * src[1] + x1] += (1.0 - fy) * fx;
            row[y1 * src[1] + x0] += fy * (1.0 - fx);
            row[y1 * src[1] + x1] += fy * fx;
        }
    }
    Tensor::from_fn(vec![dst[0] * dst[1], cols], |i| T::from_f64_lossy(m[i]))
}

/// Resamples a `[G_h, G_w, D]` position grid to `[g_h, g_w, D]`.
pub fn interpolate_pos_embed<T: Element>(grid: &Tensor<T>, target: [usize; 2]) -> Result<Tensor<T>> {
    let s = grid.shape();
    if s.len() != 3 || target.contains(&0) {
        return Err(Error::shape("interpolate_pos_embed", s, &target));
    }
    if [s[0], s[1]] == target {
        return Ok(grid.clone());
    }
    let d = s[2];
    let m = bilinear_matrix::<T>([s[0], s[1]], target);
    let cols = s[0] * s[1];
    let mut out = vec![T::zero(); target[0] * target[1] * d];
    T::gemm(target[0] * target[1], cols, d, T::one(), m.data(), cols as isize, 1, grid.data(), d as isize, 1, T::zero(), &mut out);
    Tensor::new(vec![target[0], target[1], d], out)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub want_attention: bool,
    pub training: bool,
}

/// Encoder outputs. `attention[i]` is `[B, heads, N, N]` for block `i`
/// (`N = n + 1`), present only when requested.
#[derive(Debug)]
pub struct EncoderOutput<T: Element = f32> {
    pub cls: Var,
    pub patches: Var,
    pub attention: Vec<Tensor<T>>,
}

/// Encoder forward on a batch of `[B, h, w, 3]` images (already normalized).
pub fn encode<T: Element>(
    tape: &mut Tape<T>,
    config: &ViTConfig,
    params: &BoundParams,
    images: &Tensor<T>,
    opts: ForwardOptions,
    rng: &mut RngState,
) -> Result<EncoderOutput<T>> {
    let s = images.shape();
    if s.len() != 4 || s[3] != CHANNELS || s[1] > config.image_size[0] || s[2] > config.image_size[1] {
        return Err(Error::shape("vit forward", s, &config.image_size));
    }
    let p = config.patch_size;
    let (b, d) = (s[0], config.dim);
    let tokens = tape.constant(patchify(images, p)?);
    let n = tape.shape(tokens)[1];
    let grid = [s[1] / p, s[2] / p];

    let x = tape.matmul(tokens, params.var("patch_embed.weight")?)?;
    let x = tape.add_broadcast(x, params.var("patch_embed.bias")?)?;
    let cls = tape.repeat_leading(params.var("cls_token")?, b)?;
    let x = tape.concat(&[cls, x], 1)?;
    let pos = position_table(tape, config, params.var("pos_embed")?, grid)?;
    let x = tape.add_broadcast(x, pos)?;
    let mut x = tape.dropout(x, config.dropout, opts.training, rng)?;

    let mut attention = Vec::new();
    for i in 0..config.depth {
        let (y, attn) = block(tape, config, params, x, i, opts, rng).map_err(|e| e.within(format!("block {i}")))?;
        x = y;
        if let Some(a) = attn {
            attention.push(a);
        }
    }
    let x = tape
        .layer_norm(x, params.var("norm.gain")?, params.var("norm.bias")?, LAYER_NORM_EPS)
        .map_err(|e| e.within("final norm"))?;
    let cls = tape.slice(x, 1, 0, 1)?;
    let cls = tape.reshape(cls, &[b, d])?;
    let patches = tape.slice(x, 1, 1, n)?;
    Ok(EncoderOutput {
        cls,
        patches,
        attention,
    })
}

/// Position table for a `grid`-sized view: the stored table when the view
/// has the configured size, otherwise the patch rows resampled to `grid`.
fn position_table<T: Element>(
    tape: &mut Tape<T>,
    config: &ViTConfig,
    pos: Var,
    grid: [usize; 2],
) -> Result<Var> {
    let full = config.grid();
    if grid == full {
        return Ok(pos);
    }
    let n_full = full[0] * full[1];
    let cls_row = tape.slice(pos, 0, 0, 1)?;
    let patch_rows = tape.slice(pos, 0, 1, n_full)?;
    let resample = tape.constant(bilinear_matrix(full, grid));
    let resampled = tape.matmul(resample, patch_rows)?;
    tape.concat(&[cls_row, resampled], 0)
}

fn block<T: Element>(
    tape: &mut Tape<T>,
    config: &ViTConfig,
    params: &BoundParams,
    x: Var,
    i: usize,
    opts: ForwardOptions,
    rng: &mut RngState,
) -> Result<(Var, Option<Tensor<T>>)> {
    let v = |s: &str| params.var(&format!("blocks.{i}.{s}"));
    let shape = tape.shape(x).to_vec();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let (h, hd) = (config.heads, config.head_dim());

    let y = tape.layer_norm(x, v("norm1.gain")?, v("norm1.bias")?, LAYER_NORM_EPS)?;
    let qkv = tape.matmul(y, v("attn.qkv.weight")?)?;
    let qkv = tape.add_broadcast(qkv, v("attn.qkv.bias")?)?;
    let qkv = tape.reshape(qkv, &[b, n, 3, h, hd])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let split = |tape: &mut Tape<T>, j: usize| -> Result<Var> {
        let t = tape.slice(qkv, 0, j, 1)?;
        tape.reshape(t, &[b * h, n, hd])
    };
    let q = split(tape, 0)?;
    let k = split(tape, 1)?;
    let val = split(tape, 2)?;
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, T::from_f64_lossy(1.0 / (hd as f64).sqrt()))?;
    let attn = tape.softmax(scores, T::one())?;
    let kept = opts
        .want_attention
        .then(|| tape.value(attn).clone().reshape(vec![b, h, n, n]))
        .transpose()?;
    let attn = tape.dropout(attn, config.attn_dropout, opts.training, rng)?;
    let ctx = tape.matmul(attn, val)?;
    let ctx = tape.reshape(ctx, &[b, h, n, hd])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, n, d])?;
    let out = tape.matmul(ctx, v("attn.proj.weight")?)?;
    let out = tape.add_broadcast(out, v("attn.proj.bias")?)?;
    let out = tape.dropout(out, config.dropout, opts.training, rng)?;
    let x = tape.add(x, out)?;

    let y = tape.layer_norm(x, v("norm2.gain")?, v("norm2.bias")?, LAYER_NORM_EPS)?;
    let y = tape.matmul(y, v("mlp.fc1.weight")?)?;
    let y = tape.add_broadcast(y, v("mlp.fc1.bias")?)?;
    let y = tape.gelu(y)?;
    let y = tape.dropout(y, config.dropout, opts.training, rng)?;
    let y = tape.matmul(y, v("mlp.fc2.weight")?)?;
    let y = tape.add_broadcast(y, v("mlp.fc2.bias")?)?;
    let y = tape.dropout(y, config.dropout, opts.training, rng)?;
    Ok((tape.add(x, y)?, kept))
}

/// Encoder configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel<T: Element = f32> {
    pub config: ViTConfig,
    pub params: ParamStore<T>,
}

impl<T: Element> ViTModel<T> {
    pub fn new(config: ViTConfig, scheme: InitScheme, rng: &RngState) -> Result<Self> {
        let params = init_weights(&config, scheme, rng)?;
        Ok(ViTModel { config, params })
    }

    pub fn from_params(config: ViTConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.param_shapes() {
            let t = params.require(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(ViTModel { config, params })
    }

    /// Eval-mode forward returning plain tensors: CLS features `[B, D]` and
    /// per-block attention when requested.
    pub fn features(&self, images: &Tensor<T>, want_attention: bool) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let bound = self.params.register(&mut tape, false);
        let mut rng = RngState::new(0);
        let out = encode(
            &mut tape,
            &self.config,
            &bound,
            images,
            ForwardOptions {
                want_attention,
                training: false,
            },
            &mut rng,
        )?;
        Ok((tape.value(out.cls).clone(), out.attention))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: [8, 8],
            patch_size: 4,
            depth: 1,
            dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            dropout: 0.0,
            attn_dropout: 0.0,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ViTConfig::default().validate().is_ok());
        let bad = ViTConfig {
            image_size: [30, 32],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ViTConfig {
            heads: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ViTConfig {
            depth: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(ViTConfig::for_image_size(64).patch_size, 8);
        assert_eq!(ViTConfig::for_image_size(32).patch_size, 4);
    }

    #[test]
    fn token_counts() {
        let img = |s: usize| Tensor::<f32>::zeros(vec![1, s, s, 3]);
        assert_eq!(patchify(&img(32), 4).unwrap().shape(), &[1, 64, 48]);
        assert_eq!(patchify(&img(64), 8).unwrap().shape(), &[1, 64, 192]);
        assert_eq!(patchify(&img(16), 4).unwrap().shape(), &[1, 16, 48]);
        assert!(patchify(&img(30), 4).is_err());
    }

    #[test]
    fn patchify_round_trip() {
        let x = Tensor::<f32>::from_fn(vec![2, 8, 12, 3], |i| i as f32);
        let t = patchify(&x, 4).unwrap();
        // first patch, second row starts at pixel (1, 0)
        assert_eq!(t.get(&[0, 0, 12]), x.get(&[0, 1, 0, 0]));
        assert_eq!(unpatchify(&t, 4, 8, 12).unwrap(), x);
    }

    #[test]
    fn dpe_identity_and_constant() {
        let grid = Tensor::<f64>::from_fn(vec![4, 4, 3], |i| (i as f64).sin());
        assert_eq!(interpolate_pos_embed(&grid, [4, 4]).unwrap(), grid);
        let c = Tensor::<f64>::full(vec![2, 2, 5], 0.37);
        for g in 1..6 {
            let out = interpolate_pos_embed(&c, [g, g]).unwrap();
            assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-12));
        }
    }

    #[test]
    fn dpe_linear_ramp_matches_closed_form() {
        // value(y, x, c) = 1 + 2y + 3x + c; align-corners sampling of 4 -> 2
        // hits source coordinates {0, 3} exactly.
        let grid = Tensor::<f64>::from_fn(vec![4, 4, 2], |i| {
            let (y, x, c) = (i / 8, (i / 2) % 4, i % 2);
            1.0 + 2.0 * y as f64 + 3.0 * x as f64 + c as f64
        });
        let out = interpolate_pos_embed(&grid, [2, 2]).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..2 {
                    let expect = 1.0 + 2.0 * (3 * y) as f64 + 3.0 * (3 * x) as f64 + c as f64;
                    assert!((out.get(&[y, x, c]) - expect).abs() < 1e-12);
                }
            }
        }
        // 4 -> 3 samples at 0, 1.5, 3: a linear ramp is reproduced exactly
        let out = interpolate_pos_embed(&grid, [3, 3]).unwrap();
        let expect = 1.0 + 2.0 * 1.5 + 3.0 * 1.5;
        assert!((out.get(&[1, 1, 0]) - expect).abs() < 1e-12);
    }

    #[test]
    fn init_schemes() {
        let cfg = ViTConfig::default();
        let rng = RngState::new(11);
        let p: ParamStore<f32> = init_weights(&cfg, InitScheme::TruncatedNormal, &rng).unwrap();
        for (name, t) in p.iter() {
            if !name.ends_with(".gain") {
                assert!(t.data().iter().all(|v| v.abs() <= 0.04), "{name}");
            }
        }
        let q: ParamStore<f32> = init_weights(&cfg, InitScheme::TruncatedNormal, &rng).unwrap();
        assert_eq!(p, q);
        assert!((xavier_bound(192, 192) - 0.125).abs() < 1e-12);
        let x: ParamStore<f32> = init_weights(&cfg, InitScheme::Xavier, &rng).unwrap();
        let w = x.get("blocks.0.attn.proj.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() as f64 <= 0.125));
        let u: ParamStore<f32> = init_weights(&cfg, InitScheme::Uniform, &rng).unwrap();
        let w = u.get("blocks.0.mlp.fc1.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.05));
        assert!("gradinit".parse::<InitScheme>().is_err());
    }

    #[test]
    fn default_parameter_count() {
        let n = ViTConfig::default().num_params() as f64;
        assert!((n / 2.8e6 - 1.0).abs() <= 0.05, "{n}");
    }

    #[test]
    fn forward_token_law_and_attention_rows() {
        let cfg = tiny();
        let model = ViTModel::<f64>::new(cfg.clone(), InitScheme::TruncatedNormal, &RngState::new(2)).unwrap();
        for size in [4, 8] {
            let img = Tensor::from_fn(vec![3, size, size, 3], |i| ((i * 7) % 11) as f64 / 11.0);
            let mut tape = Tape::new();
            let bound = model.params.register(&mut tape, false);
            let out = encode(&mut tape, &cfg, &bound, &img, ForwardOptions { want_attention: true, training: false }, &mut RngState::new(0)).unwrap();
            let n = (size / 4) * (size / 4);
            assert_eq!(tape.shape(out.patches), &[3, n, 8]);
            assert_eq!(tape.shape(out.cls), &[3, 8]);
            assert_eq!(out.attention[0].shape(), &[3, 2, n + 1, n + 1]);
            for row in out.attention[0].rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn residual_identity_with_zero_branches() {
        let cfg = tiny();
        let mut model = ViTModel::<f64>::new(cfg.clone(), InitScheme::TruncatedNormal, &RngState::new(5)).unwrap();
        for (t, (name, _)) in model.params.tensors_mut().iter_mut().zip(cfg.param_shapes()) {
            if name.starts_with("blocks.") && (name.contains("proj") || name.contains("fc2")) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let img = Tensor::from_fn(vec![1, 8, 8, 3], |i| (i as f64 * 0.1).cos());
        let (cls, _) = model.features(&img, false).unwrap();
        // expected: layer_norm(cls_token + pos_embed[0])
        let c = model.params.get("cls_token").unwrap().data();
        let p = model.params.get("pos_embed").unwrap().data();
        let v: Vec<f64> = c.iter().zip(p).map(|(a, b)| a + b).collect();
        let mean = v.iter().sum::<f64>() / 8.0;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
        for (o, x) in cls.data().iter().zip(&v) {
            assert!((o - (x - mean) / (var + LAYER_NORM_EPS).sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn batch_order_is_respected() {
        let cfg = tiny();
        let model = ViTModel::<f64>::new(cfg, InitScheme::TruncatedNormal, &RngState::new(8)).unwrap();
        let img = Tensor::from_fn(vec![3, 8, 8, 3], |i| ((i * 13) % 17) as f64 / 17.0);
        let (a, _) = model.features(&img, false).unwrap();
        let mut swapped = img.data().to_vec();
        let per = 8 * 8 * 3;
        let (first, rest) = swapped.split_at_mut(per);
        first.swap_with_slice(&mut rest[per..2 * per]);
        let swapped = Tensor::new(vec![3, 8, 8, 3], swapped).unwrap();
        let (b, _) = model.features(&swapped, false).unwrap();
        for (i, j) in [(0, 2), (1, 1), (2, 0)] {
            for k in 0..8 {
                assert!((a.get(&[i, k]) - b.get(&[j, k])).abs() < 1e-12);
            }
        }
    }
}
