//! Supervised fine-tuning: transplant a pre-trained backbone, attach a fresh
//! linear classifier, and minimize soft-target cross-entropy under label
//! smoothing, mixup / cutmix and random erasing.

use std::path::Path;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Sample};
use crate::distill::{PretrainSnapshot, HEAD_PREFIX, STUDENT_PREFIX, TEACHER_PREFIX};
use crate::error::{Error, Result};
use crate::eval;
use crate::image::Image;
use crate::optim::{adam_step, OptimizerState};
use crate::params::{BoundParams, ParamStore};
use crate::rng::RngState;
use crate::schedule::Schedule;
use crate::tensor::{Element, Tensor};
use crate::views::CropBox;
use crate::vit::{self, ForwardOptions, InitScheme, ViTConfig};
use crate::Tape;

pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";
pub const MODEL_PREFIX: &str = "model.";

/// Which pre-trained network a backbone is taken from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneSource {
    #[default]
    Teacher,
    Student,
}

impl BackboneSource {
    fn prefix(self) -> &'static str {
        match self {
            BackboneSource::Teacher => TEACHER_PREFIX,
            BackboneSource::Student => STUDENT_PREFIX,
        }
    }
}

/// Where the backbone weights come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitSource {
    #[serde(rename = "self-supervised-teacher")]
    Teacher,
    #[serde(rename = "self-supervised-student")]
    Student,
    Uniform,
    Xavier,
    TruncatedNormal,
}

impl InitSource {
    pub fn pretrained(self) -> Option<BackboneSource> {
        match self {
            InitSource::Teacher => Some(BackboneSource::Teacher),
            InitSource::Student => Some(BackboneSource::Student),
            _ => None,
        }
    }

    pub fn scheme(self) -> Option<InitScheme> {
        match self {
            InitSource::Uniform => Some(InitScheme::Uniform),
            InitSource::Xavier => Some(InitScheme::Xavier),
            InitSource::TruncatedNormal => Some(InitScheme::TruncatedNormal),
            _ => None,
        }
    }
}

impl FromStr for InitSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self-supervised-teacher" | "self-supervised" | "teacher" => Ok(InitSource::Teacher),
            "self-supervised-student" | "student" => Ok(InitSource::Student),
            other => other.parse::<InitScheme>().map(|s| match s {
                InitScheme::Uniform => InitSource::Uniform,
                InitScheme::Xavier => InitSource::Xavier,
                InitScheme::TruncatedNormal => InitSource::TruncatedNormal,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine floor; the schedule ends here instead of at zero.
    pub min_lr: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub mixup_alpha: f64,
    pub cutmix_alpha: f64,
    /// Probability that a batch is mixed; mixup and cutmix are then equally likely.
    pub mix_prob: f64,
    pub erase_p: f64,
    /// Zero-pad by 4, random crop back, random horizontal flip.
    pub pad_crop_flip: bool,
    pub init: InitSource,
    /// Also report eval-mode accuracy on the training split each epoch.
    pub eval_train: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 100,
            batch_size: 256,
            lr: 0.002,
            min_lr: 1e-6,
            weight_decay: 0.05,
            label_smoothing: 0.1,
            mixup_alpha: 0.8,
            cutmix_alpha: 1.0,
            mix_prob: 0.5,
            erase_p: 0.25,
            pad_crop_flip: true,
            init: InitSource::Teacher,
            eval_train: false,
        }
    }
}

impl FinetuneConfig {
    /// Plain cross-entropy minimization: no smoothing, mixing, erasing or
    /// geometric augmentation.
    pub fn without_augmentation(mut self) -> Self {
        self.label_smoothing = 0.0;
        self.mix_prob = 0.0;
        self.erase_p = 0.0;
        self.pad_crop_flip = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::param("label_smoothing must lie in [0, 1)"));
        }
        if !(self.mixup_alpha > 0.0) || !(self.cutmix_alpha > 0.0) {
            return Err(Error::param("mixup_alpha and cutmix_alpha must be positive"));
        }
        for (name, p) in [("mix_prob", self.mix_prob), ("erase_p", self.erase_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::param(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.lr > 0.0) || !(self.min_lr > 0.0) || self.min_lr > self.lr {
            return Err(Error::param("need 0 < min_lr <= lr"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be >= 1"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::param("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// Fresh linear classifier `[dim, classes]`: truncated-normal weights, zero bias.
pub fn init_classifier<T: Element>(dim: usize, classes: usize, rng: &RngState) -> ParamStore<T> {
    let mut p = ParamStore::new();
    p.insert(CLASSIFIER_WEIGHT, vit::truncated_normal(&[dim, classes], &mut rng.fork(0)))
        .expect("fresh store");
    p.insert(CLASSIFIER_BIAS, Tensor::zeros(vec![classes])).expect("fresh store");
    p
}

/// Encoder weights from a pre-training checkpoint. The projection head is
/// dropped; every encoder tensor must be present with the expected shape.
pub fn load_backbone<T: Element>(ckpt: &Checkpoint, source: BackboneSource, config: &ViTConfig) -> Result<ParamStore<T>> {
    if let Ok(snap) = serde_json::from_str::<PretrainSnapshot>(&ckpt.config) {
        // Head count does not show up in any tensor shape.
        if snap.vit.heads != config.heads {
            return Err(Error::Checkpoint(format!(
                "checkpoint encoder has {} heads, expected {}",
                snap.vit.heads, config.heads
            )));
        }
    }
    let mut out = ParamStore::new();
    for (name, shape) in config.param_shapes() {
        let full = format!("{}{name}", source.prefix());
        let entry = ckpt
            .entry(&full)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{full}`")))?;
        if entry.dims != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{full}` has shape {:?}, expected {shape:?}",
                entry.dims
            )));
        }
        out.insert(name, ckpt.tensor(&full)?)?;
    }
    debug_assert!(out.names().iter().all(|n| !n.starts_with(HEAD_PREFIX)));
    Ok(out)
}

/// Encoder + classifier.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub vit: ViTConfig,
    pub params: ParamStore<f32>,
    pub classes: usize,
}

impl Classifier {
    pub fn new(vit: ViTConfig, backbone: ParamStore<f32>, classes: usize, rng: &RngState) -> Result<Self> {
        vit::ViTModel::from_params(vit.clone(), backbone.clone())?;
        let mut params = backbone;
        for (name, t) in init_classifier::<f32>(vit.dim, classes, rng).iter() {
            params.insert(name, t.clone())?;
        }
        Ok(Classifier { vit, params, classes })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, vit: ViTConfig) -> Result<Self> {
        let params: ParamStore<f32> = ckpt.params(MODEL_PREFIX)?;
        vit::ViTModel::from_params(vit.clone(), params.clone())?;
        let classes = params.require(CLASSIFIER_BIAS)?.numel();
        Ok(Classifier { vit, params, classes })
    }

    pub fn backbone(&self) -> vit::ViTModel<f32> {
        vit::ViTModel {
            config: self.vit.clone(),
            params: self.params.without(&[CLASSIFIER_WEIGHT, CLASSIFIER_BIAS]),
        }
    }

    /// Eval-mode logits `[N, classes]`, computed in batches.
    pub fn logits(&self, images: &[&Image], mean: [f32; 3], std: [f32; 3], batch: usize) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(images.len() * self.classes);
        for chunk in images.chunks(batch.max(1)) {
            let x = Image::batch::<f32>(chunk, mean, std)?;
            let mut tape = Tape::new();
            let bound = self.params.register(&mut tape, false);
            let mut rng = RngState::new(0);
            let l = classifier_logits(&mut tape, &self.vit, &bound, &x, false, &mut rng)?;
            data.extend_from_slice(tape.value(l).data());
        }
        Tensor::new(vec![images.len(), self.classes], data)
    }

    pub fn accuracy(&self, samples: &[Sample], mean: [f32; 3], std: [f32; 3], batch: usize) -> Result<f64> {
        let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        if images.is_empty() {
            return Err(Error::validation("accuracy on an empty set"));
        }
        let logits = self.logits(&images, mean, std, batch)?;
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        eval::top1(&logits, &labels)
    }

    pub fn to_checkpoint(&self, stage: &str, epoch: u64, seed: u64, config: &str) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(stage, epoch, seed, config.to_string());
        c.push_params(MODEL_PREFIX, &self.params)?;
        Ok(c)
    }
}

pub fn classifier_logits<T: Element>(
    tape: &mut Tape<T>,
    vit_cfg: &ViTConfig,
    params: &BoundParams,
    images: &Tensor<T>,
    training: bool,
    rng: &mut RngState,
) -> Result<crate::Var> {
    let enc = vit::encode(
        tape,
        vit_cfg,
        params,
        images,
        ForwardOptions {
            want_attention: false,
            training,
        },
        rng,
    )?;
    let h = tape.matmul(enc.cls, params.var(CLASSIFIER_WEIGHT)?)?;
    tape.add_broadcast(h, params.var(CLASSIFIER_BIAS)?)
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; classes];
    y[label] = 1.0;
    y
}

/// `(1 − ε)·y + ε/k`.
pub fn label_smooth(y: &[f64], eps: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::param(format!("label smoothing {eps} outside [0, 1)")));
    }
    let k = y.len() as f64;
    Ok(y.iter().map(|&v| (1.0 - eps) * v + eps / k).collect())
}

fn blend(a: &[f64], b: &[f64], lam: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| lam * x + (1.0 - lam) * y).collect()
}

/// Pixel and label blend with a given weight `lam` on the first sample.
pub fn mixup_with(x1: &Image, y1: &[f64], x2: &Image, y2: &[f64], lam: f64) -> (Image, Vec<f64>) {
    let l = lam as f32;
    let data = x1.data.iter().zip(&x2.data).map(|(&a, &b)| l * a + (1.0 - l) * b).collect();
    let img = Image {
        height: x1.height,
        width: x1.width,
        data,
    };
    (img, blend(y1, y2, lam))
}

pub fn mixup(x1: &Image, y1: &[f64], x2: &Image, y2: &[f64], alpha: f64, rng: &mut RngState) -> (Image, Vec<f64>) {
    let lam = rng.beta(alpha);
    mixup_with(x1, y1, x2, y2, lam)
}

/// Box with area ratio `1 − lam`, centered uniformly, clipped to the image.
pub fn cutmix_box(h: usize, w: usize, lam: f64, rng: &mut RngState) -> CropBox {
    let r = (1.0 - lam).max(0.0).sqrt();
    let (ch, cw) = ((h as f64 * r).round() as isize, (w as f64 * r).round() as isize);
    let cy = rng.below(h) as isize;
    let cx = rng.below(w) as isize;
    let y0 = (cy - ch / 2).clamp(0, h as isize);
    let y1 = (cy + ch - ch / 2).clamp(0, h as isize);
    let x0 = (cx - cw / 2).clamp(0, w as isize);
    let x1 = (cx + cw - cw / 2).clamp(0, w as isize);
    CropBox {
        top: y0 as usize,
        left: x0 as usize,
        height: (y1 - y0) as usize,
        width: (x1 - x0) as usize,
    }
}

/// Pastes `x2` into `b` over `x1`; the label weight is `1 − box pixels / total`.
pub fn cutmix_with_box(x1: &Image, y1: &[f64], x2: &Image, y2: &[f64], b: CropBox) -> (Image, Vec<f64>) {
    let mut out = x1.clone();
    for y in b.top..b.top + b.height {
        for x in b.left..b.left + b.width {
            for c in 0..3 {
                out.set(y, x, c, x2.at(y, x, c));
            }
        }
    }
    let lam = 1.0 - (b.height * b.width) as f64 / (x1.height * x1.width) as f64;
    (out, blend(y1, y2, lam))
}

pub fn cutmix(x1: &Image, y1: &[f64], x2: &Image, y2: &[f64], alpha: f64, rng: &mut RngState) -> (Image, Vec<f64>) {
    let lam = rng.beta(alpha);
    let b = cutmix_box(x1.height, x1.width, lam, rng);
    cutmix_with_box(x1, y1, x2, y2, b)
}

pub const ERASE_AREA: [f64; 2] = [0.02, 0.33];
const ERASE_RATIO: [f64; 2] = [0.3, 1.0 / 0.3];

/// With probability `p`, fills a random box covering 2–33 % of the image with
/// uniform noise. Returns the erased box.
pub fn random_erase(x: &mut Image, p: f64, rng: &mut RngState) -> Option<CropBox> {
    if !rng.bernoulli(p) {
        return None;
    }
    let (h, w) = (x.height, x.width);
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * rng.uniform_range(ERASE_AREA[0], ERASE_AREA[1]);
        let ratio = rng.uniform_range(ERASE_RATIO[0].ln(), ERASE_RATIO[1].ln()).exp();
        let eh = (target * ratio).sqrt().round() as usize;
        let ew = (target / ratio).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh > h || ew > w {
            continue;
        }
        let frac = (eh * ew) as f64 / area;
        if !(ERASE_AREA[0]..=ERASE_AREA[1]).contains(&frac) {
            continue;
        }
        let top = rng.below(h - eh + 1);
        let left = rng.below(w - ew + 1);
        for y in top..top + eh {
            for xx in left..left + ew {
                for c in 0..3 {
                    x.set(y, xx, c, rng.uniform() as f32);
                }
            }
        }
        return Some(CropBox {
            top,
            left,
            height: eh,
            width: ew,
        });
    }
    None
}

pub const PAD: usize = 4;

/// Zero-pads by `PAD`, crops back to the original size at a random offset,
/// then flips horizontally with probability 0.5.
pub fn pad_crop_flip(x: &Image, rng: &mut RngState) -> Image {
    let (h, w) = (x.height, x.width);
    let dy = rng.below(2 * PAD + 1) as isize - PAD as isize;
    let dx = rng.below(2 * PAD + 1) as isize - PAD as isize;
    let mut out = Image::filled(h, w, [0.0; 3]);
    for y in 0..h as isize {
        let sy = y + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for xx in 0..w as isize {
            let sx = xx + dx;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            for c in 0..3 {
                out.set(y as usize, xx as usize, c, x.at(sy as usize, sx as usize, c));
            }
        }
    }
    if rng.bernoulli(0.5) {
        out.flip_horizontal();
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixKind {
    None,
    Mixup,
    Cutmix,
}

/// Augmented images and soft targets for one batch.
pub fn prepare_batch(
    samples: &[&Sample],
    classes: usize,
    cfg: &FinetuneConfig,
    rng: &mut RngState,
) -> Result<(Vec<Image>, Vec<Vec<f64>>, MixKind)> {
    let mut images = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        let mut img = if cfg.pad_crop_flip { pad_crop_flip(&s.image, rng) } else { s.image.clone() };
        random_erase(&mut img, cfg.erase_p, rng);
        images.push(img);
        targets.push(label_smooth(&one_hot(s.label, classes), cfg.label_smoothing)?);
    }
    let kind = if rng.bernoulli(cfg.mix_prob) {
        if rng.bernoulli(0.5) {
            MixKind::Mixup
        } else {
            MixKind::Cutmix
        }
    } else {
        MixKind::None
    };
    if kind == MixKind::None || images.len() < 2 {
        return Ok((images, targets, MixKind::None));
    }
    // One mixing weight per batch; sample i is paired with its mirror B−1−i.
    let n = images.len();
    let (h, w) = (images[0].height, images[0].width);
    let lam = rng.beta(if kind == MixKind::Mixup { cfg.mixup_alpha } else { cfg.cutmix_alpha });
    let bx = cutmix_box(h, w, lam, rng);
    let mut mixed = Vec::with_capacity(n);
    let mut mixed_t = Vec::with_capacity(n);
    for i in 0..n {
        let j = n - 1 - i;
        let (img, t) = match kind {
            MixKind::Mixup => mixup_with(&images[i], &targets[i], &images[j], &targets[j], lam),
            _ => cutmix_with_box(&images[i], &targets[i], &images[j], &targets[j], bx),
        };
        mixed.push(img);
        mixed_t.push(t);
    }
    Ok((mixed, mixed_t, kind))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneEpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_top1: f64,
    pub lr: f64,
    pub train_top1: Option<f64>,
}

pub struct FinetuneResult {
    pub model: Classifier,
    pub metrics: Vec<FinetuneEpochMetrics>,
    pub initial_top1: f64,
    pub final_top1: f64,
    pub best_top1: f64,
}

const EPOCH_TAG: u64 = 0xE90C;
const AUG_TAG: u64 = 0xA116;
const INIT_TAG: u64 = 0x1417;
const HEAD_TAG: u64 = 0xC1A5;

/// Backbone for `cfg.init`: from `pretrained` for the self-supervised sources,
/// otherwise freshly drawn with the named scheme.
pub fn initial_backbone(
    vit_cfg: &ViTConfig,
    cfg: &FinetuneConfig,
    pretrained: Option<&Checkpoint>,
    seed: u64,
) -> Result<ParamStore<f32>> {
    match (cfg.init.pretrained(), cfg.init.scheme()) {
        (Some(source), _) => {
            let ckpt = pretrained
                .ok_or_else(|| Error::param("self-supervised initialization needs a pre-training checkpoint"))?;
            load_backbone(ckpt, source, vit_cfg)
        }
        (None, Some(scheme)) => vit::init_weights(vit_cfg, scheme, &RngState::new(seed).fork(INIT_TAG)),
        (None, None) => unreachable!("every source is pretrained or a scheme"),
    }
}

/// Fine-tunes on `dataset.train`, evaluating top-1 on `dataset.test` after
/// every epoch. Writes `finetune_metrics.csv`, `finetune_best.svtc` and
/// `finetune.svtc` when `out_dir` is given.
pub fn finetune(
    dataset: &Dataset,
    pretrained: Option<&Checkpoint>,
    vit_cfg: &ViTConfig,
    cfg: &FinetuneConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    vit_cfg.validate()?;
    if dataset.spec.image_size != vit_cfg.image_size {
        return Err(Error::param(format!(
            "dataset images {:?} do not match encoder input {:?}",
            dataset.spec.image_size, vit_cfg.image_size
        )));
    }
    let (mean, std, k) = (dataset.spec.mean, dataset.spec.std, dataset.spec.classes);
    let root = RngState::new(seed);
    let backbone = initial_backbone(vit_cfg, cfg, pretrained, seed)?;
    let mut model = Classifier::new(vit_cfg.clone(), backbone, k, &root.fork(HEAD_TAG))?;
    let snapshot = serde_json::json!({ "vit": vit_cfg, "finetune": cfg, "classes": k }).to_string();

    let train = &dataset.train;
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size).max(1);
    let total = (cfg.epochs * steps_per_epoch) as u64;
    let schedule = Schedule::cosine(cfg.lr, cfg.min_lr, total);
    let mut opt = OptimizerState::new(&model.params, cfg.lr, cfg.weight_decay);
    let mut writer = match out_dir {
        Some(dir) => Some(crate::metrics::CsvLog::create(&dir.join("finetune_metrics.csv"))?),
        None => None,
    };
    let initial_top1 = model.accuracy(&dataset.test, mean, std, cfg.batch_size)?;
    let mut best = (initial_top1, model.params.clone(), 0usize);
    let mut final_top1 = initial_top1;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        let order = root.fork_path(&[EPOCH_TAG, epoch as u64]).permutation(train.len());
        let mut aug = root.fork_path(&[AUG_TAG, epoch as u64]);
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (images, targets, _) = prepare_batch(&batch, k, cfg, &mut aug)?;
            let refs: Vec<&Image> = images.iter().collect();
            let x = Image::batch::<f32>(&refs, mean, std)?;
            let y = Tensor::new(
                vec![batch.len(), k],
                targets.iter().flatten().map(|&v| v as f32).collect(),
            )?;
            let mut tape = Tape::new();
            let bound = model.params.register(&mut tape, true);
            let logits = classifier_logits(&mut tape, vit_cfg, &bound, &x, true, &mut aug)?;
            let loss = tape.cross_entropy(logits, &y)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("fine-tune loss at epoch {epoch}, step {step}")));
            }
            let mut grads = tape.backward(loss)?;
            let grads = bound.collect_grads(&mut grads, &model.params);
            step += 1;
            lr = schedule.value(step)?;
            adam_step(&mut model.params, &grads, &mut opt, lr, cfg.weight_decay)
                .map_err(|e| e.within(format!("epoch {epoch}, step {step}")))?;
            loss_sum += value * batch.len() as f64;
        }
        let test_top1 = model.accuracy(&dataset.test, mean, std, cfg.batch_size)?;
        let train_top1 = if cfg.eval_train {
            Some(model.accuracy(train, mean, std, cfg.batch_size)?)
        } else {
            None
        };
        let m = FinetuneEpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            test_top1,
            lr,
            train_top1,
        };
        info!(
            "finetune epoch {epoch}: loss {:.4} test top-1 {:.4} lr {:.2e}",
            m.train_loss, m.test_top1, m.lr
        );
        if let Some(w) = writer.as_mut() {
            w.write(&m)?;
        }
        if test_top1 > best.0 {
            best = (test_top1, model.params.clone(), epoch + 1);
        }
        final_top1 = test_top1;
        metrics.push(m);
    }
    if let Some(dir) = out_dir {
        let best_model = Classifier {
            params: best.1.clone(),
            ..model.clone()
        };
        best_model
            .to_checkpoint("finetune-best", best.2 as u64, seed, &snapshot)?
            .save(&dir.join("finetune_best.svtc"))?;
        model
            .to_checkpoint("finetune", cfg.epochs as u64, seed, &snapshot)?
            .save(&dir.join("finetune.svtc"))?;
    }
    Ok(FinetuneResult {
        model,
        metrics,
        initial_top1,
        final_top1,
        best_top1: best.0,
    })
}
