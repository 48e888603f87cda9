//! Self-supervised view-prediction pre-training by self-distillation.
//!
//! A student network (encoder + projection head) is trained to predict, from
//! every view of an image, the centered and sharpened output distribution
//! the teacher network produces on the global views. The teacher is an
//! exponential moving average of the student and never receives gradients.

use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::optim::{adam_step, OptimizerState};
use crate::params::{BoundParams, ParamStore};
use crate::rng::RngState;
use crate::schedule::{scaled_lr, Schedule};
use crate::tensor::{Element, Tensor};
use crate::views::{generate_views, ViewConfig};
use crate::vit::{self, ForwardOptions, InitScheme, ViTConfig};

pub const STUDENT_PREFIX: &str = "student.";
pub const TEACHER_PREFIX: &str = "teacher.";
pub const HEAD_PREFIX: &str = "head.";
pub const CENTER_ENTRY: &str = "state.center";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub out_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 1024,
            bottleneck: 256,
            out_dim: 1024,
        }
    }
}

impl HeadConfig {
    pub fn param_shapes(&self, dim: usize) -> Vec<(String, Vec<usize>)> {
        let (h, b, k) = (self.hidden, self.bottleneck, self.out_dim);
        [
            ("l1.weight", vec![dim, h]),
            ("l1.bias", vec![h]),
            ("l2.weight", vec![h, h]),
            ("l2.bias", vec![h]),
            ("l3.weight", vec![h, b]),
            ("l3.bias", vec![b]),
            ("last.weight", vec![b, k]),
        ]
        .into_iter()
        .map(|(n, s)| (format!("{HEAD_PREFIX}{n}"), s))
        .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    /// Peak learning rate is `base_lr · batch_size / 256`.
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub student_temp: f64,
    pub teacher_temp_start: f64,
    pub teacher_temp_end: f64,
    pub teacher_temp_warmup_epochs: usize,
    pub momentum_start: f64,
    pub center_momentum: f64,
    /// Average over every (teacher global, other student view) pair; when
    /// false, the single-teacher-view sum is used.
    pub symmetric: bool,
    pub clip_grad: Option<f64>,
    pub init: InitScheme,
    pub head: HeadConfig,
    pub checkpoint_every: Option<usize>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            epochs: 200,
            batch_size: 256,
            warmup_epochs: 10,
            base_lr: 0.0005,
            min_lr: 1e-6,
            weight_decay: 0.04,
            student_temp: 0.1,
            teacher_temp_start: 0.04,
            teacher_temp_end: 0.07,
            teacher_temp_warmup_epochs: 30,
            momentum_start: 0.996,
            center_momentum: 0.9,
            symmetric: true,
            clip_grad: None,
            init: InitScheme::TruncatedNormal,
            head: HeadConfig::default(),
            checkpoint_every: None,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("student_temp", self.student_temp),
            ("teacher_temp_start", self.teacher_temp_start),
            ("teacher_temp_end", self.teacher_temp_end),
            ("base_lr", self.base_lr),
            ("min_lr", self.min_lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::param(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be >= 1"));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::param(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(0.0..=1.0).contains(&self.momentum_start) {
            return Err(Error::param("momentum_start must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return Err(Error::param("center_momentum must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::param("weight_decay must be non-negative"));
        }
        if self.head.hidden == 0 || self.head.bottleneck == 0 || self.head.out_dim == 0 {
            return Err(Error::param("projection head sizes must be positive"));
        }
        Ok(())
    }

    pub fn peak_lr(&self) -> f64 {
        scaled_lr(self.base_lr, self.batch_size)
    }

    pub fn lr_schedule(&self, steps_per_epoch: usize) -> Schedule {
        let total = (self.epochs * steps_per_epoch) as u64;
        Schedule::warmup_cosine(0.0, self.peak_lr(), self.min_lr, (self.warmup_epochs * steps_per_epoch) as u64, total)
    }

    /// EMA momentum λ per step: half-cosine from `momentum_start` up to 1.
    pub fn momentum_schedule(&self, steps_per_epoch: usize) -> Schedule {
        Schedule::cosine(self.momentum_start, 1.0, (self.epochs * steps_per_epoch) as u64)
    }

    /// Teacher temperature per epoch: linear warm-up, then constant.
    pub fn teacher_temp_schedule(&self) -> Schedule {
        let total = self.epochs as u64;
        Schedule::linear_warmup(
            self.teacher_temp_start,
            self.teacher_temp_end,
            (self.teacher_temp_warmup_epochs as u64).min(total),
            total,
        )
    }
}

/// Fresh projection head: truncated-normal weights, zero biases.
pub fn init_head<T: Element>(head: &HeadConfig, dim: usize, rng: &RngState) -> Result<ParamStore<T>> {
    let mut params = ParamStore::new();
    for (i, (name, shape)) in head.param_shapes(dim).into_iter().enumerate() {
        let t = if name.ends_with(".bias") {
            Tensor::zeros(shape)
        } else {
            vit::truncated_normal(&shape, &mut rng.fork(1_000 + i as u64))
        };
        params.insert(name, t)?;
    }
    Ok(params)
}

/// Encoder plus projection head parameters in one store.
pub fn init_network<T: Element>(vit_cfg: &ViTConfig, cfg: &DistillConfig, rng: &RngState) -> Result<ParamStore<T>> {
    let mut params = vit::init_weights(vit_cfg, cfg.init, &rng.fork(0))?;
    let head = init_head(&cfg.head, vit_cfg.dim, &rng.fork(1))?;
    for (name, t) in head.iter() {
        params.insert(name, t.clone())?;
    }
    Ok(params)
}

/// `features [B, D] → [B, K]`: three linear layers with GELU between, unit
/// normalization of the bottleneck, final linear map without bias.
pub fn head_forward<T: Element>(tape: &mut Tape<T>, params: &BoundParams, features: Var) -> Result<Var> {
    let v = |n: &str| params.var(&format!("{HEAD_PREFIX}{n}"));
    let mut x = features;
    for layer in ["l1", "l2", "l3"] {
        x = tape.matmul(x, v(&format!("{layer}.weight"))?)?;
        x = tape.add_broadcast(x, v(&format!("{layer}.bias"))?)?;
        if layer != "l3" {
            x = tape.gelu(x)?;
        }
    }
    let x = tape.l2_normalize(x)?;
    tape.matmul(x, v("last.weight")?)
}

/// Encoder + head on a batch of normalized images.
pub fn network_logits<T: Element>(
    tape: &mut Tape<T>,
    vit_cfg: &ViTConfig,
    params: &BoundParams,
    images: &Tensor<T>,
    training: bool,
    rng: &mut RngState,
) -> Result<Var> {
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
    head_forward(tape, params, enc.cls)
}

/// `softmax((logits − center) / τ_t)` row-wise; returned as a plain tensor so
/// it can only enter the loss as a constant target.
pub fn teacher_distribution<T: Element>(logits: &Tensor<T>, center: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    let k = logits.last_dim();
    if center.numel() != k {
        return Err(Error::shape("teacher_distribution", logits.shape(), center.shape()));
    }
    let c = center.data();
    let mut shifted = logits.clone();
    for row in shifted.data_mut().chunks_exact_mut(k) {
        for (x, &ci) in row.iter_mut().zip(c) {
            *x = *x - ci;
        }
    }
    autodiff::softmax(&shifted, temperature)
}

/// `log_softmax(logits / τ_s)` on the tape.
pub fn student_log_distribution<T: Element>(tape: &mut Tape<T>, logits: Var, temperature: T) -> Result<Var> {
    tape.log_softmax(logits, temperature)
}

/// Mean over rows of `−Σ t · log s`.
fn pair_term<T: Element>(tape: &mut Tape<T>, teacher: &Tensor<T>, student_log: Var) -> Result<Var> {
    if tape.shape(student_log) != teacher.shape() {
        return Err(Error::shape("distill_loss", teacher.shape(), tape.shape(student_log)));
    }
    let rows = teacher.numel() / teacher.last_dim();
    let t = tape.constant(teacher.clone());
    let prod = tape.mul(t, student_log)?;
    let s = tape.sum_all(prod)?;
    tape.scale(s, -T::one() / T::from_usize(rows).expect("count fits"))
}

/// View-prediction loss.
///
/// Symmetric form: for every teacher global view `g` and every student view
/// other than `g` (the remaining globals plus all locals), add the batch-mean
/// cross-entropy, then divide by the number of pairs. The non-symmetric form
/// uses only the first teacher global and sums its terms against the second
/// student global and every local view.
pub fn distill_loss<T: Element>(
    tape: &mut Tape<T>,
    teacher_globals: &[Tensor<T>],
    student_globals: &[Var],
    student_locals: &[Var],
    symmetric: bool,
    expected_locals: usize,
) -> Result<Var> {
    if teacher_globals.len() != student_globals.len() || teacher_globals.len() < 2 {
        return Err(Error::validation(format!(
            "{} teacher / {} student global views; need matching counts >= 2",
            teacher_globals.len(),
            student_globals.len()
        )));
    }
    if student_locals.len() != expected_locals {
        return Err(Error::validation(format!(
            "{} local views, expected {expected_locals}",
            student_locals.len()
        )));
    }
    let teachers: Vec<usize> = if symmetric { (0..teacher_globals.len()).collect() } else { vec![0] };
    let mut terms = Vec::new();
    for &g in &teachers {
        let others = student_globals
            .iter()
            .enumerate()
            .filter(|&(v, _)| v != g)
            .map(|(_, &s)| s)
            .take(if symmetric { usize::MAX } else { 1 });
        for s in others.chain(student_locals.iter().copied()) {
            terms.push(pair_term(tape, &teacher_globals[g], s)?);
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    if symmetric {
        let n = T::from_usize(terms.len()).expect("count fits");
        total = tape.scale(total, T::one() / n)?;
    }
    Ok(total)
}

/// `m · center + (1 − m) · mean over rows of teacher logits`.
pub fn update_center<T: Element>(center: &Tensor<T>, teacher_logits: &Tensor<T>, momentum: f64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::param(format!("center momentum {momentum} outside [0, 1)")));
    }
    let k = teacher_logits.last_dim();
    if center.numel() != k {
        return Err(Error::shape("update_center", center.shape(), teacher_logits.shape()));
    }
    let rows = teacher_logits.numel() / k;
    let mut mean = vec![0f64; k];
    for row in teacher_logits.rows() {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x.to_f64_lossy();
        }
    }
    let data = center
        .data()
        .iter()
        .zip(&mean)
        .map(|(&c, &m)| T::from_f64_lossy(momentum * c.to_f64_lossy() + (1.0 - momentum) * m / rows as f64))
        .collect();
    Tensor::new(center.shape().to_vec(), data)
}

/// `θ_t ← λ·θ_t + (1 − λ)·θ_s` for every tensor.
pub fn ema_update<T: Element>(teacher: &mut ParamStore<T>, student: &ParamStore<T>, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::param(format!("EMA momentum {lambda} outside [0, 1]")));
    }
    teacher.check_aligned(student)?;
    let l = T::from_f64_lossy(lambda);
    let r = T::from_f64_lossy(1.0 - lambda);
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = l * *a + r * b;
        }
    }
    Ok(())
}

/// Mean Shannon entropy (nats) of the rows of a distribution tensor.
pub fn mean_entropy<T: Element>(dist: &Tensor<T>) -> f64 {
    let rows = dist.numel() / dist.last_dim();
    let total: f64 = dist
        .data()
        .iter()
        .map(|p| p.to_f64_lossy())
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    total / rows as f64
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<T: Element>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::from_f64_lossy(max_norm / (norm + 1e-6));
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistillEpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub teacher_entropy: f64,
    pub lr: f64,
    pub momentum: f64,
    pub teacher_temp: f64,
    pub collapse_warning: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub teacher_entropy: f64,
    pub teacher_views: usize,
    pub student_views: usize,
    pub lr: f64,
    pub momentum: f64,
}

/// Everything that evolves during pre-training.
pub struct DistillState {
    pub vit: ViTConfig,
    pub config: DistillConfig,
    pub views: ViewConfig,
    pub student: ParamStore<f32>,
    pub teacher: ParamStore<f32>,
    pub center: Tensor<f32>,
    pub optimizer: OptimizerState<f32>,
    pub step: u64,
    pub steps_per_epoch: usize,
    lr: Schedule,
    momentum: Schedule,
    teacher_temp: Schedule,
    mean: [f32; 3],
    std: [f32; 3],
}

impl DistillState {
    pub fn new(
        vit_cfg: &ViTConfig,
        cfg: &DistillConfig,
        views: &ViewConfig,
        dataset_len: usize,
        stats: ([f32; 3], [f32; 3]),
        seed: u64,
    ) -> Result<Self> {
        vit_cfg.validate()?;
        cfg.validate()?;
        views.validate()?;
        if views.global_size != vit_cfg.image_size[0] || views.global_size != vit_cfg.image_size[1] {
            return Err(Error::param(format!(
                "global view size {} must equal the encoder input {:?}",
                views.global_size, vit_cfg.image_size
            )));
        }
        if !views.local_size.is_multiple_of(vit_cfg.patch_size) {
            return Err(Error::param("local view size must be divisible by the patch size"));
        }
        let student = init_network(vit_cfg, cfg, &RngState::new(seed).fork(0x1417))?;
        let steps_per_epoch = dataset_len.div_ceil(cfg.batch_size).max(1);
        Ok(DistillState {
            vit: vit_cfg.clone(),
            config: cfg.clone(),
            views: views.clone(),
            teacher: student.clone(),
            optimizer: OptimizerState::new(&student, cfg.peak_lr(), cfg.weight_decay),
            student,
            center: Tensor::zeros(vec![cfg.head.out_dim]),
            step: 0,
            steps_per_epoch,
            lr: cfg.lr_schedule(steps_per_epoch),
            momentum: cfg.momentum_schedule(steps_per_epoch),
            teacher_temp: cfg.teacher_temp_schedule(),
            mean: stats.0,
            std: stats.1,
        })
    }

    pub fn teacher_temp_at(&self, epoch: usize) -> Result<f64> {
        self.teacher_temp.value((epoch as u64).min(self.teacher_temp.total_steps))
    }

    fn clamp_step(&self, s: &Schedule, step: u64) -> Result<f64> {
        s.value(step.min(s.total_steps))
    }

    /// Teacher logits for the global views only.
    fn teacher_logits(&self, globals: &[&Image]) -> Result<Tensor<f32>> {
        let images = Image::batch::<f32>(globals, self.mean, self.std)?;
        let mut tape = Tape::new();
        let bound = self.teacher.register(&mut tape, false);
        let mut rng = RngState::new(0);
        let logits = network_logits(&mut tape, &self.vit, &bound, &images, false, &mut rng)?;
        Ok(tape.value(logits).clone())
    }

    /// One optimization step on a batch of view sets:
    /// backward → student update → EMA → center.
    pub fn train_step(&mut self, batch: &[crate::views::ViewBatch], epoch: usize, rng: &mut RngState) -> Result<StepStats> {
        let b = batch.len();
        let (ng, nl) = (self.views.n_global, self.views.n_local);
        for vb in batch {
            if vb.globals.len() != ng || vb.locals.len() != nl {
                return Err(Error::validation("view batch does not match the view config"));
            }
        }
        let global_views: Vec<&Image> = (0..ng).flat_map(|g| batch.iter().map(move |vb| &vb.globals[g])).collect();
        let local_views: Vec<&Image> = (0..nl).flat_map(|l| batch.iter().map(move |vb| &vb.locals[l])).collect();

        let tau_t = self.teacher_temp_at(epoch)?;
        let teacher_logits = self.teacher_logits(&global_views)?;
        let k = teacher_logits.last_dim();
        let mut teacher_dists = Vec::with_capacity(ng);
        let mut entropy = 0.0;
        for g in 0..ng {
            let rows = Tensor::new(vec![b, k], teacher_logits.data()[g * b * k..(g + 1) * b * k].to_vec())?;
            let dist = teacher_distribution(&rows, &self.center, tau_t as f32)?;
            entropy += mean_entropy(&dist) / ng as f64;
            teacher_dists.push(dist);
        }

        let mut tape = Tape::new();
        let bound = self.student.register(&mut tape, true);
        let tau_s = self.config.student_temp as f32;
        let gimg = Image::batch::<f32>(&global_views, self.mean, self.std)?;
        let g_logits = network_logits(&mut tape, &self.vit, &bound, &gimg, true, rng)?;
        let mut student_globals = Vec::with_capacity(ng);
        for g in 0..ng {
            let rows = tape.slice(g_logits, 0, g * b, b)?;
            student_globals.push(student_log_distribution(&mut tape, rows, tau_s)?);
        }
        let mut student_locals = Vec::with_capacity(nl);
        if nl > 0 {
            let limg = Image::batch::<f32>(&local_views, self.mean, self.std)?;
            let l_logits = network_logits(&mut tape, &self.vit, &bound, &limg, true, rng)?;
            for l in 0..nl {
                let rows = tape.slice(l_logits, 0, l * b, b)?;
                student_locals.push(student_log_distribution(&mut tape, rows, tau_s)?);
            }
        }
        let loss = distill_loss(&mut tape, &teacher_dists, &student_globals, &student_locals, self.config.symmetric, nl)?;
        let loss_value = tape.value(loss).data()[0] as f64;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("distill loss at step {}", self.step)));
        }
        let mut grads = tape.backward(loss)?;
        let mut grads = bound.collect_grads(&mut grads, &self.student);
        if let Some(max) = self.config.clip_grad {
            clip_grad_norm(&mut grads, max);
        }
        let lr = self.clamp_step(&self.lr, self.step + 1)?;
        let momentum = self.clamp_step(&self.momentum, self.step)?;
        adam_step(&mut self.student, &grads, &mut self.optimizer, lr, self.config.weight_decay)
            .map_err(|e| e.within(format!("step {}", self.step)))?;
        ema_update(&mut self.teacher, &self.student, momentum)?;
        self.center = update_center(&self.center, &teacher_logits, self.config.center_momentum)?;
        self.step += 1;
        Ok(StepStats {
            loss: loss_value,
            teacher_entropy: entropy,
            teacher_views: global_views.len(),
            student_views: global_views.len() + local_views.len(),
            lr,
            momentum,
        })
    }

    pub fn to_checkpoint(&self, epoch: u64, seed: u64, config_json: &str) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new("pretrain", epoch, seed, config_json.to_string());
        ckpt.push_params(TEACHER_PREFIX, &self.teacher)?;
        ckpt.push_params(STUDENT_PREFIX, &self.student)?;
        ckpt.push(CENTER_ENTRY, &self.center)?;
        Ok(ckpt)
    }
}

/// Config snapshot stored in pre-training checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainSnapshot {
    pub vit: ViTConfig,
    pub distill: DistillConfig,
    pub views: ViewConfig,
}

pub struct PretrainResult {
    pub state: DistillState,
    pub metrics: Vec<DistillEpochMetrics>,
    pub checkpoint: Checkpoint,
}

const EPOCH_TAG: u64 = 0xE90C;
const VIEW_TAG: u64 = 0x71E5;
const DROP_TAG: u64 = 0xD209;

/// Runs self-distillation pre-training over `dataset.train`.
///
/// When `out_dir` is given, writes `pretrain_metrics.csv`, the final
/// checkpoint `pretrain.svtc`, and `pretrain_epoch{N}.svtc` every
/// `checkpoint_every` epochs.
pub fn pretrain(
    dataset: &Dataset,
    vit_cfg: &ViTConfig,
    cfg: &DistillConfig,
    views: &ViewConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<PretrainResult> {
    let train: &[Sample] = &dataset.train;
    let mut state = DistillState::new(vit_cfg, cfg, views, train.len(), (dataset.spec.mean, dataset.spec.std), seed)?;
    let snapshot = serde_json::to_string(&PretrainSnapshot {
        vit: vit_cfg.clone(),
        distill: cfg.clone(),
        views: views.clone(),
    })
    .expect("configs serialize");
    let root = RngState::new(seed);
    let ln_k = (cfg.head.out_dim as f64).ln();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut writer = match out_dir {
        Some(dir) => Some(crate::metrics::CsvLog::create(&dir.join("pretrain_metrics.csv"))?),
        None => None,
    };
    for epoch in 0..cfg.epochs {
        let order = root.fork_path(&[EPOCH_TAG, epoch as u64]).permutation(train.len());
        let mut drop_rng = root.fork_path(&[DROP_TAG, epoch as u64]);
        let (mut loss, mut entropy, mut steps) = (0.0, 0.0, 0usize);
        let mut min_entropy = f64::INFINITY;
        let mut last = StepStats::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let s = &train[i];
                    generate_views(&s.image, s.id, views, &root.fork_path(&[VIEW_TAG, epoch as u64, s.id]))
                })
                .collect::<Result<Vec<_>>>()?;
            last = state.train_step(&batch, epoch, &mut drop_rng)?;
            loss += last.loss;
            entropy += last.teacher_entropy;
            min_entropy = min_entropy.min(last.teacher_entropy);
            steps += 1;
        }
        let m = DistillEpochMetrics {
            epoch,
            loss: loss / steps as f64,
            teacher_entropy: entropy / steps as f64,
            lr: last.lr,
            momentum: last.momentum,
            teacher_temp: state.teacher_temp_at(epoch)?,
            collapse_warning: entropy / (steps as f64) < 0.1 * ln_k,
        };
        if m.collapse_warning {
            warn!("epoch {epoch}: teacher entropy {:.4} below 0.1·ln K, possible collapse", m.teacher_entropy);
        }
        info!(
            "pretrain epoch {epoch}: loss {:.4} teacher entropy {:.4} lr {:.2e} λ {:.5} τ_t {:.4}",
            m.loss, m.teacher_entropy, m.lr, m.momentum, m.teacher_temp
        );
        if let Some(w) = writer.as_mut() {
            w.write(&m)?;
        }
        metrics.push(m);
        if let (Some(dir), Some(every)) = (out_dir, cfg.checkpoint_every) {
            if every > 0 && (epoch + 1) % every == 0 {
                state
                    .to_checkpoint(epoch as u64 + 1, seed, &snapshot)?
                    .save(&dir.join(format!("pretrain_epoch{}.svtc", epoch + 1)))?;
            }
        }
    }
    let checkpoint = state.to_checkpoint(cfg.epochs as u64, seed, &snapshot)?;
    if let Some(dir) = out_dir {
        checkpoint.save(&dir.join("pretrain.svtc"))?;
    }
    Ok(PretrainResult {
        state,
        metrics,
        checkpoint,
    })
}
