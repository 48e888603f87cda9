//! `svt` command-line entry points.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
//! runtime failures.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::compare::{init_compare, CompareSetup};
use crate::config::RunConfig;
use crate::data::{self, Dataset};
use crate::distill::pretrain;
use crate::error::{Error, Result};
use crate::eval::{attention_map, corruption_report, write_attention};
use crate::finetune::{finetune, load_backbone, BackboneSource, Classifier};
use crate::vit::ViTModel;

#[derive(Debug, Parser)]
#[command(name = "svt", version, about = "Self-supervised ViT pre-training and fine-tuning for small datasets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the epoch count of the stage being run.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output directory for every artifact of the run.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Self-supervised view-prediction pre-training.
    Pretrain(Common),
    /// Supervised fine-tuning, optionally from a pre-training checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Top-1 accuracy and mean corruption error of a fine-tuned checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// CLS attention rasters for test images.
    Attnmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compares initialization schemes under identical budgets.
    InitCompare(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Pretrain(c) | Command::InitCompare(c) => c,
            Command::Finetune { common, .. } | Command::Eval { common, .. } | Command::Attnmap { common, .. } => common,
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Usage(_) => 2,
        _ => 1,
    }
}

/// Loads the config and applies flag overrides. Any failure here is a
/// configuration error.
pub fn resolve_config(common: &Common, command: &Command) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(&common.config).map_err(|e| match e {
        Error::Config { .. } => e,
        other => Error::Config {
            path: common.config.display().to_string(),
            msg: other.to_string(),
        },
    })?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(epochs) = common.epochs {
        match command {
            Command::Pretrain(_) => {
                cfg.distill.epochs = epochs;
                if cfg.distill.warmup_epochs >= epochs && epochs > 0 {
                    warn!("warmup_epochs {} clamped to {}", cfg.distill.warmup_epochs, epochs - 1);
                    cfg.distill.warmup_epochs = epochs - 1;
                }
            }
            Command::InitCompare(_) | Command::Finetune { .. } => cfg.finetune.epochs = epochs,
            _ => {}
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(command: &Command) -> Result<()> {
    let cfg = resolve_config(command.common(), command)?;
    let out = cfg.out_dir.clone();
    cfg.write_resolved(&out)?;
    let dataset = cfg.dataset.load()?;
    info!(
        "dataset {}: {} train / {} test, {} classes",
        dataset.spec.name, dataset.spec.train_count, dataset.spec.test_count, dataset.spec.classes
    );
    match command {
        Command::Pretrain(_) => {
            let r = pretrain(&dataset, &cfg.vit, &cfg.distill, &cfg.views, cfg.seed, Some(&out))?;
            info!("pre-training finished after {} epochs", r.metrics.len());
        }
        Command::Finetune { checkpoint, .. } => {
            let pre = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let r = finetune(&dataset, pre.as_ref(), &cfg.vit, &cfg.finetune, cfg.seed, Some(&out))?;
            info!("fine-tuning finished: final top-1 {:.4}, best {:.4}", r.final_top1, r.best_top1);
        }
        Command::Eval { checkpoint, .. } => run_eval(&cfg, &dataset, checkpoint, &out)?,
        Command::Attnmap { checkpoint, .. } => run_attnmap(&cfg, &dataset, checkpoint, &out)?,
        Command::InitCompare(_) => {
            let setup = CompareSetup {
                dataset: &dataset,
                vit: &cfg.vit,
                views: &cfg.views,
                distill: &cfg.distill,
                finetune: &cfg.finetune,
            };
            let (_, summary) = init_compare(&setup, &cfg.compare.schemes, &cfg.compare.seeds, Some(&out))?;
            for s in summary {
                info!("{}: mean {:.4} [{:.4}, {:.4}] over {} seeds", s.scheme, s.mean, s.min, s.max, s.runs);
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    top1: f64,
    clean_error: f64,
    corrupted: Vec<(String, f64)>,
    mce: Option<f64>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("summary serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run_eval(cfg: &RunConfig, dataset: &Dataset, checkpoint: &Path, out: &Path) -> Result<()> {
    let model = Classifier::from_checkpoint(&Checkpoint::load(checkpoint)?, cfg.vit.clone())?;
    let (mean, std) = (dataset.spec.mean, dataset.spec.std);
    let batch = cfg.eval.batch_size;
    let top1 = model.accuracy(&dataset.test, mean, std, batch)?;
    let summary = if cfg.eval.corrupted.is_empty() {
        EvalSummary {
            top1,
            clean_error: 100.0 * (1.0 - top1),
            corrupted: Vec::new(),
            mce: None,
        }
    } else {
        let sets = cfg
            .eval
            .corrupted
            .iter()
            .map(|c| Ok((c.name.clone(), data::read_raw(&c.path, dataset.spec.classes)?)))
            .collect::<Result<Vec<_>>>()?;
        let r = corruption_report(&model, &dataset.test, &sets, mean, std, batch)?;
        EvalSummary {
            top1,
            clean_error: r.clean_error,
            corrupted: r.per_set,
            mce: Some(r.mce),
        }
    };
    info!("top-1 {:.4}; mCE {:?}", summary.top1, summary.mce);
    write_json(&out.join("eval.json"), &summary)
}

/// Backbone from either a fine-tuned or a pre-training checkpoint.
fn backbone_from(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<ViTModel<f32>> {
    if ckpt.stage == "pretrain" {
        let params = load_backbone(ckpt, BackboneSource::Teacher, &cfg.vit)?;
        ViTModel::from_params(cfg.vit.clone(), params)
    } else {
        Ok(Classifier::from_checkpoint(ckpt, cfg.vit.clone())?.backbone())
    }
}

#[derive(Serialize)]
struct AttentionSummary {
    images: usize,
    max_row_sum_error: f64,
}

fn run_attnmap(cfg: &RunConfig, dataset: &Dataset, checkpoint: &Path, out: &Path) -> Result<()> {
    let model = backbone_from(cfg, &Checkpoint::load(checkpoint)?)?;
    let dir = out.join("attention");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let n = cfg.eval.attention_images.min(dataset.test.len());
    let mut worst = 0.0f64;
    for (i, s) in dataset.test.iter().take(n).enumerate() {
        let map = attention_map(&model, &s.image, dataset.spec.mean, dataset.spec.std)?;
        for row in &map.raw {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        write_attention(&dir, &format!("test{i:05}_label{}", s.label), &map, cfg.vit.image_size)?;
    }
    info!("wrote {n} attention maps to {}", dir.display());
    write_json(
        &out.join("attention_summary.json"),
        &AttentionSummary {
            images: n,
            max_row_sum_error: worst,
        },
    )?;
    Ok(())
}
