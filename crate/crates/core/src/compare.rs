//! Budget-matched comparison of backbone initialization schemes.

use std::path::Path;

use serde::Serialize;

use crate::data::Dataset;
use crate::distill::{pretrain, DistillConfig};
use crate::error::{Error, Result};
use crate::finetune::{finetune, FinetuneConfig, InitSource};
use crate::metrics::CsvLog;
use crate::views::ViewConfig;
use crate::vit::ViTConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub scheme: String,
    pub seed: u64,
    pub top1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SchemeSummary {
    pub scheme: String,
    pub runs: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

pub struct CompareSetup<'a> {
    pub dataset: &'a Dataset,
    pub vit: &'a ViTConfig,
    pub views: &'a ViewConfig,
    pub distill: &'a DistillConfig,
    pub finetune: &'a FinetuneConfig,
}

/// Fine-tunes once per (scheme, seed) with identical budgets and data order;
/// only the backbone initialization differs. `self-supervised` runs a
/// pre-training phase first and transfers the teacher.
pub fn init_compare(setup: &CompareSetup, schemes: &[String], seeds: &[u64], out_dir: Option<&Path>) -> Result<(Vec<CompareRow>, Vec<SchemeSummary>)> {
    if schemes.is_empty() || seeds.is_empty() {
        return Err(Error::param("init-compare needs at least one scheme and one seed"));
    }
    let parsed = schemes
        .iter()
        .map(|s| s.parse::<InitSource>().map(|src| (s.clone(), src)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (name, source) in &parsed {
        for &seed in seeds {
            let cfg = FinetuneConfig {
                init: *source,
                ..setup.finetune.clone()
            };
            let pretrained = if source.pretrained().is_some() {
                Some(pretrain(setup.dataset, setup.vit, setup.distill, setup.views, seed, None)?.checkpoint)
            } else {
                None
            };
            let r = finetune(setup.dataset, pretrained.as_ref(), setup.vit, &cfg, seed, None)?;
            rows.push(CompareRow {
                scheme: name.clone(),
                seed,
                top1: r.final_top1,
            });
        }
    }
    let summary = summarize(&rows);
    if let Some(dir) = out_dir {
        let mut w = CsvLog::create(&dir.join("init_compare.csv"))?;
        for r in &rows {
            w.write(r)?;
        }
        let mut w = CsvLog::create(&dir.join("init_compare_summary.csv"))?;
        for s in &summary {
            w.write(s)?;
        }
    }
    Ok((rows, summary))
}

/// Mean, min and max per scheme, in first-seen order.
pub fn summarize(rows: &[CompareRow]) -> Vec<SchemeSummary> {
    let mut out: Vec<SchemeSummary> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|s| s.scheme == r.scheme) {
            Some(s) => {
                s.mean = (s.mean * s.runs as f64 + r.top1) / (s.runs + 1) as f64;
                s.runs += 1;
                s.min = s.min.min(r.top1);
                s.max = s.max.max(r.top1);
            }
            None => out.push(SchemeSummary {
                scheme: r.scheme.clone(),
                runs: 1,
                mean: r.top1,
                min: r.top1,
                max: r.top1,
            }),
        }
    }
    out
}
