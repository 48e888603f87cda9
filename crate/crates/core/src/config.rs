//! JSON run configuration. Unknown keys are rejected with their key path.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, SyntheticConfig};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::views::ViewConfig;
use crate::vit::ViTConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    Cifar10 {
        path: PathBuf,
    },
    Cifar100 {
        path: PathBuf,
    },
    /// Pre-converted `SVTR` files.
    Raw {
        name: String,
        train: PathBuf,
        test: PathBuf,
        classes: usize,
    },
    Synthetic {
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        config: SyntheticConfig,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Keep only the first N training / test samples.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DatasetSource::Synthetic {
                seed: 0,
                config: SyntheticConfig::default(),
            },
            train_limit: None,
            test_limit: None,
        }
    }
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Dataset> {
        let ds = match &self.source {
            DatasetSource::Cifar10 { path } => data::load_cifar10(path)?,
            DatasetSource::Cifar100 { path } => data::load_cifar100(path)?,
            DatasetSource::Raw {
                name,
                train,
                test,
                classes,
            } => Dataset::new(name, *classes, data::read_raw(train, *classes)?, data::read_raw(test, *classes)?)?,
            DatasetSource::Synthetic { seed, config } => data::synthetic_dataset(*seed, config)?,
        };
        match (self.train_limit, self.test_limit) {
            (None, None) => Ok(ds),
            (a, b) => {
                let (n, m) = (a.unwrap_or(ds.train.len()), b.unwrap_or(ds.test.len()));
                ds.subset(n.min(ds.train.len()), m.min(ds.test.len()))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptedSet {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Corrupted copies of the test split in `SVTR` format.
    pub corrupted: Vec<CorruptedSet>,
    /// Test images rendered by `attnmap`.
    pub attention_images: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            corrupted: Vec::new(),
            attention_images: 8,
            batch_size: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub schemes: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            schemes: vec!["uniform".into(), "xavier".into(), "truncated-normal".into(), "self-supervised".into()],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub vit: ViTConfig,
    pub views: ViewConfig,
    pub distill: DistillConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub compare: CompareConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            vit: ViTConfig::default(),
            views: ViewConfig::cifar(),
            distill: DistillConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
            compare: CompareConfig::default(),
        }
    }
}

pub const RESOLVED_NAME: &str = "config.resolved.json";

fn at(path: &str, e: Error) -> Error {
    Error::Config {
        path: path.to_string(),
        msg: e.to_string(),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            msg: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Cross-field checks; errors carry the offending key path.
    pub fn validate(&self) -> Result<()> {
        self.vit.validate().map_err(|e| at("vit", e))?;
        self.views.validate().map_err(|e| at("views", e))?;
        self.distill.validate().map_err(|e| at("distill", e))?;
        self.finetune.validate().map_err(|e| at("finetune", e))?;
        if self.views.global_size != self.vit.image_size[0] {
            return Err(Error::Config {
                path: "views.global_size".into(),
                msg: format!("must equal vit.image_size {:?}", self.vit.image_size),
            });
        }
        if !self.views.local_size.is_multiple_of(self.vit.patch_size) {
            return Err(Error::Config {
                path: "views.local_size".into(),
                msg: "must be divisible by vit.patch_size".into(),
            });
        }
        if let DatasetSource::Synthetic { config, .. } = &self.dataset.source {
            if [config.size, config.size] != self.vit.image_size {
                return Err(Error::Config {
                    path: "dataset.source.config.size".into(),
                    msg: format!("synthetic size {} differs from vit.image_size", config.size),
                });
            }
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config {
                path: "eval.batch_size".into(),
                msg: "must be >= 1".into(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_NAME);
        fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
