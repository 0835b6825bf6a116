//! JSON run configuration shared by the command-line tool and the examples.
//!
//! Every section and field is optional; missing values take the defaults
//! shown by `RunConfig::default()`, unknown keys are rejected. Example:
//!
//! ```json
//! {
//!   "arch": { "stage_widths": [8, 16, 32, 64, 64], "input_size": 32 },
//!   "fusion": "gff",
//!   "split": { "labeled_ratio": 0.2, "seed": 0 },
//!   "train": { "epochs": 40, "optim": { "init_lr": 0.03 }, "seed": 0 }
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, read_splits, split, split_from_ids, Split, SplitSpec};
use crate::error::{io_err, json_err, Error, Result};
use crate::gff::FusionMode;
use crate::network::ArchConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub fusion: FusionMode,
    /// Used when the dataset has no `splits.json`, or when a labeled ratio
    /// is forced on the command line.
    pub split: SplitSpec,
    pub train: TrainConfig,
    /// Dataset directory.
    pub data: Option<PathBuf>,
    /// Output directory.
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text).map_err(json_err(path))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(json_err(path))?;
        fs::write(path, text + "\n").map_err(io_err(path))
    }

    /// Loads `data` and partitions it: by its `splits.json` when present and
    /// `prefer_file` is set, otherwise by `split`.
    pub fn load_split(&self, prefer_file: bool) -> Result<Split> {
        let dir = self
            .data
            .as_deref()
            .ok_or_else(|| Error::Invalid("no dataset directory configured".into()))?;
        let samples = load_dataset(dir)?;
        match read_splits(dir)? {
            Some(ids) if prefer_file => split_from_ids(&samples, &ids),
            _ => split(&samples, &self.split),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.split.validate()?;
        self.train.validate()
    }
}
