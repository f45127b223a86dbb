//! On-disk layout of run directories.
//!
//! ```text
//! <run>/config.train.json
//! <run>/<variant>/fold<k>/split.json
//! <run>/<variant>/fold<k>/loss_history.csv
//! <run>/<variant>/fold<k>/stage<i>.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use evograph_core::data::{SyntheticConfig, MANIFEST_FILE};
use evograph_core::eval::ReportFormat;
use evograph_core::losses::Variant;
use evograph_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const TOOL: &str = "evographnet";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const SPLIT_FILE: &str = "split.json";
pub const HISTORY_FILE: &str = "loss_history.csv";

/// Every resolved setting of one command invocation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub out: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<Variant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub formats: Vec<ReportFormat>,
    #[serde(default)]
    pub untrained: bool,
}

impl RunConfig {
    pub fn new(command: &str, out: &Path) -> Self {
        Self {
            tool: TOOL.into(),
            version: VERSION.into(),
            command: command.into(),
            out: out.to_path_buf(),
            synthetic: None,
            train: None,
            variants: Vec::new(),
            data: None,
            run: None,
            checkpoints: None,
            input: None,
            formats: Vec::new(),
            untrained: false,
        }
    }

    pub fn file_name(command: &str) -> String {
        format!("config.{command}.json")
    }

    /// Writes `config.<command>.json` into `out`, creating it if needed.
    pub fn write(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(Self::file_name(&self.command));
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Subject ids of one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    pub fold: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

pub fn fold_dir(run: &Path, variant: Variant, fold: usize) -> PathBuf {
    run.join(variant.as_str()).join(format!("fold{fold}"))
}

pub fn stage_file(fold_dir: &Path, stage: usize) -> PathBuf {
    fold_dir.join(format!("stage{stage}.json"))
}

pub fn report_file(out: &Path, format: ReportFormat) -> PathBuf {
    out.join(format!("report.{}", format.extension()))
}

/// Accepts either a manifest file or the directory that holds one.
pub fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_path_buf()
    }
}
