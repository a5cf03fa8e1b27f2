//! On-disk layout of a run directory, shared by `run` and `analyze`.
//!
//! ```text
//! manifest.json
//! reports/<stem>.json
//! gradstats/<stem>.csv            layer,step,bin_left,bin_right,count
//! gradstats/<stem>.summary.json   [{layer, step, std, norm, alignment}]
//! weights/<stem>.json             per-epoch backbone weights
//! datasets/seed<n>_<split>.{bin,json}
//! analysis/<mode>.{csv,json}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use dss_lab::uda::Condition;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

/// One trained cell of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunEntry {
    pub condition: Condition,
    pub seed: u64,
    pub config_digest: String,
    /// File stem shared by the run's report, gradient and weight files.
    pub stem: String,
}

/// A weight-bearing backbone layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub layer: usize,
    pub kind: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub layers: Vec<LayerEntry>,
    pub runs: Vec<RunEntry>,
}

impl Manifest {
    /// Index of the deepest convolutional layer, else the deepest layer.
    pub fn deepest_conv(&self) -> Option<usize> {
        self.layers
            .iter()
            .rev()
            .find(|l| l.kind == "conv2d")
            .or(self.layers.last())
            .map(|l| l.layer)
    }
}

/// Backbone weights of one layer at initialization and after each epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerWeights {
    pub layer: usize,
    pub shape: Vec<usize>,
    pub snapshots: Vec<Vec<f64>>,
}

pub fn stem(condition: Condition, seed: u64) -> String {
    format!("{}_seed{seed}", condition.name().replace('+', "-"))
}

pub fn report_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join("reports").join(format!("{stem}.json"))
}

pub fn histogram_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join("gradstats").join(format!("{stem}.csv"))
}

pub fn summary_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join("gradstats").join(format!("{stem}.summary.json"))
}

pub fn weights_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join("weights").join(format!("{stem}.json"))
}

pub fn analysis_path(dir: &Path, file: &str) -> PathBuf {
    dir.join("analysis").join(file)
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes") + "\n"
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)
}
