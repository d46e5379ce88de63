//! Run settings merged from a config file and command-line flags.

use std::path::{Path, PathBuf};

use bgnn_core::{KernelFamily, Reduction};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    /// IDX digit files under the data root.
    Mnist,
    /// Procedurally generated 3-D shapes.
    Shapes,
    /// Point clouds listed in `train.txt` / `test.txt` manifests.
    Pointcloud,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classify,
    Autoencoder,
}

fn parse_kernel(s: &str) -> Result<KernelFamily, String> {
    s.parse().map_err(|e: bgnn_core::Error| e.to_string())
}

fn parse_red(s: &str) -> Result<Reduction, String> {
    s.parse().map_err(|e: bgnn_core::Error| e.to_string())
}

/// Options shared by `train` and `eval`. Every field may also be given in
/// the `--config` file under the same name (dashes or underscores).
#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunArgs {
    /// Config file: JSON object or `key = value` lines.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub dataset: Option<Dataset>,
    #[arg(long, value_enum)]
    pub task: Option<TaskKind>,
    /// Architecture string, e.g. "BC(16,2,3.4)-C(32)-GMP-FC(10)".
    #[arg(long)]
    pub arch: Option<String>,
    /// ecc, gat or eca.
    #[arg(long, value_parser = parse_kernel)]
    pub kernel: Option<KernelFamily>,
    /// sum, mean or max.
    #[arg(long, value_parser = parse_red)]
    pub red: Option<Reduction>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Number of training samples (multiple of 10 for MNIST).
    #[arg(long)]
    pub subset: Option<usize>,
    /// Number of test samples; defaults to a quarter of the subset.
    #[arg(long)]
    pub test_size: Option<usize>,
    /// Radius of the input graphs built from point clouds.
    #[arg(long)]
    pub radius: Option<f64>,
    /// Autoencoder: fuse encoder features into the decoder.
    #[arg(long)]
    pub skip: Option<bool>,
    /// Checkpoint to evaluate instead of `<out-dir>/model.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

macro_rules! merge_fields {
    ($dst:ident, $src:ident, $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl RunArgs {
    /// `self` with every field set in `over` replaced.
    pub fn overridden_by(mut self, over: &RunArgs) -> RunArgs {
        merge_fields!(
            self, over, dataset, task, arch, kernel, red, epochs, lr, batch_size, seed, workers,
            data_root, out_dir, subset, test_size, radius, skip, checkpoint
        );
        self
    }
}

/// Reads a config file. An object-shaped file is JSON; anything else is
/// `key = value` lines with `#` comments. Values that parse as JSON scalars
/// keep their type, the rest are strings.
pub fn read_config(path: &Path) -> Result<RunArgs, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let value = if text.trim_start().starts_with('{') {
        serde_json::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))?
    } else {
        let mut map = serde_json::Map::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(format!(
                    "config {}:{}: expected `key = value`",
                    path.display(),
                    no + 1
                ));
            };
            let v = v.trim();
            let parsed = serde_json::from_str(v)
                .unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
            map.insert(k.trim().replace('-', "_"), parsed);
        }
        serde_json::Value::Object(map)
    };
    let value = match value {
        serde_json::Value::Object(m) => serde_json::Value::Object(
            m.into_iter()
                .map(|(k, v)| (k.replace('-', "_"), v))
                .collect(),
        ),
        other => other,
    };
    serde_json::from_value(value).map_err(|e| format!("config {}: {e}", path.display()))
}
