//! Run configuration and dataset loading.

use std::path::{Path, PathBuf};

use oavnn::geometry::{load_xyz, PointCloud};
use oavnn::model::ModelConfig;
use oavnn::shapes::{gen_dataset, ShapeKind};
use oavnn::{Error, Result};
use serde::{Deserialize, Serialize};

/// Where training and test clouds come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: ShapeKind,
    pub n_points: usize,
    pub jitter_sigma: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub train_seed: u64,
    pub test_seed: u64,
    /// Directory of XYZ files used instead of generated training clouds.
    pub train_dir: Option<PathBuf>,
    /// Directory of XYZ files used instead of generated test clouds.
    pub test_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: ShapeKind::Airplane,
            n_points: 256,
            jitter_sigma: 0.0,
            train_count: 200,
            test_count: 50,
            train_seed: 0,
            test_seed: 1_000_000,
            train_dir: None,
            test_dir: None,
        }
    }
}

impl DataConfig {
    pub fn train_set(&self) -> Result<Vec<PointCloud>> {
        match &self.train_dir {
            Some(dir) => load_dir(dir),
            None => gen_dataset(self.kind, self.train_count, self.n_points, self.jitter_sigma, self.train_seed),
        }
    }

    pub fn test_set(&self) -> Result<Vec<PointCloud>> {
        match &self.test_dir {
            Some(dir) => load_dir(dir),
            None => gen_dataset(self.kind, self.test_count, self.n_points, self.jitter_sigma, self.test_seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data: DataConfig::default(),
            out_dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.model.validate()?;
        Ok(cfg)
    }
}

/// Loads a single XYZ file, or every `*.xyz` file in a directory in name order.
pub fn load_dir(path: &Path) -> Result<Vec<PointCloud>> {
    if path.is_file() {
        return Ok(vec![load_xyz(path)?]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xyz"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no .xyz files in {}", path.display())));
    }
    files.iter().map(load_xyz).collect()
}
