//! Experiment configuration files (TOML) and output-directory handling.
//!
//! Every section and key is optional; unknown keys are rejected. Example:
//!
//! ```toml
//! seed = 1
//!
//! [data]
//! classes = 10
//! rho = 100.0
//!
//! [arch]
//! n_cells = 5
//! ops = ["zero", "skip_connect", "sep_conv_3x3", "lt_agg_conv"]
//!
//! [search]
//! epochs = 20
//! classifier = "etf"
//!
//! [train]
//! epochs = 80
//! recipe = "ce+mixup"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    load_cifar_records, load_dataset, subsample_long_tail, synthesize, LabeledDataset, LongTailSpec,
};
use crate::error::{Error, Result};
use crate::search::SearchConfig;
use crate::supernet::ArchConfig;
use crate::train::TrainConfig;

/// Environment variable holding the default output root.
pub const OUT_ENV: &str = "TAILNAS_OUT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSource {
    /// Training set in the flat binary format; replaces synthesis.
    pub train_path: Option<String>,
    /// Test set in the flat binary format.
    pub test_path: Option<String>,
    /// CIFAR-style record file for training; subsampled to the long-tailed profile.
    pub cifar_train: Option<String>,
    pub cifar_test: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub seeds: Vec<u64>,
    /// Imbalance ratios swept by `explore`; a balanced control is always added.
    pub rhos: Vec<f64>,
    /// Training epochs for fixed-backbone suites.
    pub backbone_epochs: usize,
    /// Channel width of the fixed backbone.
    pub backbone_channels: usize,
    /// Operations compared by `opcompare`, one row each.
    pub opcompare_ops: Vec<String>,
    /// Catalog of the ablation's "+conv" rows.
    pub ablate_conv_ops: Vec<String>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            rhos: vec![100.0],
            backbone_epochs: 20,
            backbone_channels: 16,
            opcompare_ops: [
                "dil_conv_3x3",
                "sep_conv_3x3",
                "lt_agg_conv",
                "lt_hier_conv",
            ]
            .map(String::from)
            .to_vec(),
            ablate_conv_ops: [
                "zero",
                "skip_connect",
                "max_pool_3x3",
                "avg_pool_3x3",
                "sep_conv_3x3",
                "dil_conv_3x3",
                "lt_agg_conv",
                "lt_hier_conv",
            ]
            .map(String::from)
            .to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seed for search and training; the dataset keeps `data.seed`.
    pub seed: u64,
    pub data: LongTailSpec,
    pub dataset: DatasetSource,
    pub arch: ArchConfig,
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub suite: SuiteConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: LongTailSpec::default(),
            dataset: DatasetSource::default(),
            arch: ArchConfig::default(),
            search: SearchConfig::default(),
            train: TrainConfig {
                epochs: 4 * SearchConfig::default().epochs,
                ..TrainConfig::default()
            },
            suite: SuiteConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Copies the top-level seed into the search and training sections.
    pub fn resolved(mut self) -> Self {
        self.search.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.arch.validate()?;
        self.search.validate()?;
        self.train.validate()?;
        if self.suite.seeds.is_empty() {
            return Err(Error::Config("suite.seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the resolved configuration, excluding the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = OutputConfig::default();
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        crate::tensor::hex(&digest)[..16].to_string()
    }

    /// Training and balanced test sets, from files when configured and
    /// synthesized otherwise.
    pub fn load_data(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let d = &self.dataset;
        match (&d.train_path, &d.test_path, &d.cifar_train, &d.cifar_test) {
            (Some(tr), Some(te), None, None) => {
                Ok((load_dataset(Path::new(tr))?, load_dataset(Path::new(te))?))
            }
            (None, None, Some(tr), Some(te)) => {
                let train = load_cifar_records(&std::fs::read(tr)?, self.data.classes)?;
                let test = load_cifar_records(&std::fs::read(te)?, self.data.classes)?;
                Ok((subsample_long_tail(&train, &self.data)?, test))
            }
            (None, None, None, None) => synthesize(&self.data),
            _ => Err(Error::Config(
                "dataset: give train_path and test_path, or cifar_train and cifar_test".into(),
            )),
        }
    }
}

/// Output directory: explicit flag, then `output.dir`, then `$TAILNAS_OUT/<command>`,
/// then `runs/<command>`.
pub fn resolve_out_dir(flag: Option<&Path>, cfg: &ExperimentConfig, command: &str) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(d) = &cfg.output.dir {
        return PathBuf::from(d);
    }
    match std::env::var_os(OUT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(command),
        _ => PathBuf::from("runs").join(command),
    }
}

/// Creates `dir`, refusing to reuse a non-empty directory unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Appends a timestamped line to `run.log`, the only file carrying wall-clock time.
pub fn log_event(dir: &Path, message: &str) -> Result<()> {
    use std::io::Write;
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("run.log"))?;
    writeln!(f, "{secs} {message}")?;
    Ok(())
}
