//! Run configuration: a flat TOML file holding every federation field plus
//! the dataset, seed list and output directory.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::{load_idx, synth_blobs, Dataset};
use crate::error::{Error, Result};
use crate::federation::FederationConfig;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "HETFL_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "hetfl-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    Idx,
}

/// Keys that belong to the run rather than to the federation.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub dataset: DatasetKind,
    pub synth_classes: usize,
    pub synth_dim: usize,
    pub synth_spread: f64,
    pub synth_train_per_class: usize,
    pub synth_test_per_class: usize,
    pub synth_seed: u64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Keep only the first `n` training samples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Synthetic,
            synth_classes: 10,
            synth_dim: 20,
            synth_spread: 0.3,
            synth_train_per_class: 100,
            synth_test_per_class: 50,
            synth_seed: 0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_limit: None,
            test_limit: None,
            seeds: None,
            out_dir: None,
        }
    }
}

const RUN_KEYS: &[&str] = &[
    "dataset",
    "synth_classes",
    "synth_dim",
    "synth_spread",
    "synth_train_per_class",
    "synth_test_per_class",
    "synth_seed",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "train_limit",
    "test_limit",
    "seeds",
    "out_dir",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub federation: FederationConfig,
    pub run: RunSection,
    /// Directory relative paths in the file are resolved against.
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            federation: FederationConfig::default(),
            run: RunSection::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let (run, federation): (toml::Table, toml::Table) = table
            .into_iter()
            .partition(|(k, _)| RUN_KEYS.contains(&k.as_str()));
        let run: RunSection = run
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let federation: FederationConfig = federation
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let config = Self {
            federation,
            run,
            base_dir: base_dir.to_path_buf(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds().is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.run.dataset == DatasetKind::Idx {
            self.idx_paths()?;
        }
        self.federation.validate()
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.run
            .seeds
            .clone()
            .unwrap_or_else(|| vec![self.federation.seed])
    }

    /// `flag`, then the file's `out_dir`, then the environment, then a
    /// fixed default.
    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = &self.run.out_dir {
            return self.resolve(p);
        }
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn idx_paths(&self) -> Result<[PathBuf; 4]> {
        let r = &self.run;
        let get = |p: &Option<PathBuf>, key: &str| {
            p.as_deref()
                .map(|p| self.resolve(p))
                .ok_or_else(|| Error::Config(format!("dataset = \"idx\" requires {key}")))
        };
        Ok([
            get(&r.train_images, "train_images")?,
            get(&r.train_labels, "train_labels")?,
            get(&r.test_images, "test_images")?,
            get(&r.test_labels, "test_labels")?,
        ])
    }

    /// Train and test sets described by the config.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let r = &self.run;
        let (train, test) = match r.dataset {
            DatasetKind::Synthetic => (
                synth_blobs(
                    r.synth_classes,
                    r.synth_train_per_class,
                    r.synth_dim,
                    r.synth_spread,
                    r.synth_seed,
                )?,
                synth_blobs(
                    r.synth_classes,
                    r.synth_test_per_class,
                    r.synth_dim,
                    r.synth_spread,
                    r.synth_seed.wrapping_add(1),
                )?,
            ),
            DatasetKind::Idx => {
                let [ti, tl, vi, vl] = self.idx_paths()?;
                (load_idx(&ti, &tl)?, load_idx(&vi, &vl)?)
            }
        };
        let train = match r.train_limit {
            Some(n) => train.truncated(n),
            None => train,
        };
        let test = match r.test_limit {
            Some(n) => test.truncated(n),
            None => test,
        };
        Ok((train, test))
    }
}
