//! Experiment spec files: parsing, validation and dataset resolution.

use std::path::{Path, PathBuf};

use glonet::data::{self, Dataset, MnistFiles, SyntheticSpec};
use glonet::train::cell_config;
use glonet::{BnConfig, Family, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable naming the dataset cache directory.
pub const DATA_DIR_ENV: &str = "GLONET_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Sgemm {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        checksum: Option<String>,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default)]
        split_seed: u64,
    },
    Mnist {
        dir: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        checksum: Option<String>,
    },
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub depth_blocks: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bn: Option<BnConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub families: Vec<Family>,
    pub depths: Vec<usize>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_width() -> usize {
    16
}

/// Command-line values that take precedence over the spec file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub out: Option<PathBuf>,
}

impl ExperimentSpec {
    /// Reads `path`, resolves dataset paths against its directory, then
    /// applies `overrides`.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Lib(glonet::Error::Io(e)))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let mut spec: ExperimentSpec = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            CliError::Validation(format!("{}: {field}: {}", path.display(), e.inner()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        spec.dataset.resolve_paths(base);
        spec.apply(overrides);
        Ok(spec)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(lr) = o.lr {
            self.train.lr = lr;
        }
        if let Some(b) = o.batch_size {
            self.train.batch_size = b;
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
    }

    /// Checks everything that does not need the dataset. All problems are
    /// reported together, each prefixed by its field path.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut problems = Vec::new();
        if self.seeds.is_empty() {
            problems.push("seeds: must not be empty".to_string());
        }
        if let Err(e) = self.train.validate() {
            problems.push(format!("train: {}", bare(&e)));
        }
        // Input dim and head are placeholders; only the architecture is checked here.
        let model = self.model_config_for(self.model.family, self.model.depth_blocks, 1, glonet::HeadKind::Regression, 0);
        if let Err(e) = model.validate() {
            problems.push(format!("model: {}", bare(&e)));
        }
        if let Some(sw) = &self.sweep {
            for &family in &sw.families {
                for &depth in &sw.depths {
                    let cfg = self.model_config_for(family, depth, 1, glonet::HeadKind::Regression, 0);
                    if let Err(e) = cfg.validate() {
                        problems.push(format!("sweep: {family} at depth {depth}: {}", bare(&e)));
                    }
                }
            }
            if self.model.bn.is_some() {
                problems.push("model.bn: custom batch-norm settings are not supported in sweeps".into());
            }
            if sw.families.is_empty() {
                problems.push("sweep.families: must not be empty".into());
            }
            if sw.depths.is_empty() {
                problems.push("sweep.depths: must not be empty".into());
            }
        }
        if let DatasetSpec::Sgemm { test_fraction, .. } = &self.dataset {
            if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                problems.push(format!("dataset.test_fraction: must lie in (0, 1), got {test_fraction}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(problems.join("\n")))
        }
    }

    fn model_config_for(&self, family: Family, depth: usize, input_dim: usize, head: glonet::HeadKind, seed: u64) -> ModelConfig {
        let mut cfg = ModelConfig::new(family, depth, input_dim, head)
            .with_width(self.model.width)
            .with_seed(seed);
        if let Some(bn) = self.model.bn {
            cfg.bn = bn;
        }
        cfg
    }

    /// Model config of the single-model section for `dataset`.
    pub fn model_config(&self, dataset: &Dataset, seed: u64) -> ModelConfig {
        let mut cfg = cell_config(dataset, self.model.family, self.model.depth_blocks, self.model.width, seed);
        if let Some(bn) = self.model.bn {
            cfg.bn = bn;
        }
        cfg
    }
}

impl DatasetSpec {
    fn resolve_paths(&mut self, base: &Path) {
        match self {
            DatasetSpec::Sgemm { path, .. } => *path = base.join(&*path),
            DatasetSpec::Mnist { dir, .. } => *dir = base.join(&*dir),
            DatasetSpec::Synthetic(_) => {}
        }
    }

    /// Loads the dataset, going through the cache directory when one is set.
    pub fn load(&self) -> Result<Dataset, CliError> {
        let cache_dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
        match self {
            DatasetSpec::Sgemm {
                path,
                checksum,
                test_fraction,
                split_seed,
            } => {
                let sha = data::file_sha256(path)?;
                if let Some(expected) = checksum {
                    data::verify_checksum(path, expected)?;
                }
                let key = format!("sgemm-{}-{test_fraction}-{split_seed}.gnds", &sha[..16]);
                cached(cache_dir.as_deref(), &key, || data::load_sgemm_with(path, *test_fraction, *split_seed))
            }
            DatasetSpec::Mnist { dir, checksum } => {
                let files = MnistFiles::in_dir(dir);
                let mut parts = String::new();
                for f in [&files.train_images, &files.train_labels, &files.test_images, &files.test_labels] {
                    parts.push_str(&data::file_sha256(f)?[..8]);
                }
                let ds = cached(cache_dir.as_deref(), &format!("mnist-{parts}.gnds"), || data::load_mnist(&files))?;
                if let Some(expected) = checksum {
                    let actual = ds.meta.checksum.as_deref().unwrap_or("");
                    if !actual.eq_ignore_ascii_case(expected.trim()) {
                        return Err(CliError::Validation(format!(
                            "dataset.checksum: expected {expected}, got {actual}"
                        )));
                    }
                }
                Ok(ds)
            }
            DatasetSpec::Synthetic(s) => Ok(data::synthetic_regression(s)?),
        }
    }
}

fn cached(dir: Option<&Path>, key: &str, load: impl FnOnce() -> glonet::Result<Dataset>) -> Result<Dataset, CliError> {
    let Some(dir) = dir else { return Ok(load()?) };
    let path = dir.join(key);
    if path.exists() {
        match Dataset::load_cache(&path) {
            Ok(ds) => return Ok(ds),
            Err(e) => eprintln!("warning: ignoring unreadable cache {}: {e}", path.display()),
        }
    }
    let ds = load()?;
    std::fs::create_dir_all(dir).map_err(glonet::Error::from)?;
    ds.save_cache(&path)?;
    Ok(ds)
}

/// Error message without the variant prefix added by `Display`.
fn bare(e: &glonet::Error) -> String {
    match e {
        glonet::Error::Config(m) | glonet::Error::Usage(m) => m.clone(),
        other => other.to_string(),
    }
}
