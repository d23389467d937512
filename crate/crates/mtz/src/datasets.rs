//! Dataset files: IDX (MNIST) on disk and synthetic task specs in TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use mtz_core::data::{self, Dataset, IdxError, Split, SyntheticTaskSpec, TaskData};

/// Environment variable overriding the default data directory.
pub const DATA_DIR_ENV: &str = "MTZ_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data/mnist";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Idx {
        path: String,
        #[source]
        source: IdxError,
    },
    #[error("{path}: {message}")]
    Spec { path: String, message: String },
    #[error("no file named {names} in {dir}")]
    Missing { dir: String, names: String },
    #[error(transparent)]
    Model(#[from] mtz_core::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Explicit directory, else `$MTZ_DATA_DIR`, else `data/mnist`.
pub fn data_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads an image file and a label file into one dataset (pixels scaled to `[0, 1]`).
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let img = data::parse_idx_images(&read(images)?).map_err(|source| DataError::Idx {
        path: images.display().to_string(),
        source,
    })?;
    let lab = data::parse_idx_labels(&read(labels)?).map_err(|source| DataError::Idx {
        path: labels.display().to_string(),
        source,
    })?;
    if img.count() != lab.len() {
        return Err(DataError::Idx {
            path: labels.display().to_string(),
            source: IdxError::CountMismatch {
                images: img.count(),
                labels: lab.len(),
            },
        });
    }
    Ok(data::idx_dataset(&img, &lab, split)?)
}

fn find(dir: &Path, stem: &str) -> Result<PathBuf> {
    let dotted = stem.replacen("-idx", ".idx", 1);
    let names = [stem.to_string(), dotted];
    names
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| DataError::Missing {
            dir: dir.display().to_string(),
            names: names.join(" or "),
        })
}

/// Loads the MNIST train and test splits from the standard IDX file names.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &find(dir, "train-images-idx3-ubyte")?,
        &find(dir, "train-labels-idx1-ubyte")?,
        Split::Train,
    )?;
    let test = load_idx(
        &find(dir, "t10k-images-idx3-ubyte")?,
        &find(dir, "t10k-labels-idx1-ubyte")?,
        Split::Test,
    )?;
    Ok((train, test))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    task: Vec<TaskEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskEntry {
    name: String,
    seed: u64,
    trunk_seed: u64,
    input_dim: usize,
    classes: usize,
    trunk: Vec<usize>,
    #[serde(default)]
    label_noise: f64,
    train_samples: usize,
    test_samples: usize,
}

/// A named synthetic task with its generated data.
#[derive(Clone, Debug)]
pub struct NamedTask {
    pub name: String,
    pub data: TaskData,
}

/// Parses a TOML list of `[[task]]` tables and generates every task.
pub fn parse_synthetic(text: &str, origin: &str) -> Result<Vec<NamedTask>> {
    let file: SpecFile = toml::from_str(text).map_err(|e| DataError::Spec {
        path: origin.to_string(),
        message: e.to_string(),
    })?;
    let specs: Vec<SyntheticTaskSpec> = file
        .task
        .iter()
        .map(|t| SyntheticTaskSpec {
            seed: t.seed,
            trunk_seed: t.trunk_seed,
            input_dim: t.input_dim,
            classes: t.classes,
            trunk: t.trunk.clone(),
            label_noise: t.label_noise,
            train_samples: t.train_samples,
            test_samples: t.test_samples,
        })
        .collect();
    let data = data::gen_correlated_tasks(&specs)?;
    Ok(file
        .task
        .into_iter()
        .zip(data)
        .map(|(t, data)| NamedTask { name: t.name, data })
        .collect())
}

pub fn load_synthetic(path: &Path) -> Result<Vec<NamedTask>> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_synthetic(&text, &path.display().to_string())
}
