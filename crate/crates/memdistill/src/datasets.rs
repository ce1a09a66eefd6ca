//! Named datasets: the synthetic Gaussian toy, the bundled MNIST 5k split
//! and arbitrary IDX directories.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use memdistill_core::data::{toy_gaussian, LabeledDataset};
use memdistill_core::rng::{derive_seed, sample_without_replacement, stream};

use crate::error::{Error, Result};
use crate::idx::load_idx;
use crate::zca::{whiten, zca_fit};

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "test-images-idx3-ubyte";
pub const TEST_LABELS: &str = "test-labels-idx1-ubyte";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// `toy`, `mnist5k` or `idx:<dir>`.
    pub name: String,
    pub data_dir: PathBuf,
    /// Random training subset of this size, if set.
    pub subset: Option<usize>,
    pub subset_seed: u64,
    pub zca: bool,
    pub zca_epsilon: f64,
    pub toy: ToyConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            classes: 4,
            dim: 16,
            train_per_class: 100,
            test_per_class: 100,
            separation: 6.0,
            seed: 0,
        }
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            name: "toy".into(),
            data_dir: PathBuf::from("data/mnist5k"),
            subset: None,
            subset_seed: 0,
            zca: false,
            zca_epsilon: crate::zca::DEFAULT_EPSILON,
            toy: ToyConfig::default(),
        }
    }
}

/// Reads `<dir>/{train,test}-{images-idx3,labels-idx1}-ubyte`.
pub fn load_idx_dir(dir: &Path, name: &str) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut train = load_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
    let mut test = load_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
    let classes = train.num_classes.max(test.num_classes);
    train.num_classes = classes;
    test.num_classes = classes;
    train.name = format!("{}/train", name);
    test.name = format!("{}/test", name);
    Ok((train, test))
}

/// Train and test splits with the configured subset and whitening.
pub fn load(cfg: &DatasetConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let (mut train, mut test) = match cfg.name.as_str() {
        "toy" => {
            let t = &cfg.toy;
            let mut train = toy_gaussian(t.classes, t.dim, t.train_per_class, t.separation, t.seed)?;
            let mut test = toy_gaussian(
                t.classes,
                t.dim,
                t.test_per_class,
                t.separation,
                derive_seed(t.seed, "toy-test", 0),
            )?;
            train.name = "toy/train".into();
            test.name = "toy/test".into();
            (train, test)
        }
        "mnist5k" => load_idx_dir(&cfg.data_dir, "mnist5k")?,
        other => match other.strip_prefix("idx:") {
            Some(dir) => load_idx_dir(Path::new(dir), other)?,
            None => {
                return Err(Error::Other(format!(
                    "unknown dataset '{}' (expected toy, mnist5k or idx:<dir>)",
                    other
                )))
            }
        },
    };
    if let Some(n) = cfg.subset {
        if n > train.len() {
            return Err(Error::Other(format!("subset of {} from {} training images", n, train.len())));
        }
        let mut idx = sample_without_replacement(train.len(), n, &mut stream(cfg.subset_seed, "subset", 0));
        idx.sort_unstable();
        train = train.subset(&idx);
        train.preprocessing.push(format!("subset({}, seed {})", n, cfg.subset_seed));
    }
    if cfg.zca {
        let z = zca_fit(&train, cfg.zca_epsilon)?;
        train = whiten(&train, &z)?;
        test = whiten(&test, &z)?;
    }
    Ok((train, test))
}
