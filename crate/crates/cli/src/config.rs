use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sbnn_core::dataio::{self, Dataset};
use sbnn_core::nn::{Budget, OmegaMode, TrainConfig};

use crate::Failure;

/// Keys accepted in a `--config` TOML file. Every key is optional and every
/// flag of the same name overrides it.
///
/// ```toml
/// data = "cifar/data_batch_1.bin"   # or: synthetic = true
/// format = "cifar"                  # cifar | idx
/// labels = "train-labels-idx1-ubyte" # idx only
/// samples = 512                     # synthetic only
/// classes = 4                       # synthetic only
/// difficulty = 2.0                  # synthetic only
/// epochs = 100
/// batch = 32
/// lr = 0.01
/// gamma = 0.1
/// sparsity = 0.95                   # or: hstar = 0.3
/// seed = 0
/// omega = "learned"                 # analytic | learned | pm1
/// width = 4
/// augment = false
/// ```
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data: Option<PathBuf>,
    pub format: Option<String>,
    pub labels: Option<PathBuf>,
    pub synthetic: Option<bool>,
    pub samples: Option<usize>,
    pub classes: Option<usize>,
    pub difficulty: Option<f64>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub gamma: Option<f64>,
    pub sparsity: Option<f64>,
    pub hstar: Option<f64>,
    pub seed: Option<u64>,
    pub omega: Option<String>,
    pub width: Option<usize>,
    pub augment: Option<bool>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Cifar,
    Idx,
}

impl std::str::FromStr for Format {
    type Err = Failure;
    fn from_str(s: &str) -> Result<Self, Failure> {
        match s {
            "cifar" => Ok(Format::Cifar),
            "idx" => Ok(Format::Idx),
            other => Err(Failure::Config(format!("unknown data format '{other}' (cifar|idx)"))),
        }
    }
}

/// Where samples come from, after merging file and flags.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    File { data: PathBuf, format: Format, labels: Option<PathBuf> },
    Synthetic { samples: usize, classes: usize, difficulty: f64, seed: u64 },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset, Failure> {
        let data = match self {
            DataSource::File { data, format: Format::Cifar, .. } => dataio::load_cifar10_binary(data),
            DataSource::File { data, format: Format::Idx, labels } => {
                let labels = labels.as_ref().ok_or_else(|| Failure::Config("idx data needs --labels".into()))?;
                dataio::load_idx(data, labels)
            }
            DataSource::Synthetic { samples, classes, difficulty, seed } => {
                dataio::synthetic_classification(*seed, *samples, *classes, *difficulty)
            }
        };
        data.map_err(|e| Failure::Data(e.to_string()))
    }
}

/// Data flags shared by every command that reads samples.
#[derive(Debug, Default, Clone)]
pub struct DataFlags {
    pub data: Option<PathBuf>,
    pub format: Option<String>,
    pub labels: Option<PathBuf>,
    pub synthetic: bool,
    pub samples: Option<usize>,
    pub classes: Option<usize>,
    pub difficulty: Option<f64>,
}

pub fn resolve_data(flags: &DataFlags, file: &FileConfig, seed: u64) -> Result<Option<DataSource>, Failure> {
    let path = flags.data.clone().or_else(|| file.data.clone());
    let synthetic = flags.synthetic || (flags.data.is_none() && file.synthetic.unwrap_or(false));
    if synthetic {
        return Ok(Some(DataSource::Synthetic {
            samples: flags.samples.or(file.samples).unwrap_or(512),
            classes: flags.classes.or(file.classes).unwrap_or(4),
            difficulty: flags.difficulty.or(file.difficulty).unwrap_or(2.0),
            seed,
        }));
    }
    let Some(data) = path else { return Ok(None) };
    let format = match flags.format.as_ref().or(file.format.as_ref()) {
        Some(f) => f.parse()?,
        None => Format::Cifar,
    };
    Ok(Some(DataSource::File { data, format, labels: flags.labels.clone().or_else(|| file.labels.clone()) }))
}

/// Training flags; `None` falls back to the config file, then the default.
#[derive(Debug, Default, Clone)]
pub struct TrainFlags {
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub gamma: Option<f64>,
    pub sparsity: Option<f64>,
    pub hstar: Option<f64>,
    pub seed: Option<u64>,
    pub omega: Option<String>,
    pub width: Option<usize>,
    pub augment: bool,
}

/// Everything a training run depends on; logged so the run can be repeated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedTrain {
    pub data: DataSource,
    pub width: usize,
    pub train: TrainConfig,
}

pub fn resolve_train(flags: &TrainFlags, data: &DataFlags, file: &FileConfig) -> Result<ResolvedTrain, Failure> {
    let defaults = TrainConfig::default();
    let seed = flags.seed.or(file.seed).unwrap_or(defaults.seed);
    let sparsity = flags.sparsity.or(file.sparsity);
    let hstar = flags.hstar.or(file.hstar);
    let budget = match (sparsity, hstar) {
        (Some(_), Some(_)) => return Err(Failure::Config("give either sparsity or hstar, not both".into())),
        (Some(s), None) => Budget::Sparsity(s),
        (None, Some(h)) => Budget::HStar(h),
        (None, None) => defaults.budget,
    };
    let omega_mode = match flags.omega.as_ref().or(file.omega.as_ref()) {
        Some(s) => s.parse::<OmegaMode>().map_err(Failure::Config)?,
        None => defaults.omega_mode,
    };
    let train = TrainConfig {
        epochs: flags.epochs.or(file.epochs).unwrap_or(defaults.epochs),
        batch_size: flags.batch.or(file.batch).unwrap_or(defaults.batch_size),
        learning_rate: flags.lr.or(file.lr).unwrap_or(defaults.learning_rate),
        gamma: flags.gamma.or(file.gamma).unwrap_or(defaults.gamma),
        budget,
        seed,
        omega_mode,
        augment: flags.augment || file.augment.unwrap_or(false),
        ..defaults
    };
    train.validate().map_err(|e| Failure::Config(e.to_string()))?;
    let width = flags.width.or(file.width).unwrap_or(4);
    if width == 0 {
        return Err(Failure::Config("width must be positive".into()));
    }
    let data = resolve_data(data, file, seed)?
        .ok_or_else(|| Failure::Config("no data: give --data <path> or --synthetic".into()))?;
    Ok(ResolvedTrain { data, width, train })
}

/// Worker count: `SBNN_THREADS` if set, else the available parallelism.
pub fn worker_threads() -> Result<usize, Failure> {
    match std::env::var("SBNN_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Failure::Config(format!("SBNN_THREADS={v} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}
