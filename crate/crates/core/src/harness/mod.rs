//! Run configuration, data loading, the training loop and artifact export.

mod ablation;
mod export;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, mnist_paths, split_train_val, DatasetVariant, MnistSet, PermutationSpec, CLASSES};
use crate::kafgate::GateVariant;
use crate::model::ModelConfig;
use crate::optim::AdamConfig;
use crate::{Error, Result};

pub use ablation::{run_ablation, AblationArm, AblationRun, AblationSummary, ABLATION_ARMS};
pub use export::{
    export_gamma_histogram, export_gate_shapes, GammaHistogram, GateName, Grid, ShapeExport, ShapeRow, ShapeSource,
};
pub use train::{
    evaluate, evaluate_checkpoint, measure_overhead, time_iterations, train, train_on, OverheadReport, RunSummary,
    SplitName, METRICS_HEADER, SUMMARY_SCHEMA_VERSION,
};

/// Environment variable naming the directory with the four MNIST IDX files.
pub const MNIST_DIR_ENV: &str = "KAFGRU_MNIST_DIR";

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetVariant,
    pub variant: GateVariant,
    pub hidden_size: usize,
    pub dict_size: usize,
    pub dict_lo: f64,
    pub dict_hi: f64,
    pub ridge_epsilon: f64,
    /// Standard deviation of the mixing coefficients under random init.
    pub random_alpha_scale: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub eval_every: u64,
    pub patience: u64,
    /// Hard cap on optimizer steps, on top of early stopping.
    pub max_iterations: Option<u64>,
    /// Size of the validation split taken from the end of the training file.
    pub val_count: usize,
    /// Use only the first `n` training / validation / test elements.
    pub train_limit: Option<usize>,
    pub val_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub eval_batch_size: usize,
    pub weight_seed: u64,
    pub shuffle_seed: u64,
    pub permutation_seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Progress lines on stderr.
    pub verbose: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetVariant::RowMnist,
            variant: GateVariant::KAF,
            hidden_size: 100,
            dict_size: 10,
            dict_lo: -4.0,
            dict_hi: 4.0,
            ridge_epsilon: 1e-4,
            random_alpha_scale: 0.3,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            batch_size: 32,
            adam: AdamConfig::default(),
            clip_norm: 1.0,
            eval_every: 25,
            patience: 500,
            max_iterations: None,
            val_count: 10_000,
            train_limit: None,
            val_limit: None,
            test_limit: None,
            eval_batch_size: 500,
            weight_seed: 0,
            shuffle_seed: 0,
            permutation_seed: 0,
            data_dir: default_data_dir(),
            out_dir: PathBuf::from("runs/default"),
            verbose: false,
        }
    }
}

/// `$KAFGRU_MNIST_DIR`, or `data/mnist` when unset.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os(MNIST_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data/mnist"))
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
    }

    /// Model settings for `rows x cols` images.
    pub fn model_config(&self, rows: usize, cols: usize) -> ModelConfig {
        ModelConfig {
            input_size: self.dataset.layout(rows, cols).1,
            hidden_size: self.hidden_size,
            classes: CLASSES,
            variant: self.variant,
            dict_size: self.dict_size,
            dict_lo: self.dict_lo,
            dict_hi: self.dict_hi,
            ridge_epsilon: self.ridge_epsilon,
            random_alpha_scale: self.random_alpha_scale,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 {
            return Err(Error::Usage("eval_every must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Usage(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Usage("eval batch size must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Usage(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

/// Train / validation / test sets plus the pixel order for `pp-mnist`.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: MnistSet,
    pub val: MnistSet,
    pub test: MnistSet,
    pub permutation: Option<PermutationSpec>,
}

impl Splits {
    /// Applies the split, the subset limits and the permutation to raw sets.
    pub fn from_sets(cfg: &RunConfig, train_file: &MnistSet, test_file: MnistSet) -> Result<Self> {
        let (train, val) = split_train_val(train_file, cfg.val_count)?;
        let limit = |set: MnistSet, n: Option<usize>| match n {
            Some(n) => set.take(n),
            None => set,
        };
        let permutation = match cfg.dataset {
            DatasetVariant::PermutedPixelMnist => {
                Some(PermutationSpec::from_seed(cfg.permutation_seed, train_file.pixels_per_image()))
            }
            _ => None,
        };
        Ok(Self {
            train: limit(train, cfg.train_limit),
            val: limit(val, cfg.val_limit),
            test: limit(test_file, cfg.test_limit),
            permutation,
        })
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let (ti, tl) = mnist_paths(&cfg.data_dir, true);
        let (ei, el) = mnist_paths(&cfg.data_dir, false);
        let train_file = load_idx(&ti, &tl).map_err(|e| with_hint(e, &cfg.data_dir))?;
        let test_file = load_idx(&ei, &el).map_err(|e| with_hint(e, &cfg.data_dir))?;
        Self::from_sets(cfg, &train_file, test_file)
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.train.image_rows(), self.train.image_cols())
    }
}

fn with_hint(e: Error, dir: &Path) -> Error {
    match e {
        Error::Io(io) => Error::Data(format!(
            "cannot read MNIST from {} ({io}); point --data-dir or {MNIST_DIR_ENV} at the IDX files",
            dir.display()
        )),
        other => other,
    }
}
