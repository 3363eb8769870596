//! Experiment configuration: one JSON file fully determines an experiment.
//! Unknown keys are rejected, everything is validated before any run, and a
//! hash of the canonical serialized form is stamped into every output.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_blobs, load_features, Dataset};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::training::{ClassifierKind, DataProvider, ModelSpec, TrainConfig};

// ---------------------------------------------------------------------------
// Data

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Synthetic Gaussian blobs standing in for pre-extracted CNN features.
    Blobs {
        classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        noise_scale: f64,
        seed: u64,
        /// Redraw the samples each round (seed + round); otherwise only the
        /// model initialization and shuffling vary between rounds.
        #[serde(default = "default_true")]
        resample_per_round: bool,
        /// Training-set reduction: remove this many training samples per
        /// class each round.
        #[serde(default)]
        reduce_per_class: usize,
    },
    /// Pre-extracted features from a CSV file (label, f0, f1, ...).
    File {
        path: String,
        split_seed: u64,
        /// Re-draw the per-class even split every round; otherwise split
        /// once with `split_seed` and vary only the model seeds.
        #[serde(default = "default_true")]
        resplit_per_round: bool,
        #[serde(default)]
        reduce_per_class: usize,
    },
}

fn default_true() -> bool {
    true
}

impl DataConfig {
    pub fn reduce_per_class(&self) -> usize {
        match *self {
            DataConfig::Blobs { reduce_per_class, .. }
            | DataConfig::File { reduce_per_class, .. } => reduce_per_class,
        }
    }

    pub fn with_reduction(&self, n: usize) -> DataConfig {
        let mut out = self.clone();
        match &mut out {
            DataConfig::Blobs { reduce_per_class, .. }
            | DataConfig::File { reduce_per_class, .. } => *reduce_per_class = n,
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DataConfig::Blobs {
                classes,
                dim,
                train_per_class,
                test_per_class,
                noise_scale,
                reduce_per_class,
                ..
            } => {
                if *classes < 2 {
                    return Err(Error::Config("data.classes must be >= 2".into()));
                }
                if dim < classes {
                    return Err(Error::Config(format!(
                        "data.dim {dim} must be at least data.classes {classes}"
                    )));
                }
                if *train_per_class == 0 || *test_per_class == 0 {
                    return Err(Error::Config(
                        "data.train_per_class and data.test_per_class must be >= 1".into(),
                    ));
                }
                if *noise_scale < 0.0 {
                    return Err(Error::Config("data.noise_scale must be >= 0".into()));
                }
                if reduce_per_class >= train_per_class {
                    return Err(Error::Config(format!(
                        "data.reduce_per_class {reduce_per_class} would empty classes of {train_per_class} training samples"
                    )));
                }
                Ok(())
            }
            DataConfig::File { path, .. } => {
                if !Path::new(path).exists() {
                    return Err(Error::Config(format!("data.path {path:?} does not exist")));
                }
                Ok(())
            }
        }
    }

    /// Build the per-round dataset source. File-backed data is loaded once,
    /// up front.
    pub fn provider(&self) -> Result<ExperimentData> {
        match self {
            DataConfig::Blobs { .. } => Ok(ExperimentData {
                config: self.clone(),
                file_data: None,
            }),
            DataConfig::File { path, .. } => {
                let data = load_features(path)?;
                for class in 0..data.class_count() {
                    let count = data.labels().iter().filter(|&&l| l == class).count();
                    if count < 2 {
                        return Err(Error::Config(format!(
                            "class {class} has {count} samples in {path:?}; need >= 2 to split"
                        )));
                    }
                }
                Ok(ExperimentData {
                    config: self.clone(),
                    file_data: Some(data),
                })
            }
        }
    }
}

/// Realizes a `DataConfig` round by round.
pub struct ExperimentData {
    config: DataConfig,
    file_data: Option<Dataset>,
}

impl ExperimentData {
    pub fn dim(&self) -> usize {
        match &self.config {
            DataConfig::Blobs { dim, .. } => *dim,
            DataConfig::File { .. } => self.file_data.as_ref().expect("loaded").dim(),
        }
    }

    pub fn class_count(&self) -> usize {
        match &self.config {
            DataConfig::Blobs { classes, .. } => *classes,
            DataConfig::File { .. } => self.file_data.as_ref().expect("loaded").class_count(),
        }
    }

    pub fn warnings(&self) -> Vec<String> {
        match &self.file_data {
            Some(data) => {
                let empty = data.empty_classes();
                if empty.is_empty() {
                    Vec::new()
                } else {
                    vec![format!(
                        "classes {empty:?} have no samples; labels are sparse in the input file"
                    )]
                }
            }
            None => Vec::new(),
        }
    }
}

impl DataProvider for ExperimentData {
    fn dataset_for_round(&self, round: usize) -> Result<Dataset> {
        match &self.config {
            DataConfig::Blobs {
                classes,
                dim,
                train_per_class,
                test_per_class,
                noise_scale,
                seed,
                resample_per_round,
                reduce_per_class,
            } => {
                let round_seed = if *resample_per_round {
                    seed + round as u64
                } else {
                    *seed
                };
                let data = generate_blobs(
                    *classes,
                    *dim,
                    *train_per_class,
                    *test_per_class,
                    *noise_scale,
                    round_seed,
                )?;
                data.reduce_training(*reduce_per_class, round_seed ^ 0x5eed_0000)
            }
            DataConfig::File {
                split_seed,
                resplit_per_round,
                reduce_per_class,
                ..
            } => {
                let data = self.file_data.as_ref().expect("loaded");
                let round_seed = if *resplit_per_round {
                    split_seed + round as u64
                } else {
                    *split_seed
                };
                let split = data.resplit_even(round_seed)?;
                split.reduce_training(*reduce_per_class, round_seed ^ 0x5eed_0000)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Arms

/// One comparison arm: an architecture/loss variant trained under the shared
/// recipe. `snapshot_count` switches the arm to the cyclic-annealing
/// snapshot protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub name: String,
    pub hidden_widths: Vec<usize>,
    pub classifier: ClassifierKind,
    #[serde(default)]
    pub hidden_dropout: Option<f64>,
    #[serde(default)]
    pub hidden_dropconnect: Option<f64>,
    pub loss: LossKind,
    #[serde(default)]
    pub classifier_bias: bool,
    #[serde(default)]
    pub snapshot_count: Option<usize>,
}

impl ArmConfig {
    pub fn model_spec(&self, input_dim: usize) -> ModelSpec {
        ModelSpec {
            input_dim,
            hidden_widths: self.hidden_widths.clone(),
            classifier: self.classifier,
            hidden_dropout: self.hidden_dropout,
            hidden_dropconnect: self.hidden_dropconnect,
            loss: self.loss.clone(),
            classifier_bias: self.classifier_bias,
        }
    }

    /// The shared recipe with this arm's snapshot override applied.
    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        let mut config = base.clone();
        if self.snapshot_count.is_some() {
            config.snapshot_count = self.snapshot_count;
        }
        config
    }
}

// ---------------------------------------------------------------------------
// Experiment

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub rounds: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub arms: Vec<ArmConfig>,
}

fn default_workers() -> usize {
    1
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.rounds < 2 {
            return Err(Error::Config(format!("rounds must be >= 2, got {}", self.rounds)));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if self.arms.is_empty() {
            return Err(Error::Config("at least one arm is required".into()));
        }
        let mut names = std::collections::HashSet::new();
        for arm in &self.arms {
            if arm.name.is_empty() {
                return Err(Error::Config("arm names must not be empty".into()));
            }
            if !names.insert(arm.name.as_str()) {
                return Err(Error::Config(format!("duplicate arm name {:?}", arm.name)));
            }
            arm.train_config(&self.train)
                .validate()
                .map_err(|e| Error::Config(format!("arm {:?}: {e}", arm.name)))?;
        }
        // Validating the model needs the data dimensions; blobs know them
        // statically, file-backed data is checked when the provider loads.
        if let DataConfig::Blobs { dim, classes, .. } = self.data {
            for arm in &self.arms {
                arm.model_spec(dim)
                    .validate(classes)
                    .map_err(|e| Error::Config(format!("arm {:?}: {e}", arm.name)))?;
            }
        }
        Ok(())
    }

    /// Hash of the canonical serialized config; stamped into every output.
    pub fn hash(&self) -> String {
        hash_of(self)
    }
}

/// Hex SHA-256 of a value's canonical JSON form.
pub fn hash_of<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_string(value).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerKind;

    fn blobs_config() -> ExperimentConfig {
        ExperimentConfig {
            data: DataConfig::Blobs {
                classes: 4,
                dim: 16,
                train_per_class: 8,
                test_per_class: 4,
                noise_scale: 0.4,
                seed: 9,
                resample_per_round: true,
                reduce_per_class: 0,
            },
            train: TrainConfig {
                epochs: 10,
                batch_size: 8,
                optimizer: OptimizerKind::Rmsprop {
                    lr: 0.001,
                    smoothing: 0.99,
                    epsilon: 1e-8,
                },
                schedule: None,
                snapshot_count: None,
                seed: 5,
            },
            rounds: 2,
            workers: 1,
            arms: vec![
                ArmConfig {
                    name: "fc".into(),
                    hidden_widths: vec![8],
                    classifier: ClassifierKind::Fc,
                    hidden_dropout: None,
                    hidden_dropconnect: None,
                    loss: LossKind::CrossEntropy,
                    classifier_bias: false,
                    snapshot_count: None,
                },
                ArmConfig {
                    name: "os".into(),
                    hidden_widths: vec![8],
                    classifier: ClassifierKind::Osl,
                    hidden_dropout: None,
                    hidden_dropconnect: None,
                    loss: LossKind::CrossEntropy,
                    classifier_bias: false,
                    snapshot_count: None,
                },
            ],
        }
    }

    #[test]
    fn valid_config_round_trips_and_hashes_stably() {
        let config = blobs_config();
        config.validate().unwrap();
        let json = serde_json::to_string_pretty(&config).unwrap();
        let reparsed: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(config, reparsed);
        assert_eq!(config.hash(), reparsed.hash());
        assert_eq!(config.hash().len(), 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut value = serde_json::to_value(blobs_config()).unwrap();
        value["mystery"] = serde_json::json!(1);
        let err = serde_json::from_value::<ExperimentConfig>(value).unwrap_err();
        assert!(err.to_string().contains("mystery"));
    }

    #[test]
    fn large_margin_on_osl_arm_is_a_config_error() {
        let mut config = blobs_config();
        config.arms[1].loss = LossKind::LargeMargin {
            margin: 2,
            lambda_start: 100.0,
            lambda_decay: 0.99,
            lambda_floor: 0.1,
        };
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("os"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn duplicate_arm_names_rejected() {
        let mut config = blobs_config();
        config.arms[1].name = "fc".into();
        assert!(config.validate().is_err());
    }

    #[test]
    fn blob_provider_is_deterministic_and_respects_resampling() {
        let config = blobs_config();
        let provider = config.data.provider().unwrap();
        let a = provider.dataset_for_round(0).unwrap();
        let b = provider.dataset_for_round(0).unwrap();
        assert_eq!(a.features().data(), b.features().data());
        let c = provider.dataset_for_round(1).unwrap();
        assert_ne!(a.features().data(), c.features().data());

        let fixed = DataConfig::Blobs {
            classes: 4,
            dim: 16,
            train_per_class: 8,
            test_per_class: 4,
            noise_scale: 0.4,
            seed: 9,
            resample_per_round: false,
            reduce_per_class: 0,
        };
        let provider = fixed.provider().unwrap();
        let a = provider.dataset_for_round(0).unwrap();
        let b = provider.dataset_for_round(3).unwrap();
        assert_eq!(a.features().data(), b.features().data());
    }

    #[test]
    fn file_provider_resplits_per_round() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feats.csv");
        let data = generate_blobs(3, 6, 6, 4, 0.3, 3).unwrap();
        crate::data::write_features(&path, &data).unwrap();

        let config = DataConfig::File {
            path: path.display().to_string(),
            split_seed: 11,
            resplit_per_round: true,
            reduce_per_class: 0,
        };
        let provider = config.provider().unwrap();
        assert_eq!(provider.dim(), 6);
        assert_eq!(provider.class_count(), 3);
        let r0 = provider.dataset_for_round(0).unwrap();
        let r1 = provider.dataset_for_round(1).unwrap();
        r0.validate_for_training().unwrap();
        r1.validate_for_training().unwrap();
        assert_ne!(r0.split(), r1.split());
        // Features are shared; only tags move.
        assert_eq!(r0.features().data(), r1.features().data());
    }

    #[test]
    fn blob_validation_catches_bad_geometry() {
        let bad = DataConfig::Blobs {
            classes: 8,
            dim: 4,
            train_per_class: 5,
            test_per_class: 5,
            noise_scale: 0.2,
            seed: 1,
            resample_per_round: true,
            reduce_per_class: 0,
        };
        assert!(bad.validate().is_err());
    }
}
