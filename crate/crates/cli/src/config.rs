//! Flat `key = value` experiment configuration.
//!
//! The format is line-oriented UTF-8 with `#` comments and dotted keys
//! (`data.n_examples = 200`). Unknown keys are rejected, and every value is
//! validated against its module's invariants before any work starts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use prefopt_core::losses::{LossConfig, Method};
use prefopt_core::trainer::{BatchSize, OptimizerKind, TrainConfig};

use prefopt_core::datagen::DatasetSpec;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("unknown key `{key}`")]
    UnknownKey { key: String },
    #[error("missing key `{key}`")]
    MissingKey { key: &'static str },
    #[error("key `{key}`: cannot parse `{value}` as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("key `{key}`: {message}")]
    Invalid { key: String, message: String },
}

/// Every key the config format accepts.
const KNOWN_KEYS: &[&str] = &[
    "data.n_examples",
    "data.vocab_size",
    "data.max_len",
    "data.mode_mass",
    "data.shared_token_rate",
    "data.seed",
    "policy.order",
    "loss.method",
    "loss.beta",
    "loss.gamma",
    "loss.lambda",
    "loss.delta",
    "loss.lambda_w",
    "loss.lambda_l",
    "loss.length_norm",
    "train.learning_rate",
    "train.steps",
    "train.batch_size",
    "train.optimizer",
    "train.seed",
    "train.trace_every",
    "io.dataset",
    "io.checkpoint",
    "diag.bins",
    "gradcheck.instances",
    "gradcheck.seed",
];

/// Parsed raw key-value document.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl std::str::FromStr for ExperimentConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or_else(|| {
                ConfigError::Malformed {
                    line,
                    text: stripped.to_string(),
                }
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey { key });
            }
            if values.insert(key.clone(), value).is_some() {
                return Err(ConfigError::DuplicateKey { line, key });
            }
        }
        Ok(Self { values })
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        text.parse()
    }

    pub fn get(&self, key: &'static str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    fn require(&self, key: &'static str) -> Result<&str, ConfigError> {
        self.get(key).ok_or(ConfigError::MissingKey { key })
    }

    fn parse<T: std::str::FromStr>(
        &self,
        key: &'static str,
        expected: &'static str,
    ) -> Result<T, ConfigError> {
        let value = self.require(key)?;
        value.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expected,
        })
    }

    fn parse_optional<T: std::str::FromStr>(
        &self,
        key: &'static str,
        expected: &'static str,
        default: T,
    ) -> Result<T, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(value) => value.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                expected,
            }),
        }
    }

    /// The `data.*` section as a validated [`DatasetSpec`].
    pub fn dataset_spec(&self) -> Result<DatasetSpec, ConfigError> {
        let spec = DatasetSpec {
            n_examples: self.parse("data.n_examples", "a positive integer")?,
            vocab_size: self.parse("data.vocab_size", "a positive integer")?,
            max_len: self.parse("data.max_len", "a positive integer")?,
            mode_mass: self.parse("data.mode_mass", "a real in (0, 1)")?,
            shared_token_rate: self.parse("data.shared_token_rate", "a real in [0, 1]")?,
            rng_seed: self.parse("data.seed", "a 64-bit unsigned integer")?,
        };
        spec.validate().map_err(|e| {
            let key = match e {
                prefopt_core::datagen::DatagenError::ZeroExamples => "data.n_examples",
                prefopt_core::datagen::DatagenError::VocabTooSmall => "data.vocab_size",
                prefopt_core::datagen::DatagenError::ZeroMaxLen => "data.max_len",
                prefopt_core::datagen::DatagenError::BadModeMass(_) => "data.mode_mass",
                prefopt_core::datagen::DatagenError::BadSharedTokenRate(_) => {
                    "data.shared_token_rate"
                }
                _ => "data",
            };
            ConfigError::Invalid {
                key: key.to_string(),
                message: e.to_string(),
            }
        })?;
        Ok(spec)
    }

    /// The `policy.order` key (default 1, the smallest order with
    /// shared-token coupling between responses).
    pub fn policy_order(&self) -> Result<usize, ConfigError> {
        self.parse_optional("policy.order", "a nonnegative integer", 1)
    }

    /// The `loss.*` section as a validated [`LossConfig`]. Only the keys
    /// consumed by the method are read; a missing consumed key is an error
    /// naming it.
    pub fn loss_config(&self) -> Result<LossConfig, ConfigError> {
        let method = self.method()?;
        let hyper = |key: &'static str| -> Result<f64, ConfigError> {
            self.parse(key, "a real number")
        };
        let built = match method {
            Method::Sft => Ok(LossConfig::sft()),
            Method::SimPer => {
                let ln = self.parse_optional("loss.length_norm", "true or false", true)?;
                Ok(if ln {
                    LossConfig::simper()
                } else {
                    LossConfig::simper_without_length_norm()
                })
            }
            Method::Dpo => LossConfig::dpo(hyper("loss.beta")?),
            Method::Ipo => LossConfig::ipo(hyper("loss.beta")?),
            Method::SimPo => LossConfig::simpo(hyper("loss.beta")?, hyper("loss.gamma")?),
            Method::Kto => LossConfig::kto(
                hyper("loss.beta")?,
                hyper("loss.lambda_w")?,
                hyper("loss.lambda_l")?,
            ),
            Method::Cpo => LossConfig::cpo(hyper("loss.beta")?, hyper("loss.lambda")?),
            Method::Slic => LossConfig::slic(hyper("loss.delta")?, hyper("loss.lambda")?),
        };
        built.map_err(|e| ConfigError::Invalid {
            key: "loss".to_string(),
            message: e.to_string(),
        })
    }

    pub fn method(&self) -> Result<Method, ConfigError> {
        let raw = self.require("loss.method")?;
        parse_method(raw).ok_or_else(|| ConfigError::BadValue {
            key: "loss.method".to_string(),
            value: raw.to_string(),
            expected: "one of sft, simper, dpo, ipo, simpo, kto, cpo, slic",
        })
    }

    /// The `train.*` section as a validated [`TrainConfig`].
    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let batch_size = match self.require("train.batch_size")? {
            "full" => BatchSize::Full,
            other => {
                let n: usize = other.parse().map_err(|_| ConfigError::BadValue {
                    key: "train.batch_size".to_string(),
                    value: other.to_string(),
                    expected: "`full` or a positive integer",
                })?;
                BatchSize::Fixed(n)
            }
        };
        let optimizer = match self.require("train.optimizer")? {
            "sgd" => OptimizerKind::Sgd,
            "adam" => OptimizerKind::Adam,
            other => {
                return Err(ConfigError::BadValue {
                    key: "train.optimizer".to_string(),
                    value: other.to_string(),
                    expected: "`sgd` or `adam`",
                })
            }
        };
        let cfg = TrainConfig {
            learning_rate: self.parse("train.learning_rate", "a nonnegative real")?,
            steps: self.parse("train.steps", "a positive integer")?,
            batch_size,
            optimizer,
            rng_seed: self.parse("train.seed", "a 64-bit unsigned integer")?,
            trace_every: self.parse_optional("train.trace_every", "a positive integer", 100)?,
        };
        cfg.validate().map_err(|e| {
            let key = match e {
                prefopt_core::trainer::TrainError::BadLearningRate(_) => "train.learning_rate",
                prefopt_core::trainer::TrainError::ZeroSteps => "train.steps",
                prefopt_core::trainer::TrainError::ZeroTraceEvery => "train.trace_every",
                prefopt_core::trainer::TrainError::ZeroBatchSize => "train.batch_size",
                _ => "train",
            };
            ConfigError::Invalid {
                key: key.to_string(),
                message: e.to_string(),
            }
        })?;
        Ok(cfg)
    }

    pub fn dataset_path(&self) -> Result<PathBuf, ConfigError> {
        Ok(PathBuf::from(self.require("io.dataset")?))
    }

    pub fn checkpoint_path(&self) -> Result<PathBuf, ConfigError> {
        Ok(PathBuf::from(self.require("io.checkpoint")?))
    }

    pub fn diag_bins(&self) -> Result<usize, ConfigError> {
        self.parse_optional("diag.bins", "a positive integer", 50)
    }

    pub fn gradcheck_instances(&self) -> Result<usize, ConfigError> {
        self.parse_optional("gradcheck.instances", "a positive integer", 100)
    }

    pub fn gradcheck_seed(&self) -> Result<u64, ConfigError> {
        self.parse_optional("gradcheck.seed", "a 64-bit unsigned integer", 20_240_101)
    }
}

fn parse_method(raw: &str) -> Option<Method> {
    match raw.to_ascii_lowercase().as_str() {
        "sft" => Some(Method::Sft),
        "simper" => Some(Method::SimPer),
        "dpo" => Some(Method::Dpo),
        "ipo" => Some(Method::Ipo),
        "simpo" => Some(Method::SimPo),
        "kto" => Some(Method::Kto),
        "cpo" => Some(Method::Cpo),
        "slic" => Some(Method::Slic),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::str::FromStr;

    const FULL: &str = "\
# dataset
data.n_examples = 100
data.vocab_size = 6
data.max_len = 4
data.mode_mass = 0.8
data.shared_token_rate = 0.5
data.seed = 42
policy.order = 1
loss.method = simpo
loss.beta = 2.5
loss.gamma = 1.0
train.learning_rate = 0.5
train.steps = 200
train.batch_size = full
train.optimizer = sgd
train.seed = 7
";

    #[test]
    fn full_config_parses() {
        let cfg = ExperimentConfig::from_str(FULL).unwrap();
        let spec = cfg.dataset_spec().unwrap();
        assert_eq!(spec.n_examples, 100);
        assert_eq!(cfg.policy_order().unwrap(), 1);
        let loss = cfg.loss_config().unwrap();
        assert_eq!(loss.method(), Method::SimPo);
        assert_eq!(loss.beta(), 2.5);
        let train = cfg.train_config().unwrap();
        assert_eq!(train.steps, 200);
        assert_eq!(train.trace_every, 100);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_str("data.n_exampels = 3\n").unwrap_err();
        assert!(err.to_string().contains("data.n_exampels"));
    }

    #[test]
    fn out_of_range_values_name_their_key() {
        let text = FULL.replace("data.mode_mass = 0.8", "data.mode_mass = 1.5");
        let cfg = ExperimentConfig::from_str(&text).unwrap();
        let err = cfg.dataset_spec().unwrap_err();
        assert!(err.to_string().contains("data.mode_mass"), "{err}");
    }

    #[test]
    fn simpo_without_gamma_names_the_missing_key() {
        let text = FULL.replace("loss.gamma = 1.0\n", "");
        let cfg = ExperimentConfig::from_str(&text).unwrap();
        let err = cfg.loss_config().unwrap_err();
        assert!(err.to_string().contains("loss.gamma"), "{err}");
    }

    #[test]
    fn simper_needs_no_numeric_hyperparameters() {
        let text = FULL
            .replace("loss.method = simpo", "loss.method = simper")
            .replace("loss.beta = 2.5\n", "")
            .replace("loss.gamma = 1.0\n", "");
        let cfg = ExperimentConfig::from_str(&text).unwrap();
        let loss = cfg.loss_config().unwrap();
        assert_eq!(loss.method(), Method::SimPer);
        assert!(loss.length_norm());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg =
            ExperimentConfig::from_str("# hello\n\n  data.seed = 9 # trailing\n").unwrap();
        assert_eq!(cfg.get("data.seed"), Some("9"));
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let err = ExperimentConfig::from_str("data.seed = 1\ndata.seed = 2\n").unwrap_err();
        assert!(matches!(err, ConfigError::DuplicateKey { line: 2, .. }));
    }
}
