//! Run configuration file: TOML with `[data]`, `[model]`, `[train]` and
//! `[run]` sections. Every field except `data.path`, `model.kind` and
//! `model.d` has a default, so a canonical rendering lists all settings.
//! Relative `data.path` and `run.out` resolve against the config file's
//! directory.

use std::path::{Path, PathBuf};

use nnmf::data::{splitmix64, SplitSpec};
use nnmf::evaluation::ExperimentConfig;
use nnmf::latent::InitSpec;
use nnmf::model::ModelKind;
use nnmf::optimizer::{LambdaGrid, RmspropConfig, TrainSchedule};
use nnmf::registry::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    /// Tab-separated `user item rating timestamp`, 1-based ids.
    Movielens,
    /// Tab-separated `row col value`, 1-based ids.
    Edges,
    /// As `edges`, with one shared id space for rows and columns.
    EdgesSquare,
    /// Output of `nnmf ingest`.
    Canonical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
    pub format: DataFormat,
}

fn default_feature_std() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: String,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_prime: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_dims: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_sigmoid: Option<bool>,
    #[serde(default = "default_feature_std")]
    pub feature_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lambdas: Vec<f64>,
    /// Fixed `lambda` for `nnmf train`; the grid is searched when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub network_steps: usize,
    pub feature_steps: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let rms = RmspropConfig::default();
        let sched = TrainSchedule::default();
        Self {
            lambdas: LambdaGrid::default().values().to_vec(),
            lambda: None,
            learning_rate: rms.learning_rate,
            rmsprop_decay: rms.decay,
            rmsprop_epsilon: rms.epsilon,
            network_steps: sched.network_steps,
            feature_steps: sched.feature_steps,
            max_epochs: sched.max_epochs,
            patience: sched.patience,
            min_delta: sched.min_delta,
            batch_size: sched.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub test_fraction: f64,
    pub validation_fraction: f64,
    pub repeats: usize,
    /// Concurrent grid points during `lambda` selection.
    pub jobs: usize,
    pub clamp: bool,
    /// Native value range for a logistic output, `[lo, hi]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_range: Option<[f64; 2]>,
    pub out: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            test_fraction: 0.1,
            validation_fraction: 0.02,
            repeats: 5,
            jobs: 1,
            clamp: false,
            target_range: None,
            out: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub run: RunSection,
    /// Directory of the file the config was read from.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn key_error(key: &str, message: impl Into<String>) -> CliError {
    CliError::ConfigKey {
        key: key.to_string(),
        message: message.into(),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].lines().count().max(1));
            CliError::ConfigSyntax(match line {
                Some(l) => format!("line {l}: {}", e.message()),
                None => e.message().to_string(),
            })
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut config = Self::from_toml_str(&text)?;
        config.base_dir = path.parent().map(Path::to_path_buf);
        Ok(config)
    }

    /// `path` resolved against the config file's directory.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        match &self.base_dir {
            Some(dir) if path.is_relative() => dir.join(path),
            _ => path.to_path_buf(),
        }
    }

    pub fn data_path(&self) -> PathBuf {
        self.resolve(&self.data.path)
    }

    /// Canonical TOML: every setting, fixed key order.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Canonical TOML preceded by the code version; written alongside or
    /// inside every output.
    pub fn snapshot(&self) -> String {
        format!("# nnmf {VERSION}\n{}", self.to_toml_string())
    }

    pub fn kind(&self) -> CliResult<ModelKind> {
        self.model
            .kind
            .parse()
            .map_err(|_| key_error("model.kind", format!("unknown model kind '{}'", self.model.kind)))
    }

    pub fn model_config(&self) -> CliResult<ModelConfig> {
        let m = &self.model;
        let need = |v: Option<usize>, key: &str| v.ok_or_else(|| key_error(key, "required for this model kind"));
        let config = match self.kind()? {
            ModelKind::Nnmf => ModelConfig::Nnmf {
                d: m.d,
                d_prime: need(m.d_prime, "model.d_prime")?,
                k: m.k.unwrap_or(1),
                layer_dims: m
                    .layer_dims
                    .clone()
                    .ok_or_else(|| key_error("model.layer_dims", "required for nnmf"))?,
            },
            ModelKind::Pmf => ModelConfig::Pmf { d: m.d },
            ModelKind::BiasedMf => ModelConfig::BiasedMf { d: m.d },
            ModelKind::Ntn => ModelConfig::Ntn {
                d: m.d,
                hidden: need(m.hidden, "model.hidden")?,
                output_sigmoid: m.output_sigmoid.unwrap_or(false),
            },
        };
        config.validate().map_err(|e| key_error("model", e.to_string()))?;
        Ok(config)
    }

    pub fn grid(&self) -> CliResult<LambdaGrid> {
        LambdaGrid::new(self.train.lambdas.clone()).map_err(|e| key_error("train.lambdas", e.to_string()))
    }

    pub fn rmsprop(&self) -> CliResult<RmspropConfig> {
        let cfg = RmspropConfig {
            learning_rate: self.train.learning_rate,
            decay: self.train.rmsprop_decay,
            epsilon: self.train.rmsprop_epsilon,
        };
        cfg.validate()
            .map_err(|e| key_error("train.learning_rate/rmsprop_decay/rmsprop_epsilon", e.to_string()))?;
        Ok(cfg)
    }

    pub fn schedule(&self) -> CliResult<TrainSchedule> {
        let t = &self.train;
        let s = TrainSchedule {
            network_steps: t.network_steps,
            feature_steps: t.feature_steps,
            max_epochs: t.max_epochs,
            patience: t.patience,
            min_delta: t.min_delta,
            batch_size: t.batch_size,
        };
        s.validate().map_err(|e| key_error("train", e.to_string()))?;
        Ok(s)
    }

    pub fn split_spec(&self) -> CliResult<SplitSpec> {
        let s = SplitSpec {
            test_fraction: self.run.test_fraction,
            validation_fraction: self.run.validation_fraction,
            n_repeats: self.run.repeats,
            seed: self.run.seed,
        };
        s.validate().map_err(|e| key_error("run", e.to_string()))?;
        Ok(s)
    }

    /// Initialization seeds are drawn from a stream separate from the
    /// split shuffles.
    pub fn init_spec(&self) -> InitSpec {
        InitSpec {
            feature_std: self.model.feature_std,
            seed: splitmix64(self.run.seed),
        }
    }

    pub fn experiment(&self) -> CliResult<ExperimentConfig> {
        Ok(ExperimentConfig {
            model: self.model_config()?,
            init: self.init_spec(),
            split: self.split_spec()?,
            grid: self.grid()?,
            schedule: self.schedule()?,
            rmsprop: self.rmsprop()?,
            jobs: self.run.jobs.max(1),
            clamp: self.run.clamp,
            target_range: self.run.target_range.map(|[lo, hi]| (lo, hi)),
        })
    }

    pub fn validate(&self) -> CliResult<()> {
        self.experiment()?;
        if !(self.model.feature_std > 0.0) {
            return Err(key_error("model.feature_std", "must be > 0"));
        }
        if let Some(l) = self.train.lambda {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(key_error("train.lambda", "must be finite and >= 0"));
            }
        }
        if let Some([lo, hi]) = self.run.target_range {
            if !(hi > lo) {
                return Err(key_error("run.target_range", "needs lo < hi"));
            }
        }
        if self.run.jobs == 0 {
            return Err(key_error("run.jobs", "must be >= 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[data]
path = "ratings.tsv"
format = "movielens"

[model]
kind = "pmf"
d = 60
"#;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.train.lambdas.len(), 9);
        assert_eq!(c.train.learning_rate, 0.001);
        assert_eq!(c.run.repeats, 5);
        assert_eq!(c.model_config().unwrap(), ModelConfig::Pmf { d: 60 });
    }

    #[test]
    fn canonical_text_round_trips() {
        let c = RunConfig::from_toml_str(MINIMAL).unwrap();
        let text = c.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml_string(), text);
    }

    #[test]
    fn errors_name_the_key() {
        let err = RunConfig::from_toml_str(&MINIMAL.replace("d = 60", "")).unwrap_err();
        assert!(err.to_string().contains("`d`"), "{err}");
        let err = RunConfig::from_toml_str(&MINIMAL.replace("pmf", "nnmf")).unwrap_err();
        assert!(err.to_string().contains("model.d_prime"), "{err}");
        let err = RunConfig::from_toml_str(&format!("{MINIMAL}\n[train]\nlambdas = [1.0, 0.5]\n")).unwrap_err();
        assert!(err.to_string().contains("train.lambdas"), "{err}");
        let err = RunConfig::from_toml_str(&format!("{MINIMAL}\n[run]\nbogus = 1\n")).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }
}
