//! Experiment configuration: a TOML file whose every key is optional,
//! overridden by command-line values, validated as a whole and echoed into
//! the output directory.
//!
//! ```toml
//! seed = 1
//! method = "ours"            # ours | swarm_plain | single | fixed_adapt | img_adapt
//! out_dir = "runs/ours"
//! n_generic = 24
//!
//! [net]                      # classes, latent_dim, base_channels, depth, height, width, da_channels
//! [loss]                     # alpha, beta, q
//! [schedule]                 # rounds, local_epochs, warmup_epochs, batch_size, lr, augment
//! [sampling]
//! kind = "prior"             # or "mean_latent"
//! samples = 4
//!
//! [[centers]]                # replaces the four default centers when present
//! center_id = 0
//! n_train = 12
//! n_test = 4
//! intensity = { gain = 1.0, bias = 0.0, gamma = 0.7, noise_std = 0.05 }
//! label_skew = { kind = "open_erode", radius = 2, random_range = [0, 1] }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::{EvalConfig, Sampling};
use crate::losses::LossWeights;
use crate::model::Method;
use crate::nets::NetConfig;
use crate::swarm::{TrainConfig, TrainSchedule};
use crate::synthdata::{build_federation_data, default_centers, validate_specs, CenterSpec, DataError, Federation, GeomConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: Method,
    pub out_dir: PathBuf,
    /// Size of the shared generic test set.
    pub n_generic: usize,
    pub net: NetConfig,
    pub loss: LossWeights,
    pub schedule: TrainSchedule,
    pub sampling: Sampling,
    pub centers: Vec<CenterSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: Method::Ours,
            out_dir: PathBuf::from("out"),
            n_generic: 24,
            net: NetConfig::default(),
            loss: LossWeights::default(),
            schedule: TrainSchedule::default(),
            sampling: Sampling::default(),
            centers: default_centers(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub rounds: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// The file at `path` (or the defaults) with `ov` applied, validated.
    pub fn resolve(path: Option<&Path>, ov: &Overrides) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(ov);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(s) = ov.seed {
            self.seed = s;
        }
        if let Some(m) = ov.method {
            self.method = m;
        }
        if let Some(r) = ov.rounds {
            self.schedule.rounds = r;
        }
        if let Some(o) = &ov.out_dir {
            self.out_dir = o.clone();
        }
    }

    pub fn geom(&self) -> GeomConfig {
        GeomConfig {
            height: self.net.height,
            width: self.net.width,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        if self.seed > i64::MAX as u64 {
            return Err(ConfigError::Invalid(format!("seed {} does not fit a signed 64-bit integer", self.seed)));
        }
        self.net.validate().map_err(|e| bad(&e))?;
        self.loss.validate().map_err(|e| bad(&e))?;
        self.schedule.validate().map_err(|e| bad(&e))?;
        self.sampling.validate().map_err(|e| bad(&e))?;
        validate_specs(&self.centers, &self.geom(), self.n_generic).map_err(|e| bad(&e))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            method: self.method,
            net: self.net.clone(),
            weights: self.loss,
            schedule: self.schedule,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            seed: self.seed,
            sampling: self.sampling,
        }
    }

    pub fn federation(&self) -> Result<Federation, DataError> {
        build_federation_data(&self.centers, self.n_generic, &self.geom(), self.seed)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("validated config serializes")
    }

    /// SHA-256 (hex) of the canonical JSON form; `out_dir` is excluded so
    /// identical experiments written to different places share a digest.
    pub fn digest(&self) -> String {
        let canonical = Self {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
