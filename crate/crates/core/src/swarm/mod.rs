//! Round-based decentralized training.
//!
//! In every round each center trains locally, then broadcasts its global
//! part (`seg.*`, `prior.*`, `post.*`) together with its training-set size.
//! Every center decodes all messages and computes the size-weighted average
//! on its own; the results must agree bit for bit. Adaptation parameters
//! (`da.*`) and optimizer state never leave a center.

mod center;
mod message;
mod run;

pub use center::{local_train, CenterState, EpochMetrics};
pub use message::{RoundMessage, HEADER_LEN, MAGIC, WIRE_VERSION};
pub use run::{audit_messages, init_centers, replay_round, run_baseline, run_swarm, HistoryRow, RoundDice, RunOptions, RunOutput};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::LossWeights;
use crate::model::Method;
use crate::nets::{NetConfig, NetError};
use crate::params::{ParamError, ParameterSet};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum SwarmError {
    #[error("aggregation: {0}")]
    Aggregate(String),
    #[error("round message: {0}")]
    Message(String),
    #[error("protocol divergence in round {round}: center {center} disagrees with center {reference}")]
    Divergence { round: u32, center: u32, reference: u32 },
    #[error("round {round}, center {center}: non-finite {term}")]
    NonFinite { round: u32, center: u32, term: String },
    #[error("privacy audit: {0}")]
    Privacy(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = SwarmError> = std::result::Result<T, E>;

/// Rounds, local epochs and optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub rounds: usize,
    pub local_epochs: usize,
    /// Warm-up epochs at the start of training; `None` means 10% of
    /// `rounds * local_epochs`.
    pub warmup_epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub augment: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            rounds: 60,
            local_epochs: 2,
            warmup_epochs: None,
            batch_size: 4,
            lr: 1e-3,
            augment: true,
        }
    }
}

impl TrainSchedule {
    pub fn total_epochs(&self) -> usize {
        self.rounds * self.local_epochs
    }

    pub fn warmup(&self) -> usize {
        self.warmup_epochs.unwrap_or(self.total_epochs() / 10)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(SwarmError::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(SwarmError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.rounds > u32::MAX as usize {
            return Err(SwarmError::Config("too many rounds".into()));
        }
        Ok(())
    }
}

/// Everything local training depends on besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub method: Method,
    pub net: NetConfig,
    pub weights: LossWeights,
    pub schedule: TrainSchedule,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.weights
            .validate()
            .map_err(|e| SwarmError::Config(e.to_string()))?;
        self.schedule.validate()
    }
}

/// Size-weighted average `sum_k (n_k / N) theta_k`, summed in the given
/// order. Callers pass centers in ascending id order. Coordinates on which
/// every input agrees are copied unchanged.
pub fn aggregate(params: &[&ParameterSet], sizes: &[u64]) -> Result<ParameterSet> {
    let first = *params
        .first()
        .ok_or_else(|| SwarmError::Aggregate("no parameter sets".into()))?;
    if params.len() != sizes.len() {
        return Err(SwarmError::Aggregate(format!(
            "{} parameter sets but {} sizes",
            params.len(),
            sizes.len()
        )));
    }
    if let Some(i) = params.iter().position(|p| !p.same_schema(first)) {
        return Err(SwarmError::Aggregate(format!("parameter set {i} has a different schema")));
    }
    if sizes.contains(&0) {
        return Err(SwarmError::Aggregate("training sizes must be positive".into()));
    }
    let total: f64 = sizes.iter().map(|&n| n as f64).sum();
    let weights: Vec<f64> = sizes.iter().map(|&n| n as f64 / total).collect();
    let mut out = first.clone();
    out.zero_grads();
    let data: Vec<Vec<&[f64]>> = params
        .iter()
        .map(|p| p.iter().map(|(_, t)| t.data()).collect())
        .collect();
    for (ti, (_, dst)) in out.iter_mut().enumerate() {
        let srcs: Vec<&[f64]> = data.iter().map(|d| d[ti]).collect();
        for (i, d) in dst.data_mut().iter_mut().enumerate() {
            let v0 = srcs[0][i];
            if srcs.iter().all(|s| s[i].to_bits() == v0.to_bits()) {
                *d = v0;
                continue;
            }
            let mut acc = 0.0;
            for (s, w) in srcs.iter().zip(&weights) {
                acc += w * s[i];
            }
            *d = acc;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_set(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::from_vec(vec![v])).unwrap();
        p
    }

    #[test]
    fn weighted_mean_example() {
        let (a, b) = (scalar_set(0.0), scalar_set(4.0));
        let out = aggregate(&[&a, &b], &[1, 3]).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &[3.0]);
    }

    #[test]
    fn identical_inputs_are_a_fixed_point() {
        let a = scalar_set(0.1);
        let out = aggregate(&[&a, &a, &a], &[1, 1, 1]).unwrap();
        assert_eq!(out.get("w").unwrap().data()[0].to_bits(), 0.1f64.to_bits());
    }

    #[test]
    fn errors() {
        let a = scalar_set(1.0);
        assert!(aggregate(&[], &[]).is_err());
        assert!(aggregate(&[&a], &[0]).is_err());
        let mut b = ParameterSet::new();
        b.insert("v", Tensor::from_vec(vec![1.0])).unwrap();
        assert!(aggregate(&[&a, &b], &[1, 1]).is_err());
    }

    #[test]
    fn schedule_defaults() {
        let s = TrainSchedule::default();
        assert_eq!(s.total_epochs(), 120);
        assert_eq!(s.warmup(), 12);
    }
}
