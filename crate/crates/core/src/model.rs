//! Method definitions and the per-sample training objective.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::losses::{ce_loss, total_loss, warmup_loss, LossTerms, LossWeights};
use crate::nets::{
    apply_adaptation, forward_da, forward_posterior, forward_prior, forward_seg, init_da, init_posterior, init_prior,
    init_seg, sample_latent, DaMode, NetConfig, NetError,
};
use crate::params::{Bound, ParameterSet};
use crate::synthdata::SegSample;
use crate::tensor::{Tape, Tensor};

/// Training method. `Ours`, `FixedAdapt` and `ImgAdapt` share the full
/// latent model and differ only in what the adaptation network sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ours,
    SwarmPlain,
    Single,
    FixedAdapt,
    ImgAdapt,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Ours,
        Method::SwarmPlain,
        Method::Single,
        Method::FixedAdapt,
        Method::ImgAdapt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::SwarmPlain => "swarm_plain",
            Method::Single => "single",
            Method::FixedAdapt => "fixed_adapt",
            Method::ImgAdapt => "img_adapt",
        }
    }

    /// Adaptation mode, or `None` for the segmentation-only methods.
    pub fn da_mode(self) -> Option<DaMode> {
        match self {
            Method::Ours => Some(DaMode::Distribution),
            Method::FixedAdapt => Some(DaMode::Fixed),
            Method::ImgAdapt => Some(DaMode::Image),
            Method::SwarmPlain | Method::Single => None,
        }
    }

    pub fn uses_latent(self) -> bool {
        self.da_mode().is_some()
    }

    /// Whether centers exchange and average their global parameters.
    pub fn aggregates(self) -> bool {
        self != Method::Single
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected one of ours, swarm_plain, single, fixed_adapt, img_adapt)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Main,
}

/// Global part: `seg.*`, plus `prior.*` and `post.*` for latent methods.
pub fn init_global<R: Rng>(cfg: &NetConfig, method: Method, rng: &mut R) -> Result<ParameterSet, NetError> {
    let mut p = init_seg(cfg, method.uses_latent(), rng)?;
    if method.uses_latent() {
        p.extend(&init_prior(cfg, rng)?)?;
        p.extend(&init_posterior(cfg, rng)?)?;
    }
    Ok(p)
}

/// Personalized part: `da.*` for latent methods, empty otherwise.
pub fn init_personal<R: Rng>(cfg: &NetConfig, method: Method, rng: &mut R) -> Result<ParameterSet, NetError> {
    match method.da_mode() {
        Some(mode) => init_da(cfg, mode, rng),
        None => Ok(ParameterSet::new()),
    }
}

/// Records the objective for one training sample. `noise` is the standard
/// normal draw for the posterior sample and is ignored by segmentation-only
/// methods, whose objective is plain cross-entropy (reported with zero
/// trace and KL terms).
#[allow(clippy::too_many_arguments)]
pub fn sample_loss(
    tape: &mut Tape,
    global: &Bound,
    personal: Option<&Bound>,
    cfg: &NetConfig,
    method: Method,
    weights: &LossWeights,
    phase: Phase,
    sample: &SegSample,
    noise: &[f64],
) -> Result<LossTerms, NetError> {
    let x = tape.constant(&sample.image_tensor());
    let y = tape.constant(&sample.onehot());
    let Some(mode) = method.da_mode() else {
        let f = forward_seg(tape, global, cfg, x, None)?;
        let ce = ce_loss(tape, f, y).map_err(loss_err)?;
        let zero = tape.constant(&Tensor::scalar(0.0));
        return Ok(LossTerms {
            total: ce,
            ce,
            nr: None,
            tr: zero,
            kl: zero,
        });
    };
    let personal = personal.ok_or_else(|| NetError::Config(format!("{method} needs adaptation parameters")))?;
    let post = forward_posterior(tape, global, cfg, x, y)?;
    let prior = forward_prior(tape, global, cfg, x)?;
    let z = sample_latent(tape, post, noise)?;
    let f = forward_seg(tape, global, cfg, x, Some(z))?;
    let cond = match mode {
        DaMode::Distribution => Some(tape.tile(z, cfg.height, cfg.width)?),
        DaMode::Image => Some(x),
        DaMode::Fixed => None,
    };
    let w = forward_da(tape, personal, cfg, cond, mode)?;
    let terms = match phase {
        Phase::Warmup => warmup_loss(tape, f, y, w, cfg.classes, post, prior, weights),
        Phase::Main => {
            let local = apply_adaptation(tape, w, f)?;
            total_loss(tape, f, local, y, w, cfg.classes, post, prior, weights)
        }
    };
    terms.map_err(loss_err)
}

fn loss_err(e: crate::losses::LossError) -> NetError {
    match e {
        crate::losses::LossError::Tensor(t) => NetError::Tensor(t),
        other => NetError::Config(other.to_string()),
    }
}
