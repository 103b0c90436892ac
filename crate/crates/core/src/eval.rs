//! Dice metric, global/local prediction and the two-task evaluation.
//!
//! Task 1 scores the global model on the generic set against clean labels;
//! Task 2 scores each center's model on its own local test set against that
//! center's (deterministically skewed) labels. The predicted mask is the
//! per-pixel argmax with ties going to background.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Method;
use crate::nets::{apply_adaptation, AdaptationField, forward_da, forward_prior, forward_seg, sample_latent, DaMode, NetConfig, NetError};
use crate::params::ParameterSet;
use crate::rng::{stream, tag};
use crate::synthdata::{Federation, SegSample};
use crate::tensor::{Tape, Tensor};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dice: shape mismatch {0} vs {1}")]
    Shape(usize, usize),
    #[error("empty test set: {0}")]
    EmptySet(String),
    #[error("model: {0}")]
    Model(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// `2|A & B| / (|A| + |B|)`, 1.0 when both masks are empty.
pub fn dice(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(EvalError::Shape(pred.len(), gt.len()));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p != 0, g != 0);
        inter += (p && g) as usize;
        a += p as usize;
        b += g as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Foreground mask from (C, H, W) probabilities: pixel is labelled with the
/// first class of maximal probability, so exact ties go to background.
pub fn argmax_mask(probs: &[f64], classes: usize) -> Vec<u8> {
    let m = probs.len() / classes;
    (0..m)
        .map(|i| {
            let mut best = 0;
            for c in 1..classes {
                if probs[c * m + i] > probs[best * m + i] {
                    best = c;
                }
            }
            (best != 0) as u8
        })
        .collect()
}

/// How the latent code is chosen at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sampling {
    /// Average the probabilities over this many prior draws.
    Prior { samples: usize },
    /// Use the prior mean.
    MeanLatent,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling::Prior { samples: 4 }
    }
}

impl Sampling {
    pub fn validate(&self) -> Result<()> {
        match self {
            Sampling::Prior { samples: 0 } => Err(EvalError::Model("prior sampling needs at least one sample".into())),
            _ => Ok(()),
        }
    }
}

/// A trained model as seen by the evaluator.
#[derive(Debug, Clone, Copy)]
pub struct ModelView<'a> {
    pub net: &'a NetConfig,
    pub method: Method,
    pub global: &'a ParameterSet,
    /// Adaptation parameters; required for local prediction with latent
    /// methods.
    pub personal: Option<&'a ParameterSet>,
}

/// What happens to each draw's segmentation probabilities.
#[derive(Clone, Copy)]
enum Adapt<'a> {
    None,
    /// The center's adaptation network.
    Net,
    Field(&'a AdaptationField),
}

fn predict<R: Rng>(model: &ModelView, image: &Tensor, sampling: Sampling, rng: &mut R, adapt: Adapt) -> Result<Vec<f64>> {
    sampling.validate()?;
    let cfg = model.net;
    let mut tape = Tape::new();
    let gb = model.global.bind_frozen(&mut tape);
    let x = tape.constant(image);
    let Some(mode) = model.method.da_mode() else {
        let f = forward_seg(&mut tape, &gb, cfg, x, None)?;
        return Ok(tape.value(f).to_vec());
    };
    let pb = if matches!(adapt, Adapt::Net) {
        let p = model
            .personal
            .ok_or_else(|| EvalError::Model(format!("{} local prediction needs adaptation parameters", model.method)))?;
        Some(p.bind_frozen(&mut tape))
    } else {
        None
    };
    let prior = forward_prior(&mut tape, &gb, cfg, x)?;
    let draws = match sampling {
        Sampling::Prior { samples } => samples,
        Sampling::MeanLatent => 1,
    };
    let mut acc = vec![0.0; cfg.classes * cfg.pixels()];
    for _ in 0..draws {
        let z = match sampling {
            Sampling::Prior { .. } => {
                let noise: Vec<f64> = (0..cfg.latent_dim).map(|_| StandardNormal.sample(rng)).collect();
                sample_latent(&mut tape, prior, &noise)?
            }
            Sampling::MeanLatent => prior.mu,
        };
        let f = forward_seg(&mut tape, &gb, cfg, x, Some(z))?;
        let out = match (&pb, adapt) {
            (_, Adapt::Field(field)) => {
                if (field.classes, field.height, field.width) != (cfg.classes, cfg.height, cfg.width) {
                    return Err(EvalError::Model("adaptation field does not match the network grid".into()));
                }
                let w = tape.constant(&field.to_tensor());
                apply_adaptation(&mut tape, w, f)?
            }
            (Some(pb), _) => {
                let cond = match mode {
                    DaMode::Distribution => Some(tape.tile(z, cfg.height, cfg.width).map_err(NetError::from)?),
                    DaMode::Image => Some(x),
                    DaMode::Fixed => None,
                };
                let w = forward_da(&mut tape, pb, cfg, cond, mode)?;
                apply_adaptation(&mut tape, w, f)?
            }
            (None, _) => f,
        };
        acc.iter_mut().zip(tape.value(out)).for_each(|(a, v)| *a += v);
    }
    let inv = 1.0 / draws as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}

/// Mean segmentation probabilities over prior draws (or at the prior mean).
/// Segmentation-only methods ignore the sampling mode.
pub fn predict_global<R: Rng>(model: &ModelView, image: &Tensor, sampling: Sampling, rng: &mut R) -> Result<Vec<f64>> {
    predict(model, image, sampling, rng, Adapt::None)
}

/// As [`predict_global`], with each draw passed through the center's
/// adaptation field before averaging. Segmentation-only methods return the
/// global prediction.
pub fn predict_local<R: Rng>(model: &ModelView, image: &Tensor, sampling: Sampling, rng: &mut R) -> Result<Vec<f64>> {
    predict(model, image, sampling, rng, Adapt::Net)
}

/// As [`predict_local`] with a given adaptation field in place of the
/// center's adaptation network.
pub fn predict_with_field<R: Rng>(
    model: &ModelView,
    image: &Tensor,
    field: &AdaptationField,
    sampling: Sampling,
    rng: &mut R,
) -> Result<Vec<f64>> {
    predict(model, image, sampling, rng, Adapt::Field(field))
}

/// Mean Dice on `cases` at the prior mean: local prediction for latent
/// methods, global otherwise. Consumes no randomness; used to track
/// progress during training.
pub fn mean_test_dice(model: &ModelView, cases: &[SegSample]) -> Result<f64> {
    if cases.is_empty() {
        return Err(EvalError::EmptySet("tracking".into()));
    }
    let local = model.method.uses_latent();
    let mut rng = stream(&[0]);
    let mut total = 0.0;
    for s in cases {
        let probs = predict(model, &s.image_tensor(), Sampling::MeanLatent, &mut rng, if local { Adapt::Net } else { Adapt::None })?;
        total += dice(&argmax_mask(&probs, model.net.classes), &s.label)?;
    }
    Ok(total / cases.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Global model on the generic set.
    Task1,
    /// Per-center model on the center's local test set.
    Task2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task: Task,
    /// Center id for Task 2 rows; empty for Task 1.
    pub center: Option<u32>,
    pub method: String,
    pub seed: u64,
    pub n_cases: usize,
    pub dice_mean: f64,
    /// Population standard deviation over cases.
    pub dice_std: f64,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub method: String,
    pub seed: u64,
    pub config_digest: String,
    pub sampling: Sampling,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn task1(&self) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.task == Task::Task1)
    }

    pub fn task2(&self, center: u32) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.task == Task::Task2 && r.center == Some(center))
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("row serializes");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Trained parameters of every center, in ascending center id order.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub net: NetConfig,
    pub method: Method,
    pub centers: Vec<CenterModel>,
}

#[derive(Debug, Clone)]
pub struct CenterModel {
    pub center_id: u32,
    pub global: ParameterSet,
    pub personal: ParameterSet,
}

impl TrainedModels {
    pub fn from_run(run: &crate::swarm::RunOutput) -> Self {
        Self {
            net: run.config.net.clone(),
            method: run.config.method,
            centers: run
                .centers
                .iter()
                .map(|c| CenterModel {
                    center_id: c.center_id,
                    global: c.global.clone(),
                    personal: c.personal.clone(),
                })
                .collect(),
        }
    }

    fn view<'a>(&'a self, c: &'a CenterModel) -> ModelView<'a> {
        ModelView {
            net: &self.net,
            method: self.method,
            global: &c.global,
            personal: (!c.personal.is_empty()).then_some(&c.personal),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub seed: u64,
    pub sampling: Sampling,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn case_scores(model: &ModelView, cases: &[SegSample], cfg: &EvalConfig, stream_id: u64, local: bool) -> Result<Vec<f64>> {
    cases
        .par_iter()
        .map(|s| {
            let mut rng = stream(&[cfg.seed, tag::EVAL, stream_id, s.id]);
            let adapt = if local { Adapt::Net } else { Adapt::None };
            let probs = predict(model, &s.image_tensor(), cfg.sampling, &mut rng, adapt)?;
            dice(&argmax_mask(&probs, model.net.classes), &s.label)
        })
        .collect()
}

/// Populates the report. Task 1 uses the (shared) global model of an
/// aggregating method; for `single` each case's Dice is averaged over the
/// per-center models. Task 2 uses local prediction for latent methods and
/// the center's global prediction otherwise.
pub fn evaluate(models: &TrainedModels, fed: &Federation, cfg: &EvalConfig, config_digest: &str) -> Result<EvalReport> {
    cfg.sampling.validate()?;
    if fed.generic.is_empty() {
        return Err(EvalError::EmptySet("generic".into()));
    }
    if models.centers.is_empty() {
        return Err(EvalError::Model("no trained centers".into()));
    }
    let row = |task, center, scores: &[f64]| {
        let (dice_mean, dice_std) = mean_std(scores);
        EvalRow {
            task,
            center,
            method: models.method.name().to_string(),
            seed: cfg.seed,
            n_cases: scores.len(),
            dice_mean,
            dice_std,
            config_digest: config_digest.to_string(),
        }
    };
    let mut rows = Vec::new();
    let task1_models: &[CenterModel] = if models.method.aggregates() {
        &models.centers[..1]
    } else {
        &models.centers
    };
    let mut per_case = vec![0.0; fed.generic.len()];
    for c in task1_models {
        let scores = case_scores(&models.view(c), &fed.generic, cfg, u64::MAX, false)?;
        per_case.iter_mut().zip(scores).for_each(|(a, s)| *a += s);
    }
    per_case.iter_mut().for_each(|a| *a /= task1_models.len() as f64);
    rows.push(row(Task::Task1, None, &per_case));

    for c in &models.centers {
        let data = fed
            .centers
            .iter()
            .find(|d| d.spec.center_id == c.center_id)
            .ok_or_else(|| EvalError::Model(format!("no data for center {}", c.center_id)))?;
        if data.test.is_empty() {
            return Err(EvalError::EmptySet(format!("center {} local test", c.center_id)));
        }
        let local = models.method.uses_latent();
        let scores = case_scores(&models.view(c), &data.test, cfg, c.center_id as u64, local)?;
        rows.push(row(Task::Task2, Some(c.center_id), &scores));
    }
    Ok(EvalReport {
        version: REPORT_VERSION,
        method: models.method.name().to_string(),
        seed: cfg.seed,
        config_digest: config_digest.to_string(),
        sampling: cfg.sampling,
        rows,
    })
}
