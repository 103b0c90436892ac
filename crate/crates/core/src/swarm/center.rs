use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::{Result, SwarmError, TrainConfig};
use crate::model::{sample_loss, Phase};
use crate::nets::NetError;
use crate::params::ParameterSet;
use crate::rng::{stream, tag};
use crate::synthdata::{augment, SegSample};
use crate::tensor::{AdamConfig, AdamState, Tape, TensorError};

/// One participant: its data, both parameter parts and its optimizer state.
#[derive(Debug, Clone)]
pub struct CenterState {
    pub center_id: u32,
    pub n_k: u64,
    pub train: Vec<SegSample>,
    pub test: Vec<SegSample>,
    pub global: ParameterSet,
    pub personal: ParameterSet,
    adam_global: AdamState,
    adam_personal: AdamState,
    pub epochs_done: usize,
}

impl CenterState {
    pub fn new(
        center_id: u32,
        train: Vec<SegSample>,
        test: Vec<SegSample>,
        global: ParameterSet,
        personal: ParameterSet,
        lr: f64,
    ) -> Self {
        let adam = AdamConfig {
            lr,
            ..Default::default()
        };
        Self {
            center_id,
            n_k: train.len() as u64,
            adam_global: AdamState::new(&global, adam),
            adam_personal: AdamState::new(&personal, adam),
            train,
            test,
            global,
            personal,
            epochs_done: 0,
        }
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.adam_global.step_count()
    }
}

/// Per-epoch means of the loss terms over the center's training samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub total: f64,
    pub ce: f64,
    pub nr: f64,
    pub tr: f64,
    pub kl: f64,
}

fn non_finite(round: u32, center: u32) -> impl Fn(NetError) -> SwarmError {
    move |e| match e {
        NetError::Tensor(TensorError::NonFinite { op }) => SwarmError::NonFinite {
            round,
            center,
            term: op.to_string(),
        },
        other => SwarmError::Net(other),
    }
}

/// Runs `epochs` local epochs. The phase of each epoch follows the center's
/// epoch counter (warm-up first). All randomness comes from a stream keyed
/// by (seed, center, round, epoch).
pub fn local_train(state: &mut CenterState, cfg: &TrainConfig, round: u32, epochs: usize) -> Result<Vec<EpochMetrics>> {
    let mut out = Vec::with_capacity(epochs);
    let warmup = cfg.schedule.warmup();
    let bs = cfg.schedule.batch_size;
    let center = state.center_id;
    let to_err = non_finite(round, center);
    for e in 0..epochs {
        let phase = if state.epochs_done < warmup {
            Phase::Warmup
        } else {
            Phase::Main
        };
        let mut rng = stream(&[cfg.seed, tag::TRAIN, center as u64, round as u64, e as u64]);
        let mut order: Vec<usize> = (0..state.train.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        for batch in order.chunks(bs) {
            for &i in batch {
                let sample = if cfg.schedule.augment {
                    augment(&state.train[i], &mut rng)
                } else {
                    state.train[i].clone()
                };
                let noise: Vec<f64> = (0..cfg.net.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let mut tape = Tape::new();
                let gb = state.global.bind(&mut tape);
                let pb = (!state.personal.is_empty()).then(|| state.personal.bind(&mut tape));
                let terms = sample_loss(
                    &mut tape,
                    &gb,
                    pb.as_ref(),
                    &cfg.net,
                    cfg.method,
                    &cfg.weights,
                    phase,
                    &sample,
                    &noise,
                )
                .map_err(&to_err)?;
                let values = [
                    tape.scalar_value(terms.total),
                    tape.scalar_value(terms.ce),
                    terms.nr.map(|v| tape.scalar_value(v)).unwrap_or(0.0),
                    tape.scalar_value(terms.tr),
                    tape.scalar_value(terms.kl),
                ];
                for (name, v) in ["total", "ce", "nr", "tr", "kl"].iter().zip(values) {
                    if !v.is_finite() {
                        return Err(SwarmError::NonFinite {
                            round,
                            center,
                            term: name.to_string(),
                        });
                    }
                }
                sums.iter_mut().zip(values).for_each(|(s, v)| *s += v);
                let scaled = tape.mul_scalar(terms.total, 1.0 / batch.len() as f64)?;
                tape.backward(scaled)?;
                state.global.accumulate_grads(&tape, &gb);
                if let Some(pb) = &pb {
                    state.personal.accumulate_grads(&tape, pb);
                }
            }
            state.adam_global.step(&mut state.global)?;
            if !state.personal.is_empty() {
                state.adam_personal.step(&mut state.personal)?;
            }
        }
        let n = state.train.len().max(1) as f64;
        out.push(EpochMetrics {
            epoch: state.epochs_done,
            phase,
            total: sums[0] / n,
            ce: sums[1] / n,
            nr: sums[2] / n,
            tr: sums[3] / n,
            kl: sums[4] / n,
        });
        state.epochs_done += 1;
    }
    Ok(out)
}
