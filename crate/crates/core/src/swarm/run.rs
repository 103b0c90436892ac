use std::fs;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;

use super::{aggregate, local_train, CenterState, EpochMetrics, Result, RoundMessage, SwarmError, TrainConfig, HEADER_LEN};
use crate::eval::{mean_test_dice, ModelView};
use crate::model::{init_global, init_personal, Method, Phase};
use crate::params::ParameterSet;
use crate::rng::{stream, tag};
use crate::synthdata::Federation;

/// Execution knobs that must not change results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads for per-center training; 0 or 1 trains sequentially.
    pub jobs: usize,
    /// Keep every encoded message in [`RunOutput::messages`].
    pub keep_messages: bool,
    /// Write every encoded message to this directory.
    pub log_dir: Option<PathBuf>,
    /// After every round, score each center on its local test set.
    pub track_dice: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundDice {
    pub round: u32,
    pub center: u32,
    pub test_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRow {
    pub round: u32,
    pub center: u32,
    pub epoch: usize,
    pub phase: Phase,
    pub total: f64,
    pub ce: f64,
    pub nr: f64,
    pub tr: f64,
    pub kl: f64,
}

impl HistoryRow {
    fn new(round: u32, center: u32, m: &EpochMetrics) -> Self {
        Self {
            round,
            center,
            epoch: m.epoch,
            phase: m.phase,
            total: m.total,
            ce: m.ce,
            nr: m.nr,
            tr: m.tr,
            kl: m.kl,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: TrainConfig,
    /// Centers in ascending id order.
    pub centers: Vec<CenterState>,
    pub history: Vec<HistoryRow>,
    pub messages_sent: usize,
    pub messages: Vec<Vec<u8>>,
    /// Encoded messages of the final round, kept for offline replay.
    pub last_round: Vec<Vec<u8>>,
    pub round_dice: Vec<RoundDice>,
}

impl RunOutput {
    pub fn history_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.history {
            w.serialize(row).expect("history row serializes");
        }
        if self.history.is_empty() {
            w.write_record(["round", "center", "epoch", "phase", "total", "ce", "nr", "tr", "kl"])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn round_dice_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.round_dice {
            w.serialize(row).expect("dice row serializes");
        }
        if self.round_dice.is_empty() {
            w.write_record(["round", "center", "test_dice"]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}

fn track(centers: &[CenterState], cfg: &TrainConfig, round: u32, out: &mut Vec<RoundDice>) -> Result<()> {
    for c in centers {
        let view = ModelView {
            net: &cfg.net,
            method: cfg.method,
            global: &c.global,
            personal: (!c.personal.is_empty()).then_some(&c.personal),
        };
        let test_dice = mean_test_dice(&view, &c.test).map_err(|e| SwarmError::Config(e.to_string()))?;
        out.push(RoundDice {
            round,
            center: c.center_id,
            test_dice,
        });
    }
    Ok(())
}

/// Fresh centers in ascending id order. Every center starts from the same
/// global parameters; personalized parameters are drawn per center.
pub fn init_centers(cfg: &TrainConfig, fed: &Federation) -> Result<Vec<CenterState>> {
    cfg.validate()?;
    if (fed.geom.height, fed.geom.width) != (cfg.net.height, cfg.net.width) {
        return Err(SwarmError::Config(format!(
            "data grid {}x{} does not match network input {}x{}",
            fed.geom.height, fed.geom.width, cfg.net.height, cfg.net.width
        )));
    }
    let global = init_global(&cfg.net, cfg.method, &mut stream(&[cfg.seed, tag::INIT, u64::MAX]))?;
    let mut centers: Vec<CenterState> = fed
        .centers
        .iter()
        .map(|c| {
            let id = c.spec.center_id;
            let personal = init_personal(&cfg.net, cfg.method, &mut stream(&[cfg.seed, tag::INIT, id as u64]))?;
            Ok(CenterState::new(
                id,
                c.train.clone(),
                c.test.clone(),
                global.clone(),
                personal,
                cfg.schedule.lr,
            ))
        })
        .collect::<Result<_>>()?;
    centers.sort_by_key(|c| c.center_id);
    if centers.iter().any(|c| c.n_k == 0) {
        return Err(SwarmError::Config("every center needs training data".into()));
    }
    Ok(centers)
}

fn train_all(centers: &mut [CenterState], cfg: &TrainConfig, round: u32, pool: Option<&rayon::ThreadPool>) -> Result<Vec<Vec<EpochMetrics>>> {
    let epochs = cfg.schedule.local_epochs;
    let results: Vec<Result<Vec<EpochMetrics>>> = match pool {
        Some(pool) => pool.install(|| {
            centers
                .par_iter_mut()
                .map(|c| local_train(c, cfg, round, epochs))
                .collect()
        }),
        None => centers.iter_mut().map(|c| local_train(c, cfg, round, epochs)).collect(),
    };
    results.into_iter().collect()
}

/// Decodes one round's messages and aggregates them in ascending sender order.
pub fn replay_round(messages: &[Vec<u8>], schema: &ParameterSet) -> Result<ParameterSet> {
    let mut decoded = messages
        .iter()
        .map(|m| RoundMessage::decode(m, schema))
        .collect::<Result<Vec<_>>>()?;
    decoded.sort_by_key(|m| m.center_id);
    let params: Vec<&ParameterSet> = decoded.iter().map(|m| &m.params).collect();
    let sizes: Vec<u64> = decoded.iter().map(|m| m.n_k).collect();
    aggregate(&params, &sizes)
}

fn run_rounds(cfg: &TrainConfig, fed: &Federation, opts: &RunOptions) -> Result<RunOutput> {
    let mut centers = init_centers(cfg, fed)?;
    let pool = if opts.jobs > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(opts.jobs)
                .build()
                .map_err(|e| SwarmError::Config(e.to_string()))?,
        )
    } else {
        None
    };
    if let Some(dir) = &opts.log_dir {
        fs::create_dir_all(dir).map_err(|source| SwarmError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    let mut out = RunOutput {
        config: cfg.clone(),
        centers: Vec::new(),
        history: Vec::new(),
        messages_sent: 0,
        messages: Vec::new(),
        last_round: Vec::new(),
        round_dice: Vec::new(),
    };
    for round in 0..cfg.schedule.rounds as u32 {
        let metrics = train_all(&mut centers, cfg, round, pool.as_ref())?;
        for (c, ms) in centers.iter().zip(&metrics) {
            out.history.extend(ms.iter().map(|m| HistoryRow::new(round, c.center_id, m)));
        }
        if cfg.method.aggregates() {
            exchange(&mut centers, round, opts, &mut out)?;
        }
        if opts.track_dice {
            track(&centers, cfg, round, &mut out.round_dice)?;
        }
    }
    out.centers = centers;
    Ok(out)
}

/// One message exchange: every center encodes its global part, aggregates
/// all messages independently, and the results must agree bytewise.
fn exchange(centers: &mut [CenterState], round: u32, opts: &RunOptions, out: &mut RunOutput) -> Result<()> {
    let msgs: Vec<Vec<u8>> = centers
        .iter()
        .map(|c| {
            RoundMessage {
                center_id: c.center_id,
                round,
                n_k: c.n_k,
                params: c.global.clone(),
            }
            .encode()
        })
        .collect();
    if let Some(dir) = &opts.log_dir {
        for (c, m) in centers.iter().zip(&msgs) {
            let p = dir.join(format!("round_{round:04}_center_{}.msg", c.center_id));
            fs::write(&p, m).map_err(|source| SwarmError::Io {
                path: p.display().to_string(),
                source,
            })?;
        }
    }
    out.messages_sent += msgs.len();
    // Each center aggregates on its own copy of the messages.
    let results = centers
        .iter()
        .map(|c| replay_round(&msgs, &c.global))
        .collect::<Result<Vec<_>>>()?;
    let reference = results[0].to_bytes();
    for (c, r) in centers.iter().zip(&results).skip(1) {
        if r.to_bytes() != reference {
            return Err(SwarmError::Divergence {
                round,
                center: c.center_id,
                reference: centers[0].center_id,
            });
        }
    }
    for (c, r) in centers.iter_mut().zip(results) {
        c.global.assign_from(&r)?;
    }
    if opts.keep_messages {
        out.messages.extend(msgs.iter().cloned());
    }
    out.last_round = msgs;
    Ok(())
}

/// Runs an aggregating method (`ours`, `swarm_plain`, `fixed_adapt`,
/// `img_adapt`) for `cfg.schedule.rounds` synchronous rounds.
pub fn run_swarm(cfg: &TrainConfig, fed: &Federation, opts: &RunOptions) -> Result<RunOutput> {
    if !cfg.method.aggregates() {
        return Err(SwarmError::Config(format!("{} does not aggregate; use run_baseline", cfg.method)));
    }
    run_rounds(cfg, fed, opts)
}

/// Runs `method` on the same harness; `single` trains locally only and never
/// emits a message.
pub fn run_baseline(cfg: &TrainConfig, fed: &Federation, method: Method, opts: &RunOptions) -> Result<RunOutput> {
    let cfg = TrainConfig {
        method,
        ..cfg.clone()
    };
    run_rounds(&cfg, fed, opts)
}

/// Checks that no message carries personalized parameters: by schema (no
/// `da.*` tensor and no tensor named like a center's personal tensor) and by
/// content (no personal tensor's raw bytes occur in any message).
pub fn audit_messages(messages: &[Vec<u8>], centers: &[CenterState]) -> Result<()> {
    let needles: Vec<(String, Vec<u8>)> = centers
        .iter()
        .flat_map(|c| {
            c.personal
                .iter()
                .map(move |(n, t)| (format!("center {} {n}", c.center_id), t.data().iter().flat_map(|v| v.to_le_bytes()).collect()))
        })
        .collect();
    for (i, m) in messages.iter().enumerate() {
        if m.len() < HEADER_LEN {
            return Err(SwarmError::Privacy(format!("message {i} is truncated")));
        }
        let params = ParameterSet::from_bytes(&m[HEADER_LEN..])?;
        for name in params.names() {
            let personal = centers.iter().any(|c| c.personal.get(name).is_some());
            if name.starts_with("da.") || personal {
                return Err(SwarmError::Privacy(format!("message {i} carries personalized tensor {name}")));
            }
        }
        for (what, bytes) in &needles {
            if bytes.len() >= 16 && m.windows(bytes.len()).any(|w| w == bytes.as_slice()) {
                return Err(SwarmError::Privacy(format!("message {i} contains the bytes of {what}")));
            }
        }
    }
    Ok(())
}
