//! Checkpoint directory layout:
//!
//! ```text
//! checkpoints/meta.json
//! checkpoints/global.bin              aggregating methods (shared by all centers)
//! checkpoints/center_<id>/global.bin  single (one model per center)
//! checkpoints/center_<id>/personal.bin
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use swarmseg::config::ExperimentConfig;
use swarmseg::eval::{CenterModel, TrainedModels};
use swarmseg::model::{init_global, init_personal, Method};
use swarmseg::params::ParameterSet;
use swarmseg::rng::{stream, tag};
use swarmseg::swarm::RunOutput;

use crate::CliError;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub version: u32,
    pub method: Method,
    pub rounds: usize,
    pub config_digest: String,
    pub centers: Vec<u32>,
}

fn center_dir(root: &Path, id: u32) -> PathBuf {
    root.join(format!("center_{id}"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Runtime(format!("missing or unreadable checkpoint {}: {e}", path.display())))
}

pub fn save(root: &Path, run: &RunOutput, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let method = run.config.method;
    let meta = Meta {
        version: CHECKPOINT_VERSION,
        method,
        rounds: run.config.schedule.rounds,
        config_digest: cfg.digest(),
        centers: run.centers.iter().map(|c| c.center_id).collect(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
    write(&root.join("meta.json"), json.as_bytes())?;
    if method.aggregates() {
        write(&root.join("global.bin"), &run.centers[0].global.to_bytes())?;
    }
    for c in &run.centers {
        let dir = center_dir(root, c.center_id);
        if !method.aggregates() {
            write(&dir.join("global.bin"), &c.global.to_bytes())?;
        }
        if !c.personal.is_empty() {
            write(&dir.join("personal.bin"), &c.personal.to_bytes())?;
        }
    }
    Ok(())
}

fn load_set(path: &Path, schema: &ParameterSet) -> Result<ParameterSet, CliError> {
    let p = ParameterSet::from_bytes(&read(path)?).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    if !p.same_schema(schema) {
        return Err(CliError::Runtime(format!(
            "{}: parameter schema does not match the configured network",
            path.display()
        )));
    }
    Ok(p)
}

/// Loads every center's model; the network schema comes from `cfg`.
pub fn load(root: &Path, cfg: &ExperimentConfig) -> Result<TrainedModels, CliError> {
    let meta_path = root.join("meta.json");
    let text = fs::read_to_string(&meta_path)
        .map_err(|e| CliError::Runtime(format!("missing or unreadable checkpoint {}: {e}", meta_path.display())))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", meta_path.display())))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(CliError::Runtime(format!(
            "{}: checkpoint version {} (expected {CHECKPOINT_VERSION})",
            meta_path.display(),
            meta.version
        )));
    }
    if meta.method != cfg.method {
        return Err(CliError::Runtime(format!(
            "{}: checkpoints are for method {}, config says {}",
            meta_path.display(),
            meta.method,
            cfg.method
        )));
    }
    let method = meta.method;
    let net_err = |e: swarmseg::nets::NetError| CliError::Validation(e.to_string());
    let global_schema = init_global(&cfg.net, method, &mut stream(&[0, tag::INIT])).map_err(net_err)?;
    let personal_schema = init_personal(&cfg.net, method, &mut stream(&[0, tag::INIT])).map_err(net_err)?;
    let shared = if method.aggregates() {
        Some(load_set(&root.join("global.bin"), &global_schema)?)
    } else {
        None
    };
    let mut centers = Vec::with_capacity(meta.centers.len());
    for &id in &meta.centers {
        let dir = center_dir(root, id);
        let global = match &shared {
            Some(g) => g.clone(),
            None => load_set(&dir.join("global.bin"), &global_schema)?,
        };
        let personal = if personal_schema.is_empty() {
            ParameterSet::new()
        } else {
            load_set(&dir.join("personal.bin"), &personal_schema)?
        };
        centers.push(CenterModel {
            center_id: id,
            global,
            personal,
        });
    }
    centers.sort_by_key(|c| c.center_id);
    Ok(TrainedModels {
        net: cfg.net.clone(),
        method,
        centers,
    })
}
