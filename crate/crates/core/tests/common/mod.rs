#![allow(dead_code)]

use swarmseg::losses::LossWeights;
use swarmseg::model::Method;
use swarmseg::nets::NetConfig;
use swarmseg::swarm::{TrainConfig, TrainSchedule};
use swarmseg::synthdata::{build_federation_data, default_centers, CenterSpec, Federation, GeomConfig};

pub fn tiny_net() -> NetConfig {
    NetConfig {
        classes: 2,
        latent_dim: 2,
        base_channels: 3,
        depth: 2,
        height: 16,
        width: 16,
        da_channels: 2,
    }
}

pub fn tiny_centers() -> Vec<CenterSpec> {
    default_centers()
        .into_iter()
        .map(|mut c| {
            c.n_train = 3;
            c.n_test = 2;
            c
        })
        .collect()
}

pub fn tiny_data(specs: &[CenterSpec], seed: u64) -> Federation {
    build_federation_data(specs, 3, &GeomConfig { height: 16, width: 16 }, seed).unwrap()
}

pub fn tiny_config(seed: u64, method: Method, rounds: usize) -> TrainConfig {
    TrainConfig {
        seed,
        method,
        net: tiny_net(),
        weights: LossWeights::default(),
        schedule: TrainSchedule {
            rounds,
            local_epochs: 1,
            warmup_epochs: Some(1),
            batch_size: 2,
            ..TrainSchedule::default()
        },
    }
}
