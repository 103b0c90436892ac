use rand::Rng;

use super::{conv_relu, expect_shape, init_conv, init_linear, linear, GaussianVars, NetConfig, Result};
use crate::params::{Bound, ParameterSet};
use crate::tensor::{Tape, Var};

fn init_encoder<R: Rng>(cfg: &NetConfig, prefix: &str, cin: usize, rng: &mut R) -> Result<ParameterSet> {
    cfg.validate()?;
    let b = cfg.base_channels;
    let mut p = ParameterSet::new();
    let mut c = cin;
    for l in 0..cfg.depth {
        init_conv(&mut p, &format!("{prefix}.conv{l}"), c, b, rng)?;
        c = b;
    }
    init_linear(&mut p, &format!("{prefix}.mu"), b, cfg.latent_dim, rng)?;
    init_linear(&mut p, &format!("{prefix}.logsigma"), b, cfg.latent_dim, rng)?;
    Ok(p)
}

/// Prior encoder: image (1 channel) -> N(mu, diag(sigma)).
pub fn init_prior<R: Rng>(cfg: &NetConfig, rng: &mut R) -> Result<ParameterSet> {
    init_encoder(cfg, "prior", 1, rng)
}

/// Posterior encoder: image plus one-hot label (1 + C channels).
pub fn init_posterior<R: Rng>(cfg: &NetConfig, rng: &mut R) -> Result<ParameterSet> {
    init_encoder(cfg, "post", 1 + cfg.classes, rng)
}

/// Strided encoder (conv + 2x2 pool per level), global average pool and
/// two dense heads.
fn forward_encoder(tape: &mut Tape, p: &Bound, cfg: &NetConfig, prefix: &str, input: Var) -> Result<GaussianVars> {
    let mut x = input;
    for l in 0..cfg.depth {
        if l > 0 {
            x = tape.maxpool2(x)?;
        }
        x = conv_relu(tape, p, &format!("{prefix}.conv{l}"), x)?;
    }
    let pooled = tape.spatial_mean(x)?;
    let mu = linear(tape, p, &format!("{prefix}.mu"), pooled)?;
    let log_sigma = linear(tape, p, &format!("{prefix}.logsigma"), pooled)?;
    Ok(GaussianVars { mu, log_sigma })
}

pub fn forward_prior(tape: &mut Tape, p: &Bound, cfg: &NetConfig, image: Var) -> Result<GaussianVars> {
    expect_shape(tape, image, &[1, cfg.height, cfg.width], "forward_prior image")?;
    forward_encoder(tape, p, cfg, "prior", image)
}

pub fn forward_posterior(
    tape: &mut Tape,
    p: &Bound,
    cfg: &NetConfig,
    image: Var,
    onehot: Var,
) -> Result<GaussianVars> {
    expect_shape(tape, image, &[1, cfg.height, cfg.width], "forward_posterior image")?;
    expect_shape(tape, onehot, &[cfg.classes, cfg.height, cfg.width], "forward_posterior label")?;
    let joint = tape.concat_channels(&[image, onehot])?;
    forward_encoder(tape, p, cfg, "post", joint)
}
