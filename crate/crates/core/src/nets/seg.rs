use rand::Rng;

use super::{conv_relu, expect_shape, init_conv, NetConfig, NetError, Result};
use crate::params::{Bound, ParameterSet};
use crate::tensor::{Tape, Tensor, Var};

/// Channel width of encoder/decoder level `level`.
fn width(cfg: &NetConfig, level: usize) -> usize {
    let _ = level;
    cfg.base_channels
}

/// Builds segmentation-network parameters. With `latent = false` the head
/// sees only the last feature map (the plain swarm baseline).
pub fn init_seg<R: Rng>(cfg: &NetConfig, latent: bool, rng: &mut R) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut p = ParameterSet::new();
    let mut cin = 1;
    for l in 0..=cfg.depth {
        init_conv(&mut p, &format!("seg.enc{l}"), cin, width(cfg, l), rng)?;
        cin = width(cfg, l);
    }
    for l in (0..cfg.depth).rev() {
        let cin = width(cfg, l + 1) + width(cfg, l);
        init_conv(&mut p, &format!("seg.dec{l}"), cin, width(cfg, l), rng)?;
    }
    let feat = width(cfg, 0) + if latent { cfg.latent_dim } else { 0 };
    let std = (1.0 / feat as f64).sqrt();
    let head = (0..cfg.classes * feat).map(|_| rng.gen_range(-std..std)).collect();
    p.insert("seg.head.w", Tensor::new(vec![cfg.classes, feat], head)?)?;
    p.insert("seg.head.b", Tensor::zeros(&[cfg.classes]))?;
    Ok(p)
}

/// Per-pixel class probabilities (C, H, W) for `image` (1, H, W). `z`, when
/// given, is tiled to (D, H, W) and joined to the last feature map.
pub fn forward_seg(
    tape: &mut Tape,
    p: &Bound,
    cfg: &NetConfig,
    image: Var,
    z: Option<Var>,
) -> Result<Var> {
    let (h, w) = (cfg.height, cfg.width);
    expect_shape(tape, image, &[1, h, w], "forward_seg image")?;
    let mut skips = Vec::with_capacity(cfg.depth + 1);
    let mut x = conv_relu(tape, p, "seg.enc0", image)?;
    for l in 1..=cfg.depth {
        skips.push(x);
        let pooled = tape.maxpool2(x)?;
        x = conv_relu(tape, p, &format!("seg.enc{l}"), pooled)?;
    }
    for l in (0..cfg.depth).rev() {
        let up = tape.upsample2(x)?;
        let cat = tape.concat_channels(&[up, skips[l]])?;
        x = conv_relu(tape, p, &format!("seg.dec{l}"), cat)?;
    }
    let feat = match z {
        Some(z) => {
            expect_shape(tape, z, &[cfg.latent_dim], "forward_seg latent")?;
            let tiled = tape.tile(z, h, w)?;
            tape.concat_channels(&[x, tiled])?
        }
        None => x,
    };
    let head_w = p.get("seg.head.w")?;
    let head_b = p.get("seg.head.b")?;
    let f = tape.shape(feat)[0];
    if tape.shape(head_w) != [cfg.classes, f] {
        return Err(NetError::Shape(format!(
            "seg head expects {:?} inputs, feature map has {f} channels",
            tape.shape(head_w)
        )));
    }
    let flat = tape.reshape(feat, &[f, h * w])?;
    let logits = tape.matmul(head_w, flat)?;
    let logits = tape.reshape(logits, &[cfg.classes, h, w])?;
    let logits = tape.add_channel_bias(logits, head_b)?;
    Ok(tape.channel_softmax(logits)?)
}
