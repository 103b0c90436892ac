use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{conv, conv_relu, expect_shape, init_conv, NetConfig, NetError, Result};
use crate::params::{Bound, ParameterSet};
use crate::tensor::{Tape, Tensor, Var};

/// What the adaptation network is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DaMode {
    /// Broadcast latent code (D, H, W).
    Distribution,
    /// The input image (1, H, W).
    Image,
    /// No input: a learned constant field.
    Fixed,
}

const LAYERS: usize = 5;

pub fn init_da<R: Rng>(cfg: &NetConfig, mode: DaMode, rng: &mut R) -> Result<ParameterSet> {
    cfg.validate()?;
    let cc = cfg.classes * cfg.classes;
    let mut p = ParameterSet::new();
    match mode {
        DaMode::Fixed => {
            let field = (0..cc * cfg.pixels()).map(|_| rng.gen_range(-0.1..0.1)).collect();
            p.insert("da.field", Tensor::new(vec![cc, cfg.height, cfg.width], field)?)?;
        }
        DaMode::Distribution | DaMode::Image => {
            let cin = if mode == DaMode::Image { 1 } else { cfg.latent_dim };
            let hidden = cfg.da_channels;
            for l in 0..LAYERS {
                let i = if l == 0 { cin } else { hidden };
                let o = if l + 1 == LAYERS { cc } else { hidden };
                init_conv(&mut p, &format!("da.conv{l}"), i, o, rng)?;
            }
        }
    }
    Ok(p)
}

/// Adaptation field (C*C, H, W): raw head -> SoftPlus -> per-pixel column
/// normalization. `conditioning` must be (D, H, W) for `Distribution`,
/// (1, H, W) for `Image`, and is ignored for `Fixed`.
pub fn forward_da(
    tape: &mut Tape,
    p: &Bound,
    cfg: &NetConfig,
    conditioning: Option<Var>,
    mode: DaMode,
) -> Result<Var> {
    let raw = match mode {
        DaMode::Fixed => p.get("da.field")?,
        DaMode::Distribution | DaMode::Image => {
            let cin = if mode == DaMode::Image { 1 } else { cfg.latent_dim };
            let mut x = conditioning
                .ok_or_else(|| NetError::Shape(format!("{mode:?} adaptation needs a conditioning input")))?;
            expect_shape(tape, x, &[cin, cfg.height, cfg.width], "forward_da conditioning")?;
            for l in 0..LAYERS - 1 {
                x = conv_relu(tape, p, &format!("da.conv{l}"), x)?;
            }
            conv(tape, p, &format!("da.conv{}", LAYERS - 1), x)?
        }
    };
    let pos = tape.softplus(raw)?;
    Ok(tape.column_normalize(pos, cfg.classes)?)
}
