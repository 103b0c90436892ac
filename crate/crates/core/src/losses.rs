//! Training objectives. Every loss is a per-pixel mean so the weights and
//! learning rate do not depend on image resolution.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::GaussianVars;
use crate::tensor::{Tape, TensorError, Var};

/// Floor added inside the logarithm of the cross-entropy.
pub const CE_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

/// Trace weight `alpha`, KL weight `beta` and robust-loss exponent `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub q: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.01,
            q: 0.7,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(LossError::Weights(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(LossError::Weights(format!("beta must be >= 0, got {}", self.beta)));
        }
        check_q(self.q)
    }
}

fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q <= 1.0 {
        Ok(())
    } else {
        Err(LossError::Weights(format!("q must lie in (0, 1], got {q}")))
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(LossError::Shape {
            op,
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// Pixel count of a (C, H, W) map.
fn pixels(tape: &Tape, v: Var) -> usize {
    tape.shape(v)[1..].iter().product()
}

/// Mean over pixels of `-sum_j y_j ln(p_j + eps)`.
pub fn ce_loss(tape: &mut Tape, probs: Var, onehot: Var) -> Result<Var> {
    same_shape(tape, "ce_loss", probs, onehot)?;
    let m = pixels(tape, probs) as f64;
    let shifted = tape.add_scalar(probs, CE_EPS)?;
    let logp = tape.log(shifted)?;
    let picked = tape.mul(onehot, logp)?;
    let s = tape.sum(picked)?;
    Ok(tape.mul_scalar(s, -1.0 / m)?)
}

/// Mean per-pixel trace of a (C*C, H, W) adaptation field.
pub fn tr_loss(tape: &mut Tape, w: Var, classes: usize) -> Result<Var> {
    let shape = tape.shape(w).to_vec();
    if shape.len() != 3 || shape[0] != classes * classes {
        return Err(LossError::Shape {
            op: "tr_loss",
            lhs: shape,
            rhs: vec![classes * classes],
        });
    }
    let m = (shape[1] * shape[2]) as f64;
    let mut total: Option<Var> = None;
    for i in 0..classes {
        let diag = tape.slice_channels(w, i * classes + i, 1)?;
        let s = tape.sum(diag)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(tape.mul_scalar(total.expect("classes >= 1"), 1.0 / m)?)
}

/// Generalized cross-entropy `sum_j y_j (1 - p_j^q) / q`, averaged over pixels.
pub fn nr_loss(tape: &mut Tape, probs: Var, onehot: Var, q: f64) -> Result<Var> {
    check_q(q)?;
    same_shape(tape, "nr_loss", probs, onehot)?;
    let m = pixels(tape, probs) as f64;
    let label_mass: f64 = tape.value(onehot).iter().sum();
    let pq = tape.pow(probs, q)?;
    let picked = tape.mul(onehot, pq)?;
    let s = tape.sum(picked)?;
    // (mass - s) / (q m)
    let neg = tape.mul_scalar(s, -1.0 / (q * m))?;
    Ok(tape.add_scalar(neg, label_mass / (q * m))?)
}

/// Closed-form KL[q || p] between diagonal Gaussians, summed over dimensions.
pub fn kl_diag_gauss(tape: &mut Tape, q: GaussianVars, p: GaussianVars) -> Result<Var> {
    for (a, b) in [(q.mu, p.mu), (q.log_sigma, p.log_sigma), (q.mu, q.log_sigma)] {
        same_shape(tape, "kl_diag_gauss", a, b)?;
    }
    // Per dimension, with u = 2 (log sigma_q - log sigma_p):
    // (exp(u) - 1 - u) / 2 + (mu_q - mu_p)^2 / (2 sigma_p^2),
    // which is exactly zero when the two distributions coincide.
    let dl = tape.sub(q.log_sigma, p.log_sigma)?;
    let u = tape.mul_scalar(dl, 2.0)?;
    let eu = tape.exp(u)?;
    let eu1 = tape.add_scalar(eu, -1.0)?;
    let shape_term = tape.sub(eu1, u)?;
    let diff = tape.sub(q.mu, p.mu)?;
    let diff2 = tape.mul(diff, diff)?;
    let m2_lp = tape.mul_scalar(p.log_sigma, -2.0)?;
    let inv_var_p = tape.exp(m2_lp)?;
    let mean_term = tape.mul(diff2, inv_var_p)?;
    let both = tape.add(shape_term, mean_term)?;
    let s = tape.sum(both)?;
    Ok(tape.mul_scalar(s, 0.5)?)
}

/// The individual terms of an objective together with their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub nr: Option<Var>,
    pub tr: Var,
    pub kl: Var,
}

impl LossTerms {
    /// Scalar values as (name, value) pairs in a fixed order.
    pub fn values(&self, tape: &Tape) -> Vec<(&'static str, f64)> {
        let mut out = vec![("total", tape.scalar_value(self.total)), ("ce", tape.scalar_value(self.ce))];
        if let Some(nr) = self.nr {
            out.push(("nr", tape.scalar_value(nr)));
        }
        out.push(("tr", tape.scalar_value(self.tr)));
        out.push(("kl", tape.scalar_value(self.kl)));
        out
    }
}

/// Warm-up objective `CE(f, y) + beta KL - TR(W)`.
#[allow(clippy::too_many_arguments)]
pub fn warmup_loss(
    tape: &mut Tape,
    seg_probs: Var,
    onehot: Var,
    w: Var,
    classes: usize,
    q_dist: GaussianVars,
    p_dist: GaussianVars,
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let ce = ce_loss(tape, seg_probs, onehot)?;
    let tr = tr_loss(tape, w, classes)?;
    let kl = kl_diag_gauss(tape, q_dist, p_dist)?;
    let bkl = tape.mul_scalar(kl, weights.beta)?;
    let a = tape.add(ce, bkl)?;
    let total = tape.sub(a, tr)?;
    Ok(LossTerms {
        total,
        ce,
        nr: None,
        tr,
        kl,
    })
}

/// Main-phase objective `CE(W f, y) + NR(f, y) + alpha TR(W) + beta KL`.
/// `local_probs` must be the adapted prediction computed by the caller.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    seg_probs: Var,
    local_probs: Var,
    onehot: Var,
    w: Var,
    classes: usize,
    q_dist: GaussianVars,
    p_dist: GaussianVars,
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let ce = ce_loss(tape, local_probs, onehot)?;
    let nr = nr_loss(tape, seg_probs, onehot, weights.q)?;
    let tr = tr_loss(tape, w, classes)?;
    let kl = kl_diag_gauss(tape, q_dist, p_dist)?;
    let atr = tape.mul_scalar(tr, weights.alpha)?;
    let bkl = tape.mul_scalar(kl, weights.beta)?;
    let a = tape.add(ce, nr)?;
    let b = tape.add(a, atr)?;
    let total = tape.add(b, bkl)?;
    Ok(LossTerms {
        total,
        ce,
        nr: Some(nr),
        tr,
        kl,
    })
}
