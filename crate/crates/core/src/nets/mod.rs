//! The four networks of the decoupled model and the adaptation step.
//!
//! * segmentation network (`seg.*`): small U-Net whose last feature map is
//!   concatenated with the broadcast latent code before a 1x1 head;
//! * prior encoder (`prior.*`) over the image and posterior encoder
//!   (`post.*`) over image plus one-hot label, each producing a diagonal
//!   Gaussian over the latent code;
//! * distribution-adaptation network (`da.*`), kept private per center,
//!   producing one column-stochastic C x C matrix per pixel.
//!
//! Forward functions are stateless: they read parameters through a
//! [`Bound`] view of a [`ParameterSet`] recorded on the caller's tape.

mod da;
mod encoder;
mod seg;

pub use da::{forward_da, init_da, DaMode};
pub use encoder::{forward_posterior, forward_prior, init_posterior, init_prior};
pub use seg::{forward_seg, init_seg};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{Bound, ParamError, ParameterSet};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("{0}")]
    Shape(String),
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub classes: usize,
    pub latent_dim: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// Hidden width of the five-layer adaptation network.
    pub da_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            latent_dim: 8,
            base_channels: 8,
            depth: 3,
            height: 32,
            width: 32,
            da_channels: 4,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetError::Config(m));
        if self.classes < 2 {
            return bad(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.latent_dim == 0 || self.base_channels == 0 || self.da_channels == 0 {
            return bad("latent_dim, base_channels and da_channels must be positive".into());
        }
        let f = 1usize << self.depth;
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return bad(format!(
                "{}x{} is not divisible by 2^depth = {f}",
                self.height, self.width
            ));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Diagonal Gaussian over the latent code, by value.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDiag {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl GaussianDiag {
    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            log_sigma: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|l| l.exp()).collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GaussianVars {
        let mu = Tensor::from_vec(self.mu.clone());
        let ls = Tensor::from_vec(self.log_sigma.clone());
        if trainable {
            GaussianVars {
                mu: tape.param(&mu),
                log_sigma: tape.param(&ls),
            }
        } else {
            GaussianVars {
                mu: tape.constant(&mu),
                log_sigma: tape.constant(&ls),
            }
        }
    }
}

/// A diagonal Gaussian recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GaussianVars {
    pub mu: Var,
    pub log_sigma: Var,
}

impl GaussianVars {
    pub fn values(&self, tape: &Tape) -> GaussianDiag {
        GaussianDiag {
            mu: tape.value(self.mu).to_vec(),
            log_sigma: tape.value(self.log_sigma).to_vec(),
        }
    }
}

/// Reparameterized draw `mu + exp(log_sigma) * noise`; `noise` is supplied
/// by the caller so the op itself is deterministic.
pub fn sample_latent(tape: &mut Tape, g: GaussianVars, noise: &[f64]) -> Result<Var> {
    let d = tape.shape(g.mu)[0];
    if noise.len() != d || tape.shape(g.log_sigma) != [d] {
        return Err(NetError::Shape(format!(
            "sample_latent: noise length {} vs latent dim {d}",
            noise.len()
        )));
    }
    let eps = tape.constant(&Tensor::from_vec(noise.to_vec()));
    let sigma = tape.exp(g.log_sigma)?;
    let scaled = tape.mul(sigma, eps)?;
    Ok(tape.add(g.mu, scaled)?)
}

/// Per-pixel C x C matrices stored as (C*C, H, W) with channel `i*C + j`
/// holding the probability of local class `i` given global class `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationField {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub w: Vec<f64>,
}

impl AdaptationField {
    pub fn new(classes: usize, height: usize, width: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != classes * classes * height * width {
            return Err(NetError::Shape(format!(
                "adaptation field needs {} values, got {}",
                classes * classes * height * width,
                w.len()
            )));
        }
        Ok(Self {
            classes,
            height,
            width,
            w,
        })
    }

    pub fn identity(classes: usize, height: usize, width: usize) -> Self {
        let hw = height * width;
        let mut w = vec![0.0; classes * classes * hw];
        for i in 0..classes {
            w[(i * classes + i) * hw..(i * classes + i + 1) * hw].fill(1.0);
        }
        Self {
            classes,
            height,
            width,
            w,
        }
    }

    pub fn from_tape(tape: &Tape, v: Var, classes: usize) -> Result<Self> {
        let s = tape.shape(v);
        if s.len() != 3 || s[0] != classes * classes {
            return Err(NetError::Shape(format!("not an adaptation field: {s:?}")));
        }
        Self::new(classes, s[1], s[2], tape.value(v).to_vec())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn entry(&self, i: usize, j: usize, pixel: usize) -> f64 {
        self.w[(i * self.classes + j) * self.pixels() + pixel]
    }

    /// Largest deviation of any column sum from one, or `None` if an entry
    /// is negative.
    pub fn column_error(&self) -> Option<f64> {
        if self.w.iter().any(|v| *v < 0.0) {
            return None;
        }
        let c = self.classes;
        let mut worst: f64 = 0.0;
        for p in 0..self.pixels() {
            for j in 0..c {
                let s: f64 = (0..c).map(|i| self.entry(i, j, p)).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        Some(worst)
    }

    pub fn mean_trace(&self) -> f64 {
        let m = self.pixels();
        let tr: f64 = (0..self.classes)
            .map(|i| self.w[(i * self.classes + i) * m..(i * self.classes + i + 1) * m].iter().sum::<f64>())
            .sum();
        tr / m as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.classes * self.classes, self.height, self.width],
            self.w.clone(),
        )
        .expect("validated at construction")
    }
}

/// Local prediction `W (.) probs`: a C x C matrix-vector product per pixel.
pub fn apply_adaptation(tape: &mut Tape, w: Var, probs: Var) -> Result<Var> {
    Ok(tape.pixel_matvec(w, probs)?)
}

pub(crate) fn init_conv<R: Rng>(
    set: &mut ParameterSet,
    name: &str,
    cin: usize,
    cout: usize,
    rng: &mut R,
) -> Result<()> {
    let std = (2.0 / (9 * cin) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let w = (0..cout * cin * 9).map(|_| normal.sample(rng)).collect();
    set.insert(format!("{name}.w"), Tensor::new(vec![cout, cin, 3, 3], w)?)?;
    set.insert(format!("{name}.b"), Tensor::zeros(&[cout]))?;
    Ok(())
}

pub(crate) fn init_linear<R: Rng>(
    set: &mut ParameterSet,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    let std = (1.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let w = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    set.insert(format!("{name}.w"), Tensor::new(vec![fan_in, fan_out], w)?)?;
    set.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

pub(crate) fn conv_relu(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = conv(tape, p, name, x)?;
    Ok(tape.relu(y)?)
}

pub(crate) fn conv(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    Ok(tape.conv2d(x, w, Some(b))?)
}

/// Vector (n) through a dense layer with weight (n, m) and bias (m).
pub(crate) fn linear(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let n = tape.shape(x)[0];
    let m = tape.shape(w)[1];
    let row = tape.reshape(x, &[1, n])?;
    let y = tape.matmul(row, w)?;
    let y = tape.reshape(y, &[m])?;
    Ok(tape.add(y, b)?)
}

pub(crate) fn expect_shape(tape: &Tape, v: Var, shape: &[usize], what: &str) -> Result<()> {
    if tape.shape(v) != shape {
        return Err(NetError::Shape(format!(
            "{what}: expected {shape:?}, got {:?}",
            tape.shape(v)
        )));
    }
    Ok(())
}
