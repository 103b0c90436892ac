//! Release gate: gradient checks of every primitive and loss, the KL
//! Monte-Carlo oracle, loss limits, aggregation exactness and the
//! morphology oracle. Each check reports the measured error against its
//! tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::losses::{self, LossWeights};
use crate::nets::{self, DaMode, GaussianVars, NetConfig};
use crate::params::ParameterSet;
use crate::swarm::aggregate;
use crate::synthdata::{close, dilate, erode, open, StructuringElement};
use crate::tensor::{grad_check_with, Result as TResult, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
        }
    }

    fn failed(name: impl Into<String>, why: &str) -> Self {
        Self {
            name: format!("{} ({why})", name.into()),
            measured: f64::INFINITY,
            tolerance: 0.0,
            passed: false,
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<40} measured {:.3e}  tolerance {:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelftestOptions {
    /// Random points per gradient check.
    pub points: usize,
    pub grad_tolerance: f64,
    pub eps: f64,
    /// Multiplier on the conv2d backward pass; anything but 1 is a fault.
    pub conv_grad_scale: f64,
    pub kl_pairs: usize,
    pub kl_samples: usize,
    pub seed: u64,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            points: 20,
            grad_tolerance: 1e-4,
            eps: 1e-5,
            conv_grad_scale: 1.0,
            kl_pairs: 10,
            kl_samples: 1_000_000,
            seed: 20,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn simplex(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    let raw = uniform(rng, &[c, h, w], 0.05, 1.0);
    let m = h * w;
    let mut data = raw.into_data();
    for i in 0..m {
        let s: f64 = (0..c).map(|j| data[j * m + i]).sum();
        (0..c).for_each(|j| data[j * m + i] /= s);
    }
    Tensor::new(vec![c, h, w], data).unwrap()
}

fn column_stochastic(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    let mut t = Tape::new();
    let raw = t.constant(&uniform(rng, &[c * c, h, w], 0.05, 1.0));
    let n = t.column_normalize(raw, c).unwrap();
    t.tensor(n)
}

fn onehot_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    let m = h * w;
    let mut data = vec![0.0; c * m];
    for i in 0..m {
        data[rng.gen_range(0..c) * m + i] = 1.0;
    }
    Tensor::new(vec![c, h, w], data).unwrap()
}

/// `sum(out * r)` with a fixed random `r`, so the whole Jacobian is probed.
fn project(t: &mut Tape, out: Var, r: &Tensor) -> TResult<Var> {
    let r = t.constant(&r.clone().reshape(t.shape(out))?);
    let p = t.mul(out, r)?;
    t.sum(p)
}

fn loss_err(e: losses::LossError) -> TensorError {
    match e {
        losses::LossError::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "loss",
            reason: other.to_string(),
        },
    }
}

fn net_err(e: nets::NetError) -> TensorError {
    match e {
        nets::NetError::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "net",
            reason: other.to_string(),
        },
    }
}

type CaseFn = Box<dyn Fn(&mut Tape, Var) -> TResult<Var>>;

/// A named gradient check: draws an input point and the scalar function
/// to differentiate at it.
struct GradCase {
    name: &'static str,
    draw: Box<dyn Fn(&mut ChaCha8Rng) -> (Tensor, CaseFn)>,
}

fn case(name: &'static str, draw: impl Fn(&mut ChaCha8Rng) -> (Tensor, CaseFn) + 'static) -> GradCase {
    GradCase {
        name,
        draw: Box::new(draw),
    }
}

/// Unary elementwise / shape ops on a (2, 4, 4) input projected to a scalar.
fn unary(name: &'static str, lo: f64, hi: f64, op: fn(&mut Tape, Var) -> TResult<Var>) -> GradCase {
    case(name, move |rng| {
        let x = uniform(rng, &[2, 4, 4], lo, hi);
        let r = uniform(rng, &[1000], -1.0, 1.0);
        let f: CaseFn = Box::new(move |t, v| {
            let y = op(t, v)?;
            let n: usize = t.shape(y).iter().product();
            let r = Tensor::from_vec(r.data()[..n].to_vec());
            project(t, y, &r)
        });
        (x, f)
    })
}

/// Binary op checked with respect to its first (`wrt_a`) or second input.
fn binary(name: &'static str, wrt_a: bool, op: fn(&mut Tape, Var, Var) -> TResult<Var>) -> GradCase {
    case(name, move |rng| {
        let x = uniform(rng, &[2, 3, 3], -1.5, 1.5);
        let other = uniform(rng, &[2, 3, 3], -1.5, 1.5);
        let r = uniform(rng, &[2, 3, 3], -1.0, 1.0);
        let f: CaseFn = Box::new(move |t, v| {
            let o = t.constant(&other);
            let y = if wrt_a { op(t, v, o)? } else { op(t, o, v)? };
            project(t, y, &r)
        });
        (x, f)
    })
}

fn gaussian_from(t: &mut Tape, packed: Var, d: usize, offset: usize) -> TResult<GaussianVars> {
    let mu = t.slice_channels(packed, offset, 1)?;
    let ls = t.slice_channels(packed, offset + 1, 1)?;
    Ok(GaussianVars {
        mu: t.reshape(mu, &[d])?,
        log_sigma: t.reshape(ls, &[d])?,
    })
}

fn grad_cases() -> Vec<GradCase> {
    let mut v = vec![
        binary("add (lhs)", true, |t, a, b| t.add(a, b)),
        binary("add (rhs)", false, |t, a, b| t.add(a, b)),
        binary("sub (lhs)", true, |t, a, b| t.sub(a, b)),
        binary("sub (rhs)", false, |t, a, b| t.sub(a, b)),
        binary("mul (lhs)", true, |t, a, b| t.mul(a, b)),
        binary("mul (rhs)", false, |t, a, b| t.mul(a, b)),
        unary("add_scalar", -1.0, 1.0, |t, a| t.add_scalar(a, 0.7)),
        unary("mul_scalar", -1.0, 1.0, |t, a| t.mul_scalar(a, -1.3)),
        unary("neg", -1.0, 1.0, |t, a| t.neg(a)),
        unary("relu", -1.0, 1.0, |t, a| t.relu(a)),
        unary("softplus", -3.0, 3.0, |t, a| t.softplus(a)),
        unary("exp", -2.0, 2.0, |t, a| t.exp(a)),
        unary("log", 0.1, 3.0, |t, a| t.log(a)),
        unary("pow q=0.7", 0.05, 1.0, |t, a| t.pow(a, 0.7)),
        unary("sum", -1.0, 1.0, |t, a| t.sum(a)),
        unary("mean", -1.0, 1.0, |t, a| t.mean(a)),
        unary("reshape", -1.0, 1.0, |t, a| t.reshape(a, &[4, 8])),
        unary("channel_softmax", -3.0, 3.0, |t, a| t.channel_softmax(a)),
        unary("maxpool2", -1.0, 1.0, |t, a| t.maxpool2(a)),
        unary("upsample2", -1.0, 1.0, |t, a| t.upsample2(a)),
        unary("spatial_mean", -1.0, 1.0, |t, a| t.spatial_mean(a)),
        unary("slice_channels", -1.0, 1.0, |t, a| t.slice_channels(a, 1, 1)),
        unary("concat_channels", -1.0, 1.0, |t, a| {
            let s = t.mul_scalar(a, 2.0)?;
            t.concat_channels(&[a, s, a])
        }),
        unary("tile", -1.0, 1.0, |t, a| {
            let flat = t.reshape(a, &[32])?;
            t.tile(flat, 2, 3)
        }),
    ];
    v.push(case("matmul (lhs)", |rng| {
        let a = uniform(rng, &[3, 5], -1.0, 1.0);
        let b = uniform(rng, &[5, 4], -1.0, 1.0);
        let r = uniform(rng, &[12], -1.0, 1.0);
        let f: CaseFn = Box::new(move |t, v| {
            let b = t.constant(&b);
            let y = t.matmul(v, b)?;
            project(t, y, &r)
        });
        (a, f)
    }));
    v.push(case("matmul (rhs)", |rng| {
        let a = uniform(rng, &[3, 5], -1.0, 1.0);
        let b = uniform(rng, &[5, 4], -1.0, 1.0);
        let r = uniform(rng, &[12], -1.0, 1.0);
        let f: CaseFn = Box::new(move |t, v| {
            let a = t.constant(&a);
            let y = t.matmul(a, v)?;
            project(t, y, &r)
        });
        (b, f)
    }));
    for which in 0..3 {
        let name = ["conv2d (input)", "conv2d (kernel)", "conv2d (bias)"][which];
        v.push(case(name, move |rng| {
            let x = uniform(rng, &[2, 5, 4], -1.0, 1.0);
            let k = uniform(rng, &[3, 2, 3, 3], -1.0, 1.0);
            let b = uniform(rng, &[3], -1.0, 1.0);
            let r = uniform(rng, &[60], -1.0, 1.0);
            let probe = [&x, &k, &b][which].clone();
            let f: CaseFn = Box::new(move |t, v| {
                let mut vars = [t.constant(&x), t.constant(&k), t.constant(&b)];
                vars[which] = v;
                let y = t.conv2d(vars[0], vars[1], Some(vars[2]))?;
                project(t, y, &r)
            });
            (probe, f)
        }));
    }
    for wrt_x in [true, false] {
        v.push(case(if wrt_x { "add_channel_bias (x)" } else { "add_channel_bias (b)" }, move |rng| {
            let x = uniform(rng, &[3, 2, 2], -1.0, 1.0);
            let b = uniform(rng, &[3], -1.0, 1.0);
            let r = uniform(rng, &[12], -1.0, 1.0);
            let probe = if wrt_x { x.clone() } else { b.clone() };
            let f: CaseFn = Box::new(move |t, v| {
                let y = if wrt_x {
                    let b = t.constant(&b);
                    t.add_channel_bias(v, b)?
                } else {
                    let x = t.constant(&x);
                    t.add_channel_bias(x, v)?
                };
                project(t, y, &r)
            });
            (probe, f)
        }));
    }
    v.push(case("column_normalize", |rng| {
        let x = uniform(rng, &[9, 2, 2], 0.1, 2.0);
        let r = uniform(rng, &[36], -1.0, 1.0);
        let f: CaseFn = Box::new(move |t, v| {
            let y = t.column_normalize(v, 3)?;
            project(t, y, &r)
        });
        (x, f)
    }));
    for wrt_w in [true, false] {
        v.push(case(if wrt_w { "pixel_matvec (W)" } else { "pixel_matvec (p)" }, move |rng| {
            let w = column_stochastic(rng, 3, 2, 2);
            let p = simplex(rng, 3, 2, 2);
            let r = uniform(rng, &[12], -1.0, 1.0);
            let probe = if wrt_w { w.clone() } else { p.clone() };
            let f: CaseFn = Box::new(move |t, v| {
                let y = if wrt_w {
                    let p = t.constant(&p);
                    t.pixel_matvec(v, p)?
                } else {
                    let w = t.constant(&w);
                    t.pixel_matvec(w, v)?
                };
                project(t, y, &r)
            });
            (probe, f)
        }));
    }
    v.push(case("sample_latent", |rng| {
        let x = uniform(rng, &[2, 3, 1], -1.0, 1.0);
        let noise: Vec<f64> = (0..3).map(|_| StandardNormal.sample(rng)).collect();
        let f: CaseFn = Box::new(move |t, v| {
            let g = gaussian_from(t, v, 3, 0)?;
            let z = nets::sample_latent(t, g, &noise).map_err(net_err)?;
            t.sum(z)
        });
        (x, f)
    }));

    // Losses.
    v.push(case("ce_loss", |rng| {
        let p = simplex(rng, 2, 3, 3);
        let y = onehot_map(rng, 2, 3, 3);
        let f: CaseFn = Box::new(move |t, v| {
            let y = t.constant(&y);
            losses::ce_loss(t, v, y).map_err(loss_err)
        });
        (p, f)
    }));
    v.push(case("tr_loss", |rng| {
        let w = column_stochastic(rng, 2, 3, 3);
        let f: CaseFn = Box::new(|t, v| losses::tr_loss(t, v, 2).map_err(loss_err));
        (w, f)
    }));
    v.push(case("nr_loss q=0.7", |rng| {
        let p = simplex(rng, 2, 3, 3);
        let y = onehot_map(rng, 2, 3, 3);
        let f: CaseFn = Box::new(move |t, v| {
            let y = t.constant(&y);
            losses::nr_loss(t, v, y, 0.7).map_err(loss_err)
        });
        (p, f)
    }));
    v.push(case("kl_diag_gauss", |rng| {
        let x = uniform(rng, &[4, 4, 1], -1.0, 1.0);
        let f: CaseFn = Box::new(|t, v| {
            let q = gaussian_from(t, v, 4, 0)?;
            let p = gaussian_from(t, v, 4, 2)?;
            losses::kl_diag_gauss(t, q, p).map_err(loss_err)
        });
        (x, f)
    }));
    // Composite objectives, differentiated in turn w.r.t. the segmentation
    // probabilities, the raw adaptation field and the Gaussian parameters.
    for (name, warm, wrt) in [
        ("warmup_loss (probs)", true, 0),
        ("warmup_loss (field)", true, 1),
        ("warmup_loss (gaussians)", true, 2),
        ("total_loss (probs)", false, 0),
        ("total_loss (field)", false, 1),
        ("total_loss (gaussians)", false, 2),
    ] {
        v.push(case(name, move |rng| {
            let logits = uniform(rng, &[2, 3, 3], -2.0, 2.0);
            let raw_w = uniform(rng, &[4, 3, 3], -1.0, 1.0);
            let gauss = uniform(rng, &[4, 3, 1], -1.0, 1.0);
            let y = onehot_map(rng, 2, 3, 3);
            let probe = [&logits, &raw_w, &gauss][wrt].clone();
            let f: CaseFn = Box::new(move |t, v| {
                let mut ins = [t.constant(&logits), t.constant(&raw_w), t.constant(&gauss)];
                ins[wrt] = v;
                let probs = t.channel_softmax(ins[0])?;
                let sp = t.softplus(ins[1])?;
                let w = t.column_normalize(sp, 2)?;
                let q = gaussian_from(t, ins[2], 3, 0)?;
                let p = gaussian_from(t, ins[2], 3, 2)?;
                let y = t.constant(&y);
                let weights = LossWeights::default();
                let terms = if warm {
                    losses::warmup_loss(t, probs, y, w, 2, q, p, &weights)
                } else {
                    let local = t.pixel_matvec(w, probs)?;
                    losses::total_loss(t, probs, local, y, w, 2, q, p, &weights)
                };
                Ok(terms.map_err(loss_err)?.total)
            });
            (probe, f)
        }));
    }
    // Networks composed end to end on an 8x8 instance.
    for (name, wrt_image) in [("seg+da+adapt (image)", true), ("seg+da+adapt (latent)", false)] {
        v.push(case(name, move |rng| {
            let cfg = NetConfig {
                height: 8,
                width: 8,
                depth: 2,
                base_channels: 3,
                latent_dim: 2,
                da_channels: 3,
                classes: 2,
            };
            let mut prng = ChaCha8Rng::seed_from_u64(rng.gen());
            let mut params = nets::init_seg(&cfg, true, &mut prng).unwrap();
            params.extend(&nets::init_da(&cfg, DaMode::Distribution, &mut prng).unwrap()).unwrap();
            let image = uniform(rng, &[1, 8, 8], -1.0, 1.0);
            let z = uniform(rng, &[2], -1.0, 1.0);
            let y = onehot_map(rng, 2, 8, 8);
            let probe = if wrt_image { image.clone() } else { z.clone() };
            let f: CaseFn = Box::new(move |t, v| {
                let b = params.bind_frozen(t);
                let (x, z) = if wrt_image { (v, t.constant(&z)) } else { (t.constant(&image), v) };
                let probs = nets::forward_seg(t, &b, &cfg, x, Some(z)).map_err(net_err)?;
                let cond = t.tile(z, 8, 8)?;
                let w = nets::forward_da(t, &b, &cfg, Some(cond), DaMode::Distribution).map_err(net_err)?;
                let local = nets::apply_adaptation(t, w, probs).map_err(net_err)?;
                let y = t.constant(&y);
                losses::ce_loss(t, local, y).map_err(loss_err)
            });
            (probe, f)
        }));
    }
    v
}

/// Every differentiable primitive, loss and the composed networks, each at
/// `opts.points` random points.
pub fn gradient_suite(opts: &SelftestOptions) -> Vec<Check> {
    let scale = opts.conv_grad_scale;
    grad_cases()
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ ((i as u64) << 32));
            let mut worst: f64 = 0.0;
            for _ in 0..opts.points {
                let (x, f) = (c.draw)(&mut rng);
                match grad_check_with(f, &x, opts.eps, |t| t.set_conv_grad_scale(scale)) {
                    Ok(e) => worst = worst.max(e),
                    Err(e) => return Check::failed(format!("grad {}", c.name), &e.to_string()),
                }
            }
            Check::at_most(format!("grad {}", c.name), worst, opts.grad_tolerance)
        })
        .collect()
}

/// Closed-form KL against `E_q[log q - log p]` estimated by sampling, D = 4.
pub fn kl_oracle(opts: &SelftestOptions) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let d = 4;
    let mut worst: f64 = 0.0;
    for _ in 0..opts.kl_pairs {
        let draw = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> Vec<f64> { (0..d).map(|_| rng.gen_range(lo..hi)).collect() };
        let (mq, lq, mp, lp) = (
            draw(&mut rng, -1.0, 1.0),
            draw(&mut rng, -0.5, 0.5),
            draw(&mut rng, -1.0, 1.0),
            draw(&mut rng, -0.5, 0.5),
        );
        let mut t = Tape::new();
        let gq = GaussianVars {
            mu: t.constant(&Tensor::from_vec(mq.clone())),
            log_sigma: t.constant(&Tensor::from_vec(lq.clone())),
        };
        let gp = GaussianVars {
            mu: t.constant(&Tensor::from_vec(mp.clone())),
            log_sigma: t.constant(&Tensor::from_vec(lp.clone())),
        };
        let closed = match losses::kl_diag_gauss(&mut t, gq, gp) {
            Ok(v) => t.scalar_value(v),
            Err(e) => return Check::failed("kl monte-carlo oracle", &e.to_string()),
        };
        let mut acc = 0.0;
        for _ in 0..opts.kl_samples {
            let mut s = 0.0;
            for j in 0..d {
                let e: f64 = StandardNormal.sample(&mut rng);
                let z = mq[j] + lq[j].exp() * e;
                let log_q = -lq[j] - 0.5 * e * e;
                let u = (z - mp[j]) / lp[j].exp();
                let log_p = -lp[j] - 0.5 * u * u;
                s += log_q - log_p;
            }
            acc += s;
        }
        worst = worst.max((acc / opts.kl_samples as f64 - closed).abs());
    }
    Check::at_most("kl monte-carlo oracle", worst, 1e-2)
}

/// The q -> 0 limit of the robust loss against cross-entropy, and q = 1
/// against the mean of `1 - p_true`.
pub fn loss_limits(opts: &SelftestOptions) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2));
    let (mut rel, mut mae) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let p0 = rng.gen_range(0.01..0.99);
        let probs = Tensor::new(vec![2, 1, 1], vec![p0, 1.0 - p0]).unwrap();
        let cls = rng.gen_range(0..2);
        let mut y = vec![0.0; 2];
        y[cls] = 1.0;
        let y = Tensor::new(vec![2, 1, 1], y).unwrap();
        let mut t = Tape::new();
        let (pv, yv) = (t.constant(&probs), t.constant(&y));
        let ce = losses::ce_loss(&mut t, pv, yv).map(|v| t.scalar_value(v));
        let nr0 = losses::nr_loss(&mut t, pv, yv, 1e-4).map(|v| t.scalar_value(v));
        let nr1 = losses::nr_loss(&mut t, pv, yv, 1.0).map(|v| t.scalar_value(v));
        match (ce, nr0, nr1) {
            (Ok(ce), Ok(nr0), Ok(nr1)) => {
                rel = rel.max((nr0 - ce).abs() / ce);
                mae = mae.max((nr1 - (1.0 - probs.data()[cls])).abs());
            }
            _ => return vec![Check::failed("loss limits", "loss evaluation failed")],
        }
    }
    vec![
        Check::at_most("nr(q=1e-4) vs ce, relative", rel, 1e-3),
        Check::at_most("nr(q=1) vs mean(1 - p_true)", mae, 1e-12),
    ]
}

/// Aggregation against a brute-force weighted mean, plus affine
/// equivariance.
pub fn aggregation_checks(opts: &SelftestOptions) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(3));
    let (mut brute, mut affine) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let k = rng.gen_range(1..6);
        let sets: Vec<ParameterSet> = (0..k)
            .map(|_| {
                let mut p = ParameterSet::new();
                p.insert("a", uniform(&mut rng, &[3, 4], -1.0, 1.0)).unwrap();
                p.insert("b", uniform(&mut rng, &[5], -1.0, 1.0)).unwrap();
                p
            })
            .collect();
        let sizes: Vec<u64> = (0..k).map(|_| rng.gen_range(1..40)).collect();
        let refs: Vec<&ParameterSet> = sets.iter().collect();
        let Ok(out) = aggregate(&refs, &sizes) else {
            return vec![Check::failed("aggregation", "aggregate returned an error")];
        };
        let total: u64 = sizes.iter().sum();
        let flat: Vec<Vec<f64>> = sets.iter().map(ParameterSet::flat_values).collect();
        for (i, got) in out.flat_values().iter().enumerate() {
            let want: f64 = flat.iter().zip(&sizes).map(|(f, &n)| n as f64 * f[i]).sum::<f64>() / total as f64;
            brute = brute.max((got - want).abs());
        }
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let moved: Vec<ParameterSet> = sets
            .iter()
            .map(|s| {
                let mut m = s.clone();
                for (_, t) in m.iter_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v = a * *v + b);
                }
                m
            })
            .collect();
        let mrefs: Vec<&ParameterSet> = moved.iter().collect();
        let Ok(mout) = aggregate(&mrefs, &sizes) else {
            return vec![Check::failed("aggregation", "aggregate returned an error")];
        };
        for (x, y) in out.flat_values().iter().zip(mout.flat_values()) {
            affine = affine.max((a * x + b - y).abs());
        }
    }
    vec![
        Check::at_most("aggregate vs brute-force weighted mean", brute, 1e-15),
        Check::at_most("aggregate affine equivariance", affine, 1e-12),
    ]
}

fn brute_morph(l: &[u8], h: usize, w: usize, r: usize, dilation: bool) -> Vec<u8> {
    let r2 = (r * r) as i64;
    let ri = r as i64;
    let disk_size = (-ri..=ri)
        .flat_map(|dy| (-ri..=ri).map(move |dx| dy * dy + dx * dx))
        .filter(|&d| d <= r2)
        .count();
    let mut out = vec![0u8; h * w];
    for py in 0..h as i64 {
        for px in 0..w as i64 {
            let mut hits = 0;
            for qy in 0..h as i64 {
                for qx in 0..w as i64 {
                    let d = (qy - py).pow(2) + (qx - px).pow(2);
                    if d <= r2 && l[(qy * w as i64 + qx) as usize] != 0 {
                        hits += 1;
                    }
                }
            }
            let v = if dilation { hits > 0 } else { hits == disk_size };
            out[(py * w as i64 + px) as usize] = v as u8;
        }
    }
    out
}

/// Morphology against the set definitions on every 4x4 grid (r = 1), and
/// containment, idempotence and duality on random 32x32 grids.
pub fn morphology_checks(opts: &SelftestOptions) -> Vec<Check> {
    let se = StructuringElement::disk(1);
    let mut mismatches = 0usize;
    for bits in 0u32..1 << 16 {
        let l: Vec<u8> = (0..16).map(|i| ((bits >> i) & 1) as u8).collect();
        let be = brute_morph(&l, 4, 4, 1, false);
        let bd = brute_morph(&l, 4, 4, 1, true);
        let bo = brute_morph(&be, 4, 4, 1, true);
        let bc = brute_morph(&bd, 4, 4, 1, false);
        mismatches += (erode(&l, 4, 4, se) != be) as usize
            + (dilate(&l, 4, 4, se) != bd) as usize
            + (open(&l, 4, 4, se) != bo) as usize
            + (close(&l, 4, 4, se) != bc) as usize;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(4));
    let mut violations = 0usize;
    let n = 32;
    for _ in 0..1000 {
        let density = rng.gen_range(0.2..0.8);
        let l: Vec<u8> = (0..n * n).map(|_| rng.gen_bool(density) as u8).collect();
        let r = rng.gen_range(1..=3);
        let se = StructuringElement::disk(r);
        let (e, d, o, c) = (erode(&l, n, n, se), dilate(&l, n, n, se), open(&l, n, n, se), close(&l, n, n, se));
        let subset = |a: &[u8], b: &[u8]| a.iter().zip(b).all(|(&x, &y)| x <= y);
        violations += (!subset(&e, &l)) as usize
            + (!subset(&l, &d)) as usize
            + (!subset(&o, &l)) as usize
            + (open(&o, n, n, se) != o) as usize
            + (close(&c, n, n, se) != c) as usize;
        // With background outside the grid, closing can drop foreground
        // within r of the border and duality only holds away from it.
        let comp: Vec<u8> = l.iter().map(|&v| 1 - v).collect();
        let dual = erode(&comp, n, n, se);
        for y in r..n - r {
            for x in r..n - r {
                let i = y * n + x;
                violations += (d[i] != 1 - dual[i]) as usize + (l[i] > c[i]) as usize;
            }
        }
    }
    vec![
        Check::at_most("morphology vs set definition (4x4, r=1)", mismatches as f64, 0.0),
        Check::at_most("morphology properties (32x32)", violations as f64, 0.0),
    ]
}

pub fn run_all(opts: &SelftestOptions) -> Vec<Check> {
    let mut out = gradient_suite(opts);
    out.push(kl_oracle(opts));
    out.extend(loss_limits(opts));
    out.extend(aggregation_checks(opts));
    out.extend(morphology_checks(opts));
    out
}
