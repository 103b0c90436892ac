use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swarmseg::nets::*;
use swarmseg::params::ParameterSet;
use swarmseg::synthdata::onehot;
use swarmseg::tensor::{Tape, Tensor};

fn small() -> NetConfig {
    NetConfig {
        classes: 2,
        latent_dim: 3,
        base_channels: 4,
        depth: 2,
        height: 8,
        width: 8,
        da_channels: 3,
    }
}

fn image(rng: &mut ChaCha8Rng, cfg: &NetConfig) -> Tensor {
    let n = cfg.pixels();
    Tensor::new(vec![1, cfg.height, cfg.width], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn zero_prefix(p: &mut ParameterSet, prefix: &str) {
    for (name, t) in p.iter_mut() {
        if name.starts_with(prefix) {
            t.data_mut().fill(0.0);
        }
    }
}

fn seg(p: &ParameterSet, cfg: &NetConfig, x: &Tensor, z: &[f64]) -> Vec<f64> {
    let mut t = Tape::new();
    let b = p.bind_frozen(&mut t);
    let x = t.constant(x);
    let z = t.constant(&Tensor::from_vec(z.to_vec()));
    let out = forward_seg(&mut t, &b, cfg, x, Some(z)).unwrap();
    assert_eq!(t.shape(out), &[cfg.classes, cfg.height, cfg.width]);
    t.value(out).to_vec()
}

fn prior(p: &ParameterSet, cfg: &NetConfig, x: &Tensor) -> GaussianDiag {
    let mut t = Tape::new();
    let b = p.bind_frozen(&mut t);
    let x = t.constant(x);
    let g = forward_prior(&mut t, &b, cfg, x).unwrap();
    g.values(&t)
}

fn posterior(p: &ParameterSet, cfg: &NetConfig, x: &Tensor, label: &[u8]) -> GaussianDiag {
    let mut t = Tape::new();
    let b = p.bind_frozen(&mut t);
    let x = t.constant(x);
    let y = t.constant(&onehot(label, cfg.height, cfg.width));
    let g = forward_posterior(&mut t, &b, cfg, x, y).unwrap();
    g.values(&t)
}

fn field(p: &ParameterSet, cfg: &NetConfig, cond: Option<&Tensor>, mode: DaMode) -> AdaptationField {
    let mut t = Tape::new();
    let b = p.bind_frozen(&mut t);
    let cond = cond.map(|c| t.constant(c));
    let w = forward_da(&mut t, &b, cfg, cond, mode).unwrap();
    AdaptationField::from_tape(&t, w, cfg.classes).unwrap()
}

#[test]
fn seg_outputs_are_per_pixel_distributions_and_deterministic() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = init_seg(&cfg, true, &mut rng).unwrap();
    let x = image(&mut rng, &cfg);
    let z = [0.3, -1.0, 0.5];
    let a = seg(&p, &cfg, &x, &z);
    let m = cfg.pixels();
    for i in 0..m {
        assert!((a[i] + a[m + i] - 1.0).abs() <= 1e-9);
    }
    let b = seg(&p, &cfg, &x, &z);
    assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
}

#[test]
fn zero_head_gives_uniform_probabilities() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = init_seg(&cfg, true, &mut rng).unwrap();
    zero_prefix(&mut p, "seg.head");
    let out = seg(&p, &cfg, &image(&mut rng, &cfg), &[1.0, 2.0, 3.0]);
    assert!(out.iter().all(|v| (v - 0.5).abs() < 1e-15));
}

#[test]
fn latent_code_changes_the_segmentation() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = init_seg(&cfg, true, &mut rng).unwrap();
    let x = image(&mut rng, &cfg);
    assert_ne!(seg(&p, &cfg, &x, &[0.0; 3]), seg(&p, &cfg, &x, &[2.0, -2.0, 1.0]));
}

#[test]
fn encoders_with_zero_heads_are_standard_normal() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pr = init_prior(&cfg, &mut rng).unwrap();
    let mut po = init_posterior(&cfg, &mut rng).unwrap();
    zero_prefix(&mut pr, "prior.mu");
    zero_prefix(&mut pr, "prior.logsigma");
    zero_prefix(&mut po, "post.mu");
    zero_prefix(&mut po, "post.logsigma");
    let x = image(&mut rng, &cfg);
    let label = vec![1u8; cfg.pixels()];
    for g in [prior(&pr, &cfg, &x), posterior(&po, &cfg, &x, &label)] {
        assert_eq!(g.dim(), cfg.latent_dim);
        assert!(g.mu.iter().all(|v| *v == 0.0));
        assert!(g.log_sigma.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn encoders_respond_to_their_inputs() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pr = init_prior(&cfg, &mut rng).unwrap();
    let po = init_posterior(&cfg, &mut rng).unwrap();
    let (a, b) = (image(&mut rng, &cfg), image(&mut rng, &cfg));
    let ga = prior(&pr, &cfg, &a);
    assert_eq!(ga.dim(), cfg.latent_dim);
    assert_ne!(ga.mu, prior(&pr, &cfg, &b).mu);

    let mut label = vec![0u8; cfg.pixels()];
    label[..cfg.pixels() / 2].fill(1);
    let flipped: Vec<u8> = label.iter().map(|v| 1 - v).collect();
    let q = posterior(&po, &cfg, &a, &label);
    assert_eq!(q.dim(), cfg.latent_dim);
    assert_ne!(q.mu, posterior(&po, &cfg, &a, &flipped).mu);
}

#[test]
fn adaptation_fields_are_column_stochastic_in_every_mode() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let latent = Tensor::new(
        vec![cfg.latent_dim, cfg.height, cfg.width],
        (0..cfg.latent_dim * cfg.pixels()).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap();
    let img = image(&mut rng, &cfg);
    for (mode, cond) in [
        (DaMode::Distribution, Some(&latent)),
        (DaMode::Image, Some(&img)),
        (DaMode::Fixed, None),
    ] {
        let p = init_da(&cfg, mode, &mut rng).unwrap();
        let f = field(&p, &cfg, cond, mode);
        assert_eq!(f.w.len(), 4 * cfg.pixels(), "{mode:?}: 2x2 per pixel");
        let err = f.column_error().expect("entries are non-negative");
        assert!(err <= 1e-6, "{mode:?}: column error {err}");
    }
}

#[test]
fn fixed_mode_ignores_its_conditioning() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = init_da(&cfg, DaMode::Fixed, &mut rng).unwrap();
    let (a, b) = (image(&mut rng, &cfg), image(&mut rng, &cfg));
    assert_eq!(
        field(&p, &cfg, Some(&a), DaMode::Fixed),
        field(&p, &cfg, Some(&b), DaMode::Fixed)
    );
}

#[test]
fn mode_and_shape_mismatches_are_errors() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = init_da(&cfg, DaMode::Distribution, &mut rng).unwrap();
    let img = image(&mut rng, &cfg);
    let mut t = Tape::new();
    let b = p.bind_frozen(&mut t);
    let x = t.constant(&img);
    assert!(forward_da(&mut t, &b, &cfg, Some(x), DaMode::Distribution).is_err());
    assert!(forward_da(&mut t, &b, &cfg, None, DaMode::Distribution).is_err());

    let s = init_seg(&cfg, true, &mut rng).unwrap();
    let sb = s.bind_frozen(&mut t);
    let z = t.constant(&Tensor::from_vec(vec![0.0; cfg.latent_dim + 1]));
    assert!(forward_seg(&mut t, &sb, &cfg, x, Some(z)).is_err());
    let wrong = t.constant(&Tensor::zeros(&[1, 4, 4]));
    assert!(forward_prior(&mut t, &sb, &cfg, wrong).is_err());
}

#[test]
fn config_rejects_grids_not_divisible_by_the_depth() {
    let cfg = NetConfig {
        height: 12,
        depth: 3,
        ..NetConfig::default()
    };
    assert!(cfg.validate().is_err());
    assert!(init_seg(&cfg, false, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}
