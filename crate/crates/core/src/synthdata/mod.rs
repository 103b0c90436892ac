//! Synthetic multi-center segmentation data.
//!
//! Each case is a blob-shaped body with one to three thin protrusions on a
//! smooth, noisy background. Centers differ by an intensity transform of the
//! image (feature skew) and by a morphological corruption of the training
//! labels (label skew). Case generation is keyed by `(seed, case id)`.

mod io;
mod morphology;

pub use io::{read_dataset, read_pgm, write_dataset, write_pgm, Manifest, ManifestCase, MANIFEST_VERSION};
pub use morphology::{close, dilate, erode, morphology, open, MorphOp, StructuringElement};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream, tag};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data spec: {0}")]
    Spec(String),
    #[error("case generation failed after {0} attempts")]
    Degenerate(usize),
    #[error("center {center}: corrupted label for case {case} is empty")]
    EmptyLabel { center: u32, case: u64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeomConfig {
    pub height: usize,
    pub width: usize,
}

impl Default for GeomConfig {
    fn default() -> Self {
        Self { height: 32, width: 32 }
    }
}

impl GeomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(DataError::Spec(format!(
                "grid {}x{} is smaller than 16x16",
                self.height, self.width
            )));
        }
        Ok(())
    }

    fn max_radius(&self) -> usize {
        self.height.min(self.width) / 8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Generic,
}

/// One case. `image` is (H, W) row-major, z-scored; labels are 0/1.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub id: u64,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f64>,
    pub label: Vec<u8>,
    pub clean_label: Vec<u8>,
}

impl SegSample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Image as a (1, H, W) tensor.
    pub fn image_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.image.clone()).expect("sample shape")
    }

    /// Label as a (2, H, W) one-hot tensor (background, foreground).
    pub fn onehot(&self) -> Tensor {
        onehot(&self.label, self.height, self.width)
    }
}

pub fn onehot(label: &[u8], h: usize, w: usize) -> Tensor {
    let m = h * w;
    let mut data = vec![0.0; 2 * m];
    for (i, &l) in label.iter().enumerate() {
        data[if l != 0 { m + i } else { i }] = 1.0;
    }
    Tensor::new(vec![2, h, w], data).expect("onehot shape")
}

/// Applied in the order gamma -> gain -> bias -> noise -> z-score. Gamma acts
/// on the image rescaled to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Intensity {
    pub gain: f64,
    pub bias: f64,
    pub gamma: f64,
    pub noise_std: f64,
}

impl Default for Intensity {
    fn default() -> Self {
        Self {
            gain: 1.0,
            bias: 0.0,
            gamma: 1.0,
            noise_std: 0.0,
        }
    }
}

/// Training labels get the deterministic operation at `radius` followed by
/// the random one at a radius drawn uniformly from `random_range`
/// (inclusive; 0 leaves the label unchanged). Local test labels get only the
/// deterministic operation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LabelSkew {
    None,
    OpenErode { radius: usize, random_range: (usize, usize) },
    CloseDilate { radius: usize, random_range: (usize, usize) },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CenterSpec {
    pub center_id: u32,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(default)]
    pub intensity: Intensity,
    pub label_skew: LabelSkew,
}

impl CenterSpec {
    pub fn validate(&self, geom: &GeomConfig) -> Result<()> {
        let who = format!("center {}", self.center_id);
        if self.n_train == 0 {
            return Err(DataError::Spec(format!("{who}: n_train must be positive")));
        }
        if self.n_test == 0 {
            return Err(DataError::Spec(format!("{who}: n_test must be positive")));
        }
        let i = &self.intensity;
        let finite = [i.gain, i.bias, i.gamma, i.noise_std].iter().all(|v| v.is_finite());
        if !finite || i.gain <= 0.0 || i.gamma <= 0.0 || i.noise_std < 0.0 {
            return Err(DataError::Spec(format!(
                "{who}: intensity needs gain > 0, gamma > 0, noise_std >= 0"
            )));
        }
        let max = geom.max_radius();
        match self.label_skew {
            LabelSkew::None => {}
            LabelSkew::OpenErode { radius, random_range: (lo, hi) }
            | LabelSkew::CloseDilate { radius, random_range: (lo, hi) } => {
                if radius < 1 || radius > max {
                    return Err(DataError::Spec(format!("{who}: radius {radius} outside [1, {max}]")));
                }
                if lo > hi || hi > max {
                    return Err(DataError::Spec(format!(
                        "{who}: random_range ({lo}, {hi}) must satisfy lo <= hi <= {max}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Four centers, each with its own intensity transform: two without label
/// skew, one with open + random erosion, one with close + random dilation.
pub fn default_centers() -> Vec<CenterSpec> {
    let base = |id, intensity, label_skew| CenterSpec {
        center_id: id,
        n_train: 12,
        n_test: 4,
        intensity,
        label_skew,
    };
    vec![
        base(
            0,
            Intensity {
                gamma: 0.7,
                noise_std: 0.05,
                ..Default::default()
            },
            LabelSkew::None,
        ),
        base(
            1,
            Intensity {
                gamma: 1.4,
                gain: 1.2,
                ..Default::default()
            },
            LabelSkew::None,
        ),
        base(
            2,
            Intensity {
                gamma: 0.85,
                gain: 0.8,
                noise_std: 0.1,
                ..Default::default()
            },
            LabelSkew::OpenErode {
                radius: 2,
                random_range: (0, 1),
            },
        ),
        base(
            3,
            Intensity {
                gamma: 1.2,
                bias: 0.3,
                noise_std: 0.15,
                ..Default::default()
            },
            LabelSkew::CloseDilate {
                radius: 2,
                random_range: (0, 1),
            },
        ),
    ]
}

fn zscore(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
}

/// Draws a clean case. The body is a rotated ellipse; protrusions are thin
/// bars leaving the body at nearby angles, so a closing bridges the gaps
/// between them and an opening removes them.
pub fn generate_case<R: Rng>(rng: &mut R, geom: &GeomConfig, id: u64) -> Result<SegSample> {
    geom.validate()?;
    const ATTEMPTS: usize = 10;
    let (h, w) = (geom.height, geom.width);
    let s = h.min(w) as f64 / 32.0;
    for _ in 0..ATTEMPTS {
        let cy = h as f64 / 2.0 + rng.gen_range(-2.0..2.0) * s;
        let cx = w as f64 / 2.0 + rng.gen_range(-2.0..2.0) * s;
        let a = rng.gen_range(5.0..7.0) * s;
        let b = rng.gen_range(4.5..6.5) * s;
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (st, ct) = theta.sin_cos();
        let n_bars = rng.gen_range(1..=3);
        let phi0: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let spacing = rng.gen_range(0.45..0.6);
        let bars: Vec<(f64, f64)> = (0..n_bars)
            .map(|k| {
                let phi = phi0 + k as f64 * spacing;
                (phi, a.max(b) + rng.gen_range(3.0..6.0) * s)
            })
            .collect();
        let half_width = 1.0 * s;

        let mut body = vec![0u8; h * w];
        let mut bar = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let u = (dx * ct + dy * st) / a;
                let v = (-dx * st + dy * ct) / b;
                if u * u + v * v <= 1.0 {
                    body[y * w + x] = 1;
                }
                for &(phi, len) in &bars {
                    let (sp, cp) = phi.sin_cos();
                    let along = dx * cp + dy * sp;
                    let across = -dx * sp + dy * cp;
                    if (0.0..=len).contains(&along) && across.abs() <= half_width {
                        bar[y * w + x] = 1;
                    }
                }
            }
        }
        let protrusion = body.iter().zip(&bar).filter(|&(&b, &v)| b == 0 && v == 1).count();
        if protrusion == 0 || body.iter().all(|&v| v == 0) {
            continue;
        }
        let label: Vec<u8> = body.iter().zip(&bar).map(|(&b, &v)| b | v).collect();

        let fy = rng.gen_range(0.5..1.5) / h as f64;
        let fx = rng.gen_range(0.5..1.5) / w as f64;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut image = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let fg = if body[i] == 1 {
                    1.0
                } else if bar[i] == 1 {
                    0.55
                } else {
                    0.0
                };
                let field = 0.25 * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + phase).sin();
                let noise: f64 = StandardNormal.sample(rng);
                image[i] = fg + field + 0.2 * noise;
            }
        }
        zscore(&mut image);
        return Ok(SegSample {
            id,
            height: h,
            width: w,
            image,
            clean_label: label.clone(),
            label,
        });
    }
    Err(DataError::Degenerate(ATTEMPTS))
}

fn apply_intensity<R: Rng>(image: &mut [f64], it: &Intensity, rng: &mut R) {
    let lo = image.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = image.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    for v in image.iter_mut() {
        let unit = (*v - lo) / span;
        let mut x = unit.powf(it.gamma);
        x = it.gain * x + it.bias;
        if it.noise_std > 0.0 {
            let n: f64 = StandardNormal.sample(rng);
            x += it.noise_std * n;
        }
        *v = x;
    }
    zscore(image);
}

fn corrupt(clean: &[u8], h: usize, w: usize, skew: LabelSkew, split: Split, random_r: usize) -> Vec<u8> {
    let (det, rnd, r) = match skew {
        LabelSkew::None => return clean.to_vec(),
        LabelSkew::OpenErode { radius, .. } => (MorphOp::Open, MorphOp::Erode, radius),
        LabelSkew::CloseDilate { radius, .. } => (MorphOp::Close, MorphOp::Dilate, radius),
    };
    let base = match split {
        Split::Generic => return clean.to_vec(),
        _ => morphology(clean, h, w, det, StructuringElement::disk(r)),
    };
    match split {
        Split::Train => morphology(&base, h, w, rnd, StructuringElement::disk(random_r)),
        _ => base,
    }
}

/// Feature and label skew of one center. The image always gets the
/// intensity transform; labels follow the split rule of [`LabelSkew`]; the
/// clean label is never touched. An empty corrupted label is retried once
/// with both radii halved.
pub fn apply_center_skew<R: Rng>(sample: &SegSample, spec: &CenterSpec, rng: &mut R, split: Split) -> Result<SegSample> {
    let mut out = sample.clone();
    apply_intensity(&mut out.image, &spec.intensity, rng);
    let random_r = match spec.label_skew {
        LabelSkew::None => 0,
        LabelSkew::OpenErode { random_range: (lo, hi), .. } | LabelSkew::CloseDilate { random_range: (lo, hi), .. } => {
            rng.gen_range(lo..=hi)
        }
    };
    let (h, w) = (sample.height, sample.width);
    let mut label = corrupt(&sample.clean_label, h, w, spec.label_skew, split, random_r);
    if label.iter().all(|&v| v == 0) {
        let halved = match spec.label_skew {
            LabelSkew::OpenErode { radius, random_range } => LabelSkew::OpenErode {
                radius: radius / 2,
                random_range,
            },
            LabelSkew::CloseDilate { radius, random_range } => LabelSkew::CloseDilate {
                radius: radius / 2,
                random_range,
            },
            LabelSkew::None => LabelSkew::None,
        };
        label = corrupt(&sample.clean_label, h, w, halved, split, random_r / 2);
        if label.iter().all(|&v| v == 0) {
            return Err(DataError::EmptyLabel {
                center: spec.center_id,
                case: sample.id,
            });
        }
    }
    out.label = label;
    Ok(out)
}

/// Train and local-test cases of one center.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterData {
    pub spec: CenterSpec,
    pub train: Vec<SegSample>,
    pub test: Vec<SegSample>,
}

/// All per-center data plus the generic test set.
#[derive(Debug, Clone, PartialEq)]
pub struct Federation {
    pub geom: GeomConfig,
    pub seed: u64,
    pub centers: Vec<CenterData>,
    pub generic: Vec<SegSample>,
}

impl Federation {
    pub fn total_cases(&self) -> usize {
        self.generic.len() + self.centers.iter().map(|c| c.train.len() + c.test.len()).sum::<usize>()
    }
}

pub fn validate_specs(specs: &[CenterSpec], geom: &GeomConfig, n_generic: usize) -> Result<()> {
    geom.validate()?;
    if specs.is_empty() {
        return Err(DataError::Spec("at least one center is required".into()));
    }
    if n_generic == 0 {
        return Err(DataError::Spec("n_generic must be positive".into()));
    }
    let mut ids: Vec<u32> = specs.iter().map(|s| s.center_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|p| p[0] == p[1]) {
        return Err(DataError::Spec("center ids must be distinct".into()));
    }
    specs.iter().try_for_each(|s| s.validate(geom))
}

/// Generates every set. Case ids are assigned consecutively: centers in the
/// given order (train then test), then the generic set. The generic set has
/// no feature or label skew.
pub fn build_federation_data(specs: &[CenterSpec], n_generic: usize, geom: &GeomConfig, seed: u64) -> Result<Federation> {
    validate_specs(specs, geom, n_generic)?;
    let mut next_id = 0u64;
    let mut case = |split: Split, spec: Option<&CenterSpec>| -> Result<SegSample> {
        let id = next_id;
        next_id += 1;
        let clean = generate_case(&mut stream(&[seed, tag::CASE, id]), geom, id)?;
        match spec {
            Some(spec) => apply_center_skew(&clean, spec, &mut stream(&[seed, tag::SKEW, id]), split),
            None => Ok(clean),
        }
    };
    let mut centers = Vec::with_capacity(specs.len());
    for spec in specs {
        let train = (0..spec.n_train)
            .map(|_| case(Split::Train, Some(spec)))
            .collect::<Result<Vec<_>>>()?;
        let test = (0..spec.n_test)
            .map(|_| case(Split::Test, Some(spec)))
            .collect::<Result<Vec<_>>>()?;
        centers.push(CenterData {
            spec: spec.clone(),
            train,
            test,
        });
    }
    let generic = (0..n_generic)
        .map(|_| case(Split::Generic, None))
        .collect::<Result<Vec<_>>>()?;
    Ok(Federation {
        geom: *geom,
        seed,
        centers,
        generic,
    })
}

/// Quarter turns counter-clockwise of a square (n x n) grid.
pub fn rotate90<T: Copy>(v: &[T], n: usize, turns: usize) -> Vec<T> {
    let mut cur = v.to_vec();
    for _ in 0..turns % 4 {
        let mut next = cur.clone();
        for y in 0..n {
            for x in 0..n {
                next[(n - 1 - x) * n + y] = cur[y * n + x];
            }
        }
        cur = next;
    }
    cur
}

/// Left-right mirror of an (h x w) grid.
pub fn flip_horizontal<T: Copy>(v: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = v.to_vec();
    for y in 0..h {
        out[y * w..(y + 1) * w].reverse();
    }
    out
}

/// Standard deviation of the image noise added by [`augment`].
pub const AUGMENT_NOISE: f64 = 0.05;

/// Random flip and quarter-turn applied jointly to image and labels, then
/// Gaussian noise on the image. Rotation is skipped for non-square grids.
pub fn augment<R: Rng>(sample: &SegSample, rng: &mut R) -> SegSample {
    let (h, w) = (sample.height, sample.width);
    let mut out = sample.clone();
    if rng.gen_bool(0.5) {
        out.image = flip_horizontal(&out.image, h, w);
        out.label = flip_horizontal(&out.label, h, w);
        out.clean_label = flip_horizontal(&out.clean_label, h, w);
    }
    let turns = rng.gen_range(0..4);
    if h == w && turns > 0 {
        out.image = rotate90(&out.image, h, turns);
        out.label = rotate90(&out.label, h, turns);
        out.clean_label = rotate90(&out.clean_label, h, turns);
    }
    for v in out.image.iter_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *v += AUGMENT_NOISE * n;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn case(seed: u64) -> SegSample {
        generate_case(&mut ChaCha8Rng::seed_from_u64(seed), &GeomConfig::default(), seed).unwrap()
    }

    #[test]
    fn generated_case_contract() {
        for seed in 0..20 {
            let c = case(seed);
            assert!(c.label.iter().any(|&v| v == 1));
            assert_eq!(c.label, c.clean_label);
            let n = c.image.len() as f64;
            let mean = c.image.iter().sum::<f64>() / n;
            let sd = (c.image.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-6 && (sd - 1.0).abs() < 1e-6);
            // Opening with the default radius removes the protrusions.
            let opened = open(&c.label, 32, 32, StructuringElement::disk(2));
            assert!(opened.iter().filter(|&&v| v == 1).count() < c.label.iter().filter(|&&v| v == 1).count());
        }
        assert_eq!(case(7), case(7));
    }

    #[test]
    fn skew_split_rules() {
        let c = case(3);
        let specs = default_centers();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let none = apply_center_skew(&c, &specs[0], &mut rng, Split::Train).unwrap();
        assert_eq!(none.label, c.clean_label);
        assert_ne!(none.image, c.image);

        let train = apply_center_skew(&c, &specs[2], &mut rng, Split::Train).unwrap();
        let opened = open(&c.clean_label, 32, 32, StructuringElement::disk(2));
        assert!(train.label.iter().zip(&opened).all(|(&a, &b)| a <= b));
        assert_eq!(train.clean_label, c.clean_label);

        let test = apply_center_skew(&c, &specs[3], &mut rng, Split::Test).unwrap();
        assert_eq!(test.label, close(&c.clean_label, 32, 32, StructuringElement::disk(2)));
    }

    #[test]
    fn federation_accounting() {
        let specs = default_centers();
        let fed = build_federation_data(&specs, 24, &GeomConfig::default(), 5).unwrap();
        let expected: usize = specs.iter().map(|s| s.n_train + s.n_test).sum::<usize>() + 24;
        assert_eq!(fed.total_cases(), expected);
        let mut ids: Vec<u64> = fed
            .centers
            .iter()
            .flat_map(|c| c.train.iter().chain(&c.test))
            .chain(&fed.generic)
            .map(|s| s.id)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), expected);
    }

    #[test]
    fn spec_validation() {
        let geom = GeomConfig::default();
        let mut s = default_centers()[2].clone();
        assert!(s.validate(&geom).is_ok());
        s.n_train = 0;
        assert!(s.validate(&geom).is_err());
        let mut s = default_centers()[2].clone();
        s.label_skew = LabelSkew::OpenErode {
            radius: 5,
            random_range: (0, 1),
        };
        assert!(s.validate(&geom).is_err());
        let dup = vec![default_centers()[0].clone(), default_centers()[0].clone()];
        assert!(validate_specs(&dup, &geom, 4).is_err());
    }

    #[test]
    fn augment_keeps_labels_binary() {
        let c = case(11);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let a = augment(&c, &mut rng);
            assert!(a.label.iter().all(|&v| v <= 1));
            assert_eq!(
                a.label.iter().filter(|&&v| v == 1).count(),
                c.label.iter().filter(|&&v| v == 1).count()
            );
        }
    }

    #[test]
    fn rotations_and_flips_compose_to_identity() {
        let v: Vec<u32> = (0..16).collect();
        assert_eq!(rotate90(&rotate90(&v, 4, 3), 4, 1), v);
        assert_eq!(rotate90(&v, 4, 4), v);
        assert_eq!(flip_horizontal(&flip_horizontal(&v, 4, 4), 4, 4), v);
        assert_eq!(rotate90(&v, 4, 1)[0], 3);
    }
}
