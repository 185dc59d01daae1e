//! Procedural multi-domain image generator.
//!
//! Every class is a fixed arrangement of 3 to 6 colored Gaussian blobs on a
//! gray field. Instances jitter blob positions and strengths, then pass
//! through the domain transformation, then receive additive Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};

/// The per-domain transformation applied to every rendered image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DomainTransform {
    Identity,
    /// Per-pixel channel mixing `x -> M x` with a `C x C` row-major matrix,
    /// applied after standardization.
    ChannelMix { matrix: Vec<f64> },
    /// Rotation of the whole pattern about the image center.
    Rotation { degrees: f64 },
    /// Additive sinusoidal grating with per-channel phase, fixed per domain.
    Texture { amplitude: f64, cycles: f64 },
    /// Extra Gaussian pixel noise on top of the instance noise.
    Noise { sigma: f64 },
}

impl DomainTransform {
    pub fn family(&self) -> &'static str {
        match self {
            DomainTransform::Identity => "identity",
            DomainTransform::ChannelMix { .. } => "channel_mix",
            DomainTransform::Rotation { .. } => "rotation",
            DomainTransform::Texture { .. } => "texture",
            DomainTransform::Noise { .. } => "noise",
        }
    }

    /// Scalar strength used to compare parameter ranges across domains:
    /// Frobenius distance from identity for mixing, absolute angle for
    /// rotation, amplitude for texture, sigma for noise.
    pub fn magnitude(&self) -> f64 {
        match self {
            DomainTransform::Identity => 0.0,
            DomainTransform::ChannelMix { matrix } => {
                let c = (matrix.len() as f64).sqrt().round() as usize;
                matrix
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| {
                        let eye = if k / c == k % c { 1.0 } else { 0.0 };
                        (v - eye) * (v - eye)
                    })
                    .sum::<f64>()
                    .sqrt()
            }
            DomainTransform::Rotation { degrees } => degrees.abs(),
            DomainTransform::Texture { amplitude, .. } => amplitude.abs(),
            DomainTransform::Noise { sigma } => sigma.abs(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 16,
            val: 4,
            test: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub name: String,
    /// Seeds the class prototypes; domains sharing it share their classes.
    pub prototype_seed: u64,
    pub transform: DomainTransform,
    pub seen: bool,
    /// Classes per split, assigned in class-id order train, val, test.
    pub splits: SplitSizes,
    pub images_per_class: usize,
    pub resolution: usize,
    pub instance_noise: f64,
    /// Standard deviation of blob-center jitter, in pixels.
    pub jitter: f64,
    /// Scale of the per-channel color component of each blob; the shared
    /// (gray) component has scale 1, so small values give strongly
    /// correlated channels.
    pub chroma: f64,
    /// Standardize channels with train-split statistics (before any
    /// channel mixing).
    pub standardize: bool,
}

impl SyntheticDomainSpec {
    pub fn new(name: impl Into<String>, prototype_seed: u64, transform: DomainTransform, seen: bool) -> Self {
        SyntheticDomainSpec {
            name: name.into(),
            prototype_seed,
            transform,
            seen,
            splits: SplitSizes::default(),
            images_per_class: 30,
            resolution: 32,
            instance_noise: 0.05,
            jitter: 1.5,
            chroma: 0.0,
            standardize: true,
        }
    }

    fn validate(&self) -> Result<()> {
        let err = |reason: &str| Error::Dataset {
            dataset: self.name.clone(),
            reason: reason.into(),
        };
        if self.splits.total() < 2 {
            return Err(err("needs at least 2 classes"));
        }
        if self.images_per_class == 0 {
            return Err(err("images_per_class must be positive"));
        }
        if self.resolution < 4 {
            return Err(err("resolution must be at least 4"));
        }
        if !(self.instance_noise >= 0.0 && self.jitter >= 0.0 && self.chroma >= 0.0) {
            return Err(err("noise, jitter and chroma must be non-negative"));
        }
        match &self.transform {
            DomainTransform::ChannelMix { matrix } if matrix.len() != 9 => {
                Err(err("channel-mixing matrix must be 3x3"))
            }
            DomainTransform::ChannelMix { matrix } => {
                let m = tsa_tensor::Tensor::new([3, 3], matrix.clone())?;
                let cond = super::condition_number(&m);
                if cond.is_finite() {
                    Ok(())
                } else {
                    Err(err("channel-mixing matrix is singular"))
                }
            }
            t if !t.magnitude().is_finite() => Err(err("non-finite transform parameter")),
            _ => Ok(()),
        }
    }
}

/// Checks that, per transformation family, every unseen domain's strength
/// lies outside the closed range spanned by the seen domains.
pub fn check_seen_unseen_disjoint(specs: &[SyntheticDomainSpec]) -> Result<()> {
    for unseen in specs.iter().filter(|s| !s.seen) {
        let family = unseen.transform.family();
        let seen: Vec<f64> = specs
            .iter()
            .filter(|s| s.seen && s.transform.family() == family)
            .map(|s| s.transform.magnitude())
            .collect();
        if seen.is_empty() {
            continue;
        }
        let lo = seen.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = seen.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let m = unseen.transform.magnitude();
        if (lo..=hi).contains(&m) {
            return Err(Error::Dataset {
                dataset: unseen.name.clone(),
                reason: format!("unseen {family} strength {m:.4} falls inside the seen range [{lo:.4}, {hi:.4}]"),
            });
        }
    }
    Ok(())
}

struct Blob {
    cx: f64,
    cy: f64,
    sigma: f64,
    color: [f64; 3],
}

fn prototype(seed: u64, class: usize, res: usize, chroma: f64) -> Vec<Blob> {
    let mut rng = rng_for(seed, &[0, class as u64]);
    let r = res as f64;
    let n = rng.gen_range(3..=6);
    (0..n)
        .map(|_| Blob {
            cx: rng.gen_range(0.2..0.8) * r,
            cy: rng.gen_range(0.2..0.8) * r,
            sigma: rng.gen_range(0.07..0.18) * r,
            color: {
                let gray: f64 = rng.gen_range(-0.5..0.5);
                [0, 1, 2].map(|_| gray + chroma * rng.gen_range(-0.5..0.5))
            },
        })
        .collect()
}

/// Renders one untransformed, noise-free instance in `[0, 1]`.
fn render_instance(blobs: &[Blob], res: usize, jitter: f64, degrees: f64, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let c0 = (res as f64 - 1.0) / 2.0;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let placed: Vec<(f64, f64, f64, [f64; 3])> = blobs
        .iter()
        .map(|b| {
            let x = b.cx + jitter * normal.sample(rng) - c0;
            let y = b.cy + jitter * normal.sample(rng) - c0;
            let amp = rng.gen_range(0.75..1.25);
            let sigma = b.sigma * rng.gen_range(0.9..1.1);
            (
                c0 + cos * x - sin * y,
                c0 + sin * x + cos * y,
                sigma,
                [b.color[0] * amp, b.color[1] * amp, b.color[2] * amp],
            )
        })
        .collect();
    let plane = res * res;
    let mut img = vec![0.5; 3 * plane];
    for y in 0..res {
        for x in 0..res {
            for &(cx, cy, s, color) in &placed {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let w = (-d2 / (2.0 * s * s)).exp();
                for c in 0..3 {
                    img[c * plane + y * res + x] += w * color[c];
                }
            }
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// Renders one domain. `seed` is the generator seed shared by a domain list.
pub fn render_domain(spec: &SyntheticDomainSpec, domain_id: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let res = spec.resolution;
    let plane = res * res;
    let classes = spec.splits.total();
    let proto_seed = derive_seed(seed, &[spec.prototype_seed]);
    let texture = match spec.transform {
        DomainTransform::Texture { amplitude, cycles } => {
            let mut t = vec![0.0; 3 * plane];
            let k = std::f64::consts::TAU * cycles / res as f64;
            add_grating(&mut t, res, amplitude, k, &mut rng_for(proto_seed, &[1]));
            Some(t)
        }
        _ => None,
    };
    let degrees = match spec.transform {
        DomainTransform::Rotation { degrees } => degrees,
        _ => 0.0,
    };
    let extra_noise = match spec.transform {
        DomainTransform::Noise { sigma } => sigma,
        _ => 0.0,
    };
    let noise_sigma = (spec.instance_noise.powi(2) + extra_noise.powi(2)).sqrt();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");

    let mut images = Vec::with_capacity(classes * spec.images_per_class * 3 * plane);
    let mut labels = Vec::with_capacity(classes * spec.images_per_class);
    for class in 0..classes {
        let blobs = prototype(proto_seed, class, res, spec.chroma);
        for inst in 0..spec.images_per_class {
            let mut rng = rng_for(proto_seed, &[2, class as u64, inst as u64]);
            let mut img = render_instance(&blobs, res, spec.jitter, degrees, &mut rng);
            if let Some(t) = &texture {
                for (v, tv) in img.iter_mut().zip(t) {
                    *v += tv;
                }
            }
            if noise_sigma > 0.0 {
                for v in &mut img {
                    *v += noise_sigma * noise.sample(&mut rng);
                }
            }
            images.extend(img);
            labels.push(class);
        }
    }
    let s = spec.splits;
    let class_splits = std::iter::repeat(Split::Train)
        .take(s.train)
        .chain(std::iter::repeat(Split::Val).take(s.val))
        .chain(std::iter::repeat(Split::Test).take(s.test))
        .collect();
    let mut ds = Dataset::new(spec.name.clone(), domain_id, spec.seen, (3, res, res), images, labels, class_splits)?;
    if spec.standardize {
        ds.standardize();
    }
    // mixing after standardization keeps it a color shift that per-domain
    // statistics cannot undo
    if let DomainTransform::ChannelMix { matrix } = &spec.transform {
        for img in ds.images.chunks_mut(3 * plane) {
            for p in 0..plane {
                let px = [img[p], img[plane + p], img[2 * plane + p]];
                for c in 0..3 {
                    img[c * plane + p] = matrix[c * 3] * px[0] + matrix[c * 3 + 1] * px[1] + matrix[c * 3 + 2] * px[2];
                }
            }
        }
    }
    Ok(ds)
}

/// Generates every domain in `specs`; domain ids follow list order.
pub fn gen_synthetic_domains(specs: &[SyntheticDomainSpec], seed: u64) -> Result<Vec<Dataset>> {
    check_seen_unseen_disjoint(specs)?;
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| render_domain(spec, i, seed))
        .collect()
}

fn mix_with_strength(rng: &mut impl Rng, lo: f64, hi: f64) -> Vec<f64> {
    loop {
        let target = rng.gen_range(lo..hi);
        let dir: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        let matrix: Vec<f64> = dir
            .iter()
            .enumerate()
            .map(|(k, d)| if k / 3 == k % 3 { 1.0 } else { 0.0 } + d * target / norm)
            .collect();
        let m = tsa_tensor::Tensor::new([3, 3], matrix.clone()).expect("3x3");
        if super::condition_number(&m) < 20.0 {
            return matrix;
        }
    }
}

/// Adds `amplitude * sin(k u + phase_c)` along a random orientation `u`
/// with an independent random phase per channel.
fn add_grating(img: &mut [f64], res: usize, amplitude: f64, k: f64, rng: &mut impl Rng) {
    let plane = res * res;
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (cos, sin) = (angle.cos(), angle.sin());
    for c in 0..3 {
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        for y in 0..res {
            for x in 0..res {
                let u = x as f64 * cos + y as f64 * sin;
                img[c * plane + y * res + x] += amplitude * (k * u + phase).sin();
            }
        }
    }
}

/// Per-pixel instance noise of every unseen benchmark domain, on top of its
/// family transform.
pub const UNSEEN_INSTANCE_NOISE: f64 = 0.3;

/// A standard benchmark: `n_seen` seen and `n_unseen` unseen domains with
/// distinct class prototypes. Transformation families cycle through
/// channel mixing, rotation, texture and noise; unseen strengths come from
/// ranges disjoint from (and above) the seen ones. Seen channel mixing stays
/// near the identity while unseen channel mixing rotates luminance into a
/// chroma direction. Unseen domains also carry stronger instance noise.
/// The first seen domain is untransformed.
pub fn benchmark_domains(n_seen: usize, n_unseen: usize, seed: u64) -> Vec<SyntheticDomainSpec> {
    let mut rng = rng_for(seed, &[7]);
    let mut specs = Vec::with_capacity(n_seen + n_unseen);
    for i in 0..n_seen {
        let transform = match i % 4 {
            0 if i == 0 => DomainTransform::Identity,
            0 => DomainTransform::ChannelMix {
                matrix: mix_with_strength(&mut rng, 0.1, 0.4),
            },
            1 => DomainTransform::Rotation {
                degrees: rng.gen_range(0.0..30.0),
            },
            2 => DomainTransform::Texture {
                amplitude: rng.gen_range(0.02..0.1),
                cycles: rng.gen_range(2.0..6.0),
            },
            _ => DomainTransform::Noise {
                sigma: rng.gen_range(0.0..0.05),
            },
        };
        specs.push(SyntheticDomainSpec::new(format!("seen{i}"), 1000 + i as u64, transform, true));
    }
    for j in 0..n_unseen {
        let transform = match j % 4 {
            0 => DomainTransform::ChannelMix {
                matrix: super::luminance_swap_matrix(3, 1.0, &mut rng)
                    .expect("three channels")
                    .data()
                    .to_vec(),
            },
            1 => DomainTransform::Rotation {
                degrees: rng.gen_range(60.0..120.0),
            },
            2 => DomainTransform::Texture {
                amplitude: rng.gen_range(0.6..0.9),
                cycles: rng.gen_range(2.0..6.0),
            },
            _ => DomainTransform::Noise {
                sigma: rng.gen_range(0.35..0.5),
            },
        };
        let mut spec = SyntheticDomainSpec::new(format!("unseen{j}"), 2000 + j as u64, transform, false);
        spec.instance_noise = UNSEEN_INSTANCE_NOISE;
        specs.push(spec);
    }
    specs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(name: &str, transform: DomainTransform, seen: bool) -> SyntheticDomainSpec {
        SyntheticDomainSpec {
            splits: SplitSizes { train: 3, val: 1, test: 2 },
            images_per_class: 4,
            resolution: 12,
            ..SyntheticDomainSpec::new(name, 5, transform, seen)
        }
    }

    #[test]
    fn degenerate_specs_error() {
        let mut s = small("a", DomainTransform::Identity, true);
        s.images_per_class = 0;
        assert!(render_domain(&s, 0, 1).is_err());
        let mut s = small("a", DomainTransform::Identity, true);
        s.splits = SplitSizes { train: 1, val: 0, test: 0 };
        assert!(render_domain(&s, 0, 1).is_err());
        let s = small("a", DomainTransform::ChannelMix { matrix: vec![1.0; 9] }, true);
        assert!(render_domain(&s, 0, 1).is_err());
    }

    #[test]
    fn disjointness_is_enforced() {
        let seen = small("s", DomainTransform::Rotation { degrees: 20.0 }, true);
        let seen2 = small("s2", DomainTransform::Rotation { degrees: 40.0 }, true);
        let inside = small("u", DomainTransform::Rotation { degrees: 30.0 }, false);
        let outside = small("u", DomainTransform::Rotation { degrees: 80.0 }, false);
        assert!(check_seen_unseen_disjoint(&[seen.clone(), seen2.clone(), inside]).is_err());
        assert!(check_seen_unseen_disjoint(&[seen, seen2, outside]).is_ok());
        let specs = benchmark_domains(4, 4, 9);
        assert!(check_seen_unseen_disjoint(&specs).is_ok());
    }

    #[test]
    fn splits_follow_class_order() {
        let d = render_domain(&small("a", DomainTransform::Identity, true), 0, 1).unwrap();
        assert_eq!(d.classes_in(Split::Train), vec![0, 1, 2]);
        assert_eq!(d.classes_in(Split::Val), vec![3]);
        assert_eq!(d.classes_in(Split::Test), vec![4, 5]);
        assert_eq!(d.len(), 24);
    }
}
