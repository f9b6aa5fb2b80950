//! Procedural head phantoms: a CSF shell around a gray-matter layer around a
//! white-matter core, with extra white-matter lobes, deep gray nuclei and
//! CSF ventricles painted on top.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};

pub const LABEL_CSF: u32 = 1;
pub const LABEL_GRAY: u32 = 2;
pub const LABEL_WHITE: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub side: usize,
    /// Inclusive count ranges of the extra ellipsoids per tissue.
    pub csf_blobs: [usize; 2],
    pub gray_blobs: [usize; 2],
    pub white_blobs: [usize; 2],
    pub csf_band: [f64; 2],
    pub gray_band: [f64; 2],
    pub white_band: [f64; 2],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            side: 32,
            csf_blobs: [1, 3],
            gray_blobs: [1, 3],
            white_blobs: [1, 2],
            csf_band: [0.2, 0.35],
            gray_band: [0.5, 0.65],
            white_band: [0.8, 0.95],
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side < 16 {
            return Err(Error::BadSpec(format!("phantom side {} is below 16", self.side)));
        }
        for (name, [lo, hi]) in [("csf_blobs", self.csf_blobs), ("gray_blobs", self.gray_blobs), ("white_blobs", self.white_blobs)] {
            if lo > hi {
                return Err(Error::BadSpec(format!("{name} range [{lo}, {hi}] is empty")));
            }
        }
        let bands = [self.csf_band, self.gray_band, self.white_band];
        let mut prev = 0.0;
        for (name, [lo, hi]) in ["csf_band", "gray_band", "white_band"].into_iter().zip(bands) {
            if !(lo.is_finite() && hi.is_finite() && prev < lo && lo <= hi) {
                return Err(Error::BadSpec(format!("{name} [{lo}, {hi}] must be positive, ordered and above the previous band")));
            }
            prev = hi;
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::BadSpec(format!("noise sigma {} must be non-negative", self.noise_sigma)));
        }
        Ok(())
    }

    fn band(&self, label: u32) -> [f64; 2] {
        match label {
            LABEL_CSF => self.csf_band,
            LABEL_GRAY => self.gray_band,
            _ => self.white_band,
        }
    }
}

/// Ellipsoid rotated about the z axis.
#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
    angle: f64,
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let (s, c) = self.angle.sin_cos();
        let u = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
        (0..3).map(|i| (u[i] / self.axes[i]).powi(2)).sum::<f64>() <= 1.0
    }

    fn scaled(&self, f: f64) -> Self {
        Self { axes: self.axes.map(|a| a * f), ..*self }
    }

    /// A random ellipsoid centered inside `self` at up to `reach` of its radii.
    fn child(&self, rng: &mut ChaCha8Rng, reach: f64, size: [f64; 2]) -> Self {
        let center = [0, 1, 2].map(|i| self.center[i] + rng.random_range(-reach..=reach) * self.axes[i]);
        let axes = [0, 1, 2].map(|i| rng.random_range(size[0]..=size[1]) * self.axes[i]);
        Self { center, axes, angle: rng.random_range(0.0..PI) }
    }
}

/// Smooth field in `[0, 1]` from three random low-frequency cosines.
struct Texture {
    waves: Vec<([f64; 3], f64, f64)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, side: usize) -> Self {
        let waves = (0..3)
            .map(|_| {
                let k = [0, 1, 2].map(|_| rng.random_range(-2.0..=2.0) * 2.0 * PI / side as f64);
                (k, rng.random_range(0.0..2.0 * PI), rng.random_range(0.5..=1.0))
            })
            .collect();
        Self { waves }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        let total: f64 = self.waves.iter().map(|w| w.2).sum();
        let v: f64 = self.waves.iter().map(|(k, phase, w)| w * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos()).sum();
        0.5 + 0.5 * v / total
    }
}

/// Intensity volume and its tissue labels. Noise is Rician: the clean
/// magnitude plus complex Gaussian noise of standard deviation `noise_sigma`
/// per channel, so voxels stay non-negative like any magnitude image.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelVolume)> {
    spec.validate()?;
    let s = spec.side;
    let sf = s as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mid = (sf - 1.0) / 2.0;
    let shell = Ellipsoid {
        center: [0, 1, 2].map(|_| mid + rng.random_range(-0.03..=0.03) * sf),
        axes: [0, 1, 2].map(|_| rng.random_range(0.40..=0.46) * sf),
        angle: rng.random_range(-0.3..=0.3),
    };
    let gray = shell.scaled(0.88);
    let white = shell.scaled(0.65);
    let mut layers: Vec<(u32, Ellipsoid)> = vec![(LABEL_CSF, shell), (LABEL_GRAY, gray), (LABEL_WHITE, white)];
    let count = |rng: &mut ChaCha8Rng, r: [usize; 2]| rng.random_range(r[0]..=r[1]);
    for _ in 0..count(&mut rng, spec.white_blobs) {
        layers.push((LABEL_WHITE, white.child(&mut rng, 0.5, [0.25, 0.4])));
    }
    for _ in 0..count(&mut rng, spec.gray_blobs) {
        layers.push((LABEL_GRAY, white.child(&mut rng, 0.5, [0.15, 0.3])));
    }
    for _ in 0..count(&mut rng, spec.csf_blobs) {
        layers.push((LABEL_CSF, white.child(&mut rng, 0.4, [0.1, 0.2])));
    }
    let textures: Vec<Texture> = (0..3).map(|_| Texture::new(&mut rng, s)).collect();

    let mut labels = vec![0u32; s * s * s];
    let mut clean = vec![0f64; s * s * s];
    for z in 0..s {
        for y in 0..s {
            for x in 0..s {
                let p = [x as f64, y as f64, z as f64];
                let i = x + s * (y + s * z);
                if let Some((l, _)) = layers.iter().rev().find(|(_, e)| e.contains(p)) {
                    let [lo, hi] = spec.band(*l);
                    labels[i] = *l;
                    clean[i] = lo + (hi - lo) * textures[*l as usize - 1].at(p);
                }
            }
        }
    }
    let sigma = spec.noise_sigma;
    let data = clean
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if sigma > 0.0 {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                return (v + sigma * a).hypot(sigma * b) as f32;
            }
            if labels[i] == 0 {
                return 0.0;
            }
            // Rounding to f32 must not leave the band.
            let [lo, hi] = spec.band(labels[i]);
            (v as f32).clamp(lo as f32, hi as f32)
        })
        .collect();
    Ok((Volume::cube(s, data)?, LabelVolume::new([s; 3], [1.0; 3], labels)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_intensities_stay_in_band() {
        let spec = PhantomSpec { noise_sigma: 0.0, seed: 4, ..Default::default() };
        let (v, l) = generate_phantom(&spec).unwrap();
        for (&x, &c) in v.data().iter().zip(l.labels()) {
            if c == 0 {
                assert_eq!(x, 0.0);
            } else {
                let [lo, hi] = spec.band(c);
                assert!(x >= lo as f32 && x <= hi as f32, "label {c} value {x}");
            }
        }
    }

    #[test]
    fn every_class_is_present_and_generation_is_deterministic() {
        for seed in 0..10 {
            let spec = PhantomSpec { seed, ..Default::default() };
            let (v, l) = generate_phantom(&spec).unwrap();
            for c in 0..4 {
                assert!(l.count(c) > 0, "seed {seed} class {c}");
            }
            assert!(v.min_value() >= 0.0);
            assert_eq!(generate_phantom(&spec).unwrap(), (v, l));
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let d = PhantomSpec::default();
        assert!(matches!(generate_phantom(&PhantomSpec { side: 8, ..d.clone() }), Err(Error::BadSpec(_))));
        assert!(PhantomSpec { gray_band: [0.3, 0.6], ..d.clone() }.validate().is_err());
        assert!(PhantomSpec { csf_blobs: [3, 1], ..d.clone() }.validate().is_err());
        assert!(PhantomSpec { noise_sigma: -1.0, ..d }.validate().is_err());
    }
}
