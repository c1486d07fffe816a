//! Random training patches with geometric and intensity augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::dataset::Sample;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Rotation drawn uniformly from `±rotation_deg`.
    pub rotation_deg: f64,
    /// Horizontal shear factor drawn uniformly from `±shear`.
    pub shear: f64,
    /// Upper bound of the Gaussian noise standard deviation (image units;
    /// the standardized range is 2).
    pub noise_sigma: f64,
    /// Additive intensity offset drawn uniformly from `±shift`.
    pub shift: f64,
    /// Probability with which each op is applied to a patch.
    pub probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { rotation_deg: 180.0, shear: 0.15, noise_sigma: 0.1, shift: 0.1, probability: 0.5 }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig { rotation_deg: 0.0, shear: 0.0, noise_sigma: 0.0, shift: 0.0, probability: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok =
            [self.rotation_deg, self.shear, self.noise_sigma, self.shift].iter().all(|v| v.is_finite() && *v >= 0.0)
                && (0.0..=1.0).contains(&self.probability);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation settings {self:?}")))
        }
    }
}

/// `n × 1 × patch × patch` maps. `mask` marks pixels that enter the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub image: Tensor<f32>,
    pub label: Tensor<f32>,
    pub weights: Tensor<f32>,
    pub mask: Tensor<f32>,
}

/// Valid patch positions of a fixed set of samples.
pub struct PatchSampler<'a> {
    samples: Vec<&'a Sample>,
    patch: usize,
    /// Top-left corners (flat `y * w + x`) whose patch centre lies in the FOV.
    positions: Vec<Vec<u32>>,
    cumulative: Vec<usize>,
}

impl<'a> PatchSampler<'a> {
    pub fn new(samples: Vec<&'a Sample>, patch: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("no samples to draw patches from".into()));
        }
        if patch == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        let mut positions = Vec::with_capacity(samples.len());
        for s in &samples {
            if patch > s.width || patch > s.height {
                return Err(Error::Config(format!(
                    "patch {patch} larger than case {} ({}x{})",
                    s.id, s.width, s.height
                )));
            }
            let c = patch / 2;
            let mut p = Vec::new();
            for y in 0..=s.height - patch {
                for x in 0..=s.width - patch {
                    if s.fov[(y + c) * s.width + x + c] {
                        p.push((y * s.width + x) as u32);
                    }
                }
            }
            positions.push(p);
        }
        let mut cumulative = Vec::with_capacity(samples.len());
        let mut acc = 0;
        for p in &positions {
            acc += p.len();
            cumulative.push(acc);
        }
        if acc == 0 {
            return Err(Error::Data(format!("no {patch}x{patch} patch has its centre inside a field of view")));
        }
        Ok(PatchSampler { samples, patch, positions, cumulative })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    /// Batch `index` of the stream identified by `seed`. Every patch uses
    /// its own generator, so the result does not depend on thread count.
    pub fn batch(&self, n: usize, aug: &AugmentConfig, seed: u64, index: u64) -> Batch {
        let p = self.patch;
        let plane = p * p;
        let mut image = vec![0f32; n * plane];
        let mut label = vec![0f32; n * plane];
        let mut weights = vec![0f32; n * plane];
        let mut mask = vec![0f32; n * plane];
        image
            .par_chunks_mut(plane)
            .zip(label.par_chunks_mut(plane))
            .zip(weights.par_chunks_mut(plane))
            .zip(mask.par_chunks_mut(plane))
            .enumerate()
            .for_each(|(k, (((im, lb), wt), mk))| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, index, k as u64));
                self.draw(&mut rng, aug, im, lb, wt, mk);
            });
        let shape = Shape::new(n, 1, p, p);
        Batch {
            image: Tensor::from_vec(shape, image).unwrap(),
            label: Tensor::from_vec(shape, label).unwrap(),
            weights: Tensor::from_vec(shape, weights).unwrap(),
            mask: Tensor::from_vec(shape, mask).unwrap(),
        }
    }

    fn draw(
        &self,
        rng: &mut ChaCha8Rng,
        aug: &AugmentConfig,
        im: &mut [f32],
        lb: &mut [f32],
        wt: &mut [f32],
        mk: &mut [f32],
    ) {
        let total = *self.cumulative.last().unwrap();
        let r = rng.random_range(0..total);
        let si = self.cumulative.partition_point(|&c| c <= r);
        let before = if si == 0 { 0 } else { self.cumulative[si - 1] };
        let s = self.samples[si];
        let pos = self.positions[si][r - before] as usize;
        let (y0, x0) = ((pos / s.width) as f64, (pos % s.width) as f64);
        let p = self.patch;
        let half = (p as f64 - 1.0) / 2.0;

        let apply = |rng: &mut ChaCha8Rng| aug.probability > 0.0 && rng.random_bool(aug.probability);
        let theta = if apply(rng) && aug.rotation_deg > 0.0 {
            rng.random_range(-aug.rotation_deg..=aug.rotation_deg).to_radians()
        } else {
            0.0
        };
        let shear = if apply(rng) && aug.shear > 0.0 { rng.random_range(-aug.shear..=aug.shear) } else { 0.0 };
        let sigma = if apply(rng) && aug.noise_sigma > 0.0 { rng.random_range(0.0..=aug.noise_sigma) } else { 0.0 };
        let offset = if apply(rng) && aug.shift > 0.0 { rng.random_range(-aug.shift..=aug.shift) } else { 0.0 };

        // output pixel -> source pixel: rotate, then shear, about the patch centre
        let (sin, cos) = theta.sin_cos();
        let (cy, cx) = (y0 + half, x0 + half);
        let identity = theta == 0.0 && shear == 0.0;
        for oy in 0..p {
            for ox in 0..p {
                let i = oy * p + ox;
                let (sy, sx) = if identity {
                    (y0 + oy as f64, x0 + ox as f64)
                } else {
                    let (dy, dx) = (oy as f64 - half, ox as f64 - half);
                    let (ry, rx) = (sin * dx + cos * dy, cos * dx - sin * dy);
                    (cy + ry, cx + rx + shear * ry)
                };
                im[i] = bilinear(s, sy, sx);
                match nearest(s, sy, sx) {
                    Some(j) => {
                        lb[i] = s.label[j] as u8 as f32;
                        wt[i] = s.weights[j];
                        mk[i] = s.fov[j] as u8 as f32;
                    }
                    None => {
                        lb[i] = 0.0;
                        wt[i] = 1.0;
                        mk[i] = 0.0;
                    }
                }
            }
        }
        if sigma > 0.0 || offset != 0.0 {
            let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).unwrap();
            for i in 0..p * p {
                let n = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                if mk[i] > 0.0 {
                    im[i] += (n + offset) as f32;
                }
            }
        }
    }
}

/// Draw one batch; see [`PatchSampler::batch`].
pub fn sample_batch(
    samples: &[&Sample],
    n: usize,
    patch: usize,
    aug: &AugmentConfig,
    seed: u64,
    index: u64,
) -> Result<Batch> {
    aug.validate()?;
    Ok(PatchSampler::new(samples.to_vec(), patch)?.batch(n, aug, seed, index))
}

/// SplitMix64 over the three stream coordinates.
fn mix(seed: u64, index: u64, k: u64) -> u64 {
    let mut z = seed;
    for v in [index, k] {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(v.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn nearest(s: &Sample, y: f64, x: f64) -> Option<usize> {
    let (yi, xi) = (y.round(), x.round());
    if yi < 0.0 || xi < 0.0 || yi >= s.height as f64 || xi >= s.width as f64 {
        None
    } else {
        Some(yi as usize * s.width + xi as usize)
    }
}

/// Bilinear image lookup; outside the image counts as 0.
fn bilinear(s: &Sample, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
    let at = |yy: f64, xx: f64| -> f32 {
        if yy < 0.0 || xx < 0.0 || yy >= s.height as f64 || xx >= s.width as f64 {
            0.0
        } else {
            s.image[yy as usize * s.width + xx as usize]
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
    let bot = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bot * fy
}
