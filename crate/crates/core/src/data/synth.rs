//! Procedural fundus-like images for running the pipeline without real data.
//!
//! Each image holds a few branching random-walk vessel trees drawn as dark
//! curvilinear structures on a bright, unevenly lit disc, plus Gaussian noise.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::dataset::{Dataset, Manifest, PrepConfig, Sample};
use crate::data::image::{write_image, Image8};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    /// Vessel trees per image.
    pub trees: usize,
    /// Per-step probability that a segment spawns a side branch.
    pub branch_prob: f64,
    /// Maximum branching depth.
    pub max_depth: usize,
    /// Steps per segment (one step ≈ one pixel).
    pub segment_steps: usize,
    /// Total centreline length budget per image, in steps.
    pub max_length: usize,
    /// Standard deviation of the per-step heading change in radians.
    pub tortuosity: f64,
    pub width_min: f64,
    pub width_max: f64,
    /// Left-to-right brightness ramp amplitude in gray levels.
    pub illumination: f64,
    /// Vessel darkening in gray levels.
    pub contrast: f64,
    /// Noise standard deviation in gray levels.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            width: 128,
            height: 128,
            count: 16,
            trees: 3,
            branch_prob: 0.04,
            max_depth: 3,
            segment_steps: 60,
            max_length: 420,
            tortuosity: 0.12,
            width_min: 1.0,
            width_max: 4.0,
            illumination: 40.0,
            contrast: 28.0,
            noise: 10.0,
            seed: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config("synthetic images must be at least 16x16".into()));
        }
        if !(self.width_min >= 1.0 && self.width_max >= self.width_min) {
            return Err(Error::Config(format!(
                "vessel width range [{}, {}] must satisfy 1 <= min <= max",
                self.width_min, self.width_max
            )));
        }
        if !(0.0..=1.0).contains(&self.branch_prob) || self.noise < 0.0 || self.tortuosity < 0.0 {
            return Err(Error::Config("invalid synthetic vessel parameters".into()));
        }
        Ok(())
    }
}

/// Raw RGB image, vessel label and field-of-view mask of case `index`.
pub fn synth_raw(cfg: &SyntheticConfig, index: usize) -> (Image8, Image8, Image8) {
    generate(cfg, index).0
}

type Raw = (Image8, Image8, Image8);

/// The raw images plus the centreline stamps `(x, y, width)` they were drawn from.
fn generate(cfg: &SyntheticConfig, index: usize) -> (Raw, Vec<(f64, f64, f64)>) {
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);

    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let radius = 0.47 * w.min(h) as f64;
    let fov: Vec<bool> = (0..w * h).map(|i| ((i % w) as f64 - cx).hypot((i / w) as f64 - cy) <= radius).collect();

    // centreline stamps (x, y, width)
    let mut stamps: Vec<(f64, f64, f64)> = Vec::new();
    let mut stack = Vec::new();
    for _ in 0..cfg.trees {
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let r = rng.random_range(0.0..0.3) * radius;
        let heading = rng.random_range(0.0..std::f64::consts::TAU);
        stack.push((cx + r * a.cos(), cy + r * a.sin(), heading, cfg.width_max, 0usize));
    }
    while let Some((mut x, mut y, mut heading, width, depth)) = stack.pop() {
        for _ in 0..cfg.segment_steps {
            if stamps.len() >= cfg.max_length || (x - cx).hypot(y - cy) > radius {
                break;
            }
            stamps.push((x, y, width));
            if depth < cfg.max_depth && rng.random_bool(cfg.branch_prob) {
                let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let child = (width * rng.random_range(0.55..0.85)).max(cfg.width_min);
                stack.push((x, y, heading + side * rng.random_range(0.4..1.1), child, depth + 1));
            }
            heading += cfg.tortuosity * rng.random_range(-1.0..1.0);
            x += heading.cos();
            y += heading.sin();
        }
    }

    let mut vessel = vec![false; w * h];
    for &(sx, sy, sw) in &stamps {
        let r = sw / 2.0;
        let (x0, x1) = ((sx - r).floor().max(0.0) as usize, ((sx + r).ceil() as usize).min(w - 1));
        let (y0, y1) = ((sy - r).floor().max(0.0) as usize, ((sy + r).ceil() as usize).min(h - 1));
        for py in y0..=y1 {
            for px in x0..=x1 {
                let nearest = px == sx.round() as usize && py == sy.round() as usize;
                if nearest || (px as f64 - sx).hypot(py as f64 - sy) < r {
                    vessel[py * w + px] = true;
                }
            }
        }
    }
    for (v, f) in vessel.iter_mut().zip(&fov) {
        *v &= *f;
    }

    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).unwrap();
    let mut rgb = vec![0u8; w * h * 3];
    for i in 0..w * h {
        if !fov[i] {
            continue;
        }
        let fx = (i % w) as f64 / (w - 1) as f64 - 0.5;
        let mut g = 140.0 + cfg.illumination * fx;
        if vessel[i] {
            g -= cfg.contrast;
        }
        if cfg.noise > 0.0 {
            g += noise.sample(&mut rng);
        }
        let g = g.clamp(0.0, 255.0);
        rgb[3 * i] = (g * 1.35).min(255.0) as u8;
        rgb[3 * i + 1] = g as u8;
        rgb[3 * i + 2] = (g * 0.4) as u8;
    }
    let raw = (
        Image8 { width: w, height: h, channels: 3, data: rgb },
        Image8::from_mask(w, h, &vessel),
        Image8::from_mask(w, h, &fov),
    );
    (raw, stamps)
}

pub fn synth_id(index: usize) -> String {
    format!("{:02}", index + 1)
}

/// `cfg.count` preprocessed synthetic cases, ids `01`, `02`, ...
pub fn synth_dataset(cfg: &SyntheticConfig, prep: &PrepConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let (rgb, label, fov) = synth_raw(cfg, i);
            Sample::from_raw(&synth_id(i), &rgb, &label, &fov, prep)
        })
        .collect()
}

/// The last `n_test` ids form the test set, the rest the training pool.
pub fn synth_manifest(count: usize, n_test: usize) -> Result<Manifest> {
    if n_test >= count {
        return Err(Error::Config(format!("{n_test} test cases leave no training cases out of {count}")));
    }
    let ids: Vec<String> = (0..count).map(synth_id).collect();
    Ok(Manifest { train: ids[..count - n_test].to_vec(), test: ids[count - n_test..].to_vec() })
}

pub fn synth_full(cfg: &SyntheticConfig, n_test: usize, prep: &PrepConfig) -> Result<Dataset> {
    let manifest = synth_manifest(cfg.count, n_test)?;
    Ok(Dataset::from_samples(manifest, synth_dataset(cfg, prep)?))
}

/// Write the raw dataset layout (`images/`, `labels/`, `masks/`, manifest).
pub fn write_synthetic(root: &Path, cfg: &SyntheticConfig, n_test: usize) -> Result<()> {
    cfg.validate()?;
    let manifest = synth_manifest(cfg.count, n_test)?;
    for sub in ["images", "labels", "masks"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    (0..cfg.count).into_par_iter().try_for_each(|i| {
        let (rgb, label, fov) = synth_raw(cfg, i);
        let id = synth_id(i);
        write_image(&root.join("images").join(format!("{id}.png")), &rgb)?;
        write_image(&root.join("labels").join(format!("{id}.png")), &label)?;
        write_image(&root.join("masks").join(format!("{id}.png")), &fov)
    })?;
    let m = root.join("manifest.txt");
    fs::write(&m, manifest.render()).map_err(|e| Error::io(&m, e))
}
