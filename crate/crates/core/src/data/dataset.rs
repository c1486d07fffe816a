//! Samples, dataset directories and train/validation/test splits.
//!
//! A raw dataset directory holds
//!
//! ```text
//! images/<id>.png   RGB fundus photograph (PNG or binary PPM)
//! labels/<id>.png   manual vessel annotation, > 127 = vessel
//! masks/<id>.png    field-of-view mask, > 127 = inside
//! manifest.txt      optional: `train = ...` and `test = ...` id lists
//! ```
//!
//! Without a manifest the DRIVE numbering applies: ids 21–40 are the training
//! pool and 01–20 the test set. A preprocessed directory (written by
//! [`save_preprocessed`]) holds `samples/<id>.smp` files plus the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::clahe::ClaheParams;
use crate::data::image::{read_image, Image8};
use crate::data::preprocess::{erode_fov, preprocess, weight_map, FOV_EROSION, WEIGHT_ALPHA};
use crate::error::{Error, Result};

/// One preprocessed case. All maps are row-major `height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// Standardized intensities, `[-1, 1]` inside the FOV and 0 outside.
    pub image: Vec<f32>,
    pub label: Vec<bool>,
    pub fov: Vec<bool>,
    pub fov_eroded: Vec<bool>,
    pub weights: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepConfig {
    pub clahe: ClaheParams,
    pub erosion_radius: f64,
    pub alpha: f64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig { clahe: ClaheParams::default(), erosion_radius: FOV_EROSION, alpha: WEIGHT_ALPHA }
    }
}

impl Sample {
    pub fn from_raw(id: &str, rgb: &Image8, label: &Image8, fov: &Image8, cfg: &PrepConfig) -> Result<Self> {
        let (w, h) = (rgb.width, rgb.height);
        for (what, img) in [("label", label), ("mask", fov)] {
            if img.width != w || img.height != h {
                return Err(Error::Data(format!(
                    "case {id}: {what} is {}x{} but the image is {w}x{h}",
                    img.width, img.height
                )));
            }
        }
        let fov_m = fov.to_mask();
        let label_m = label.to_mask();
        let image = preprocess(rgb, &fov_m, &cfg.clahe).map_err(|e| Error::Data(format!("case {id}: {e}")))?;
        let fov_eroded = erode_fov(&fov_m, w, h, cfg.erosion_radius);
        let weights = weight_map(&label_m, w, h, cfg.alpha);
        Ok(Sample { id: id.to_string(), width: w, height: h, image, label: label_m, fov: fov_m, fov_eroded, weights })
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Training pool and test ids of a dataset directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut train = None;
        let mut test = None;
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Data(format!("bad manifest line '{line}'")))?;
            let ids: Vec<String> = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            match k.trim() {
                "train" => train = Some(ids),
                "test" => test = Some(ids),
                other => return Err(Error::Data(format!("unknown manifest key '{other}'"))),
            }
        }
        match (train, test) {
            (Some(train), Some(test)) => Ok(Manifest { train, test }),
            _ => Err(Error::Data("manifest needs both 'train' and 'test'".into())),
        }
    }

    pub fn render(&self) -> String {
        format!("train = {}\ntest = {}\n", self.train.join(", "), self.test.join(", "))
    }

    /// DRIVE convention over the ids present.
    fn drive(ids: &[String]) -> Self {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for id in ids {
            match id.parse::<u32>() {
                Ok(n) if n <= 20 => test.push(id.clone()),
                _ => train.push(id.clone()),
            }
        }
        Manifest { train, test }
    }
}

/// Train / validation / test ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

pub const VALIDATION_COUNT: usize = 4;

/// Randomly move `n_validation` ids of the training pool to validation.
pub fn split(manifest: &Manifest, n_validation: usize, seed: u64) -> Result<DatasetSplit> {
    if n_validation >= manifest.train.len() {
        return Err(Error::Data(format!(
            "cannot hold out {n_validation} validation cases from a training pool of {}",
            manifest.train.len()
        )));
    }
    let mut pool = manifest.train.clone();
    pool.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let mut validation = pool.split_off(pool.len() - n_validation);
    pool.sort();
    validation.sort();
    Ok(DatasetSplit { train: pool, validation, test: manifest.test.clone(), seed })
}

/// Seeded random subset of the training ids.
pub fn training_subset(train: &[String], size: usize, seed: u64) -> Result<Vec<String>> {
    if size == 0 || size > train.len() {
        return Err(Error::Config(format!("training subset size {size} outside 1..={}", train.len())));
    }
    let mut ids = train.to_vec();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5B5E);
    ids.shuffle(&mut rng);
    ids.truncate(size);
    ids.sort();
    Ok(ids)
}

/// A loaded dataset: every case preprocessed, keyed by id.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: BTreeMap<String, Sample>,
}

impl Dataset {
    pub fn get(&self, ids: &[String]) -> Result<Vec<&Sample>> {
        ids.iter()
            .map(|id| self.samples.get(id).ok_or_else(|| Error::Data(format!("case '{id}' not in dataset"))))
            .collect()
    }

    pub fn from_samples(manifest: Manifest, samples: Vec<Sample>) -> Self {
        Dataset { manifest, samples: samples.into_iter().map(|s| (s.id.clone(), s)).collect() }
    }
}

fn find_file(dir: &Path, id: &str) -> Result<PathBuf> {
    for ext in ["png", "ppm", "pgm"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Data(format!("{}: no image for case '{id}'", dir.display())))
}

fn list_ids(dir: &Path, ext: &[&str]) -> Result<Vec<String>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let e = p.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        if ext.contains(&e.as_str()) {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::Data(format!("{}: no cases found", dir.display())));
    }
    Ok(ids)
}

fn read_manifest(root: &Path, ids: &[String]) -> Result<Manifest> {
    let p = root.join("manifest.txt");
    if p.exists() {
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Manifest::parse(&text)
    } else {
        Ok(Manifest::drive(ids))
    }
}

/// Load a raw or preprocessed dataset directory.
pub fn load_dataset(root: &Path, cfg: &PrepConfig) -> Result<Dataset> {
    let samples_dir = root.join("samples");
    if samples_dir.is_dir() {
        let ids = list_ids(&samples_dir, &["smp"])?;
        let manifest = read_manifest(root, &ids)?;
        let samples =
            ids.par_iter().map(|id| read_sample(&samples_dir.join(format!("{id}.smp")))).collect::<Result<Vec<_>>>()?;
        return Ok(Dataset::from_samples(manifest, samples));
    }
    let images = root.join("images");
    if !images.is_dir() {
        return Err(Error::Data(format!("{}: expected an images/ or samples/ directory", root.display())));
    }
    let ids = list_ids(&images, &["png", "ppm", "pgm"])?;
    let manifest = read_manifest(root, &ids)?;
    let samples = ids
        .par_iter()
        .map(|id| {
            let rgb = read_image(&find_file(&images, id)?)?;
            let label = read_image(&find_file(&root.join("labels"), id)?)?;
            let fov = read_image(&find_file(&root.join("masks"), id)?)?;
            Sample::from_raw(id, &rgb, &label, &fov, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::from_samples(manifest, samples))
}

const SMP_MAGIC: &[u8; 8] = b"TUNETSMP";

/// Preprocessed sample container, little-endian:
/// magic `TUNETSMP`, `u32` id length, id bytes, `u32` width, `u32` height,
/// `f32` image × w·h, `f32` weights × w·h, then one byte per pixel with bit 0 =
/// label, bit 1 = FOV, bit 2 = eroded FOV.
pub fn encode_sample(s: &Sample) -> Vec<u8> {
    let n = s.pixels();
    let mut out = Vec::with_capacity(24 + s.id.len() + 9 * n);
    out.extend_from_slice(SMP_MAGIC);
    out.extend_from_slice(&(s.id.len() as u32).to_le_bytes());
    out.extend_from_slice(s.id.as_bytes());
    out.extend_from_slice(&(s.width as u32).to_le_bytes());
    out.extend_from_slice(&(s.height as u32).to_le_bytes());
    s.image.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    s.weights.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    for i in 0..n {
        out.push(s.label[i] as u8 | (s.fov[i] as u8) << 1 | (s.fov_eroded[i] as u8) << 2);
    }
    out
}

pub fn decode_sample(b: &[u8]) -> Result<Sample> {
    let bad = || Error::Data("malformed sample file".into());
    if b.len() < 12 || &b[..8] != SMP_MAGIC {
        return Err(bad());
    }
    let u32_at = |o: usize| -> Result<usize> {
        b.get(o..o + 4).map(|s| u32::from_le_bytes(s.try_into().unwrap()) as usize).ok_or_else(bad)
    };
    let idlen = u32_at(8)?;
    let id = String::from_utf8(b.get(12..12 + idlen).ok_or_else(bad)?.to_vec()).map_err(|_| bad())?;
    let mut o = 12 + idlen;
    let (w, h) = (u32_at(o)?, u32_at(o + 4)?);
    o += 8;
    let n = w * h;
    if b.len() != o + 9 * n {
        return Err(bad());
    }
    let floats = |start: usize| -> Vec<f32> {
        b[start..start + 4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
    };
    let image = floats(o);
    let weights = floats(o + 4 * n);
    let flags = &b[o + 8 * n..];
    Ok(Sample {
        id,
        width: w,
        height: h,
        image,
        weights,
        label: flags.iter().map(|f| f & 1 != 0).collect(),
        fov: flags.iter().map(|f| f & 2 != 0).collect(),
        fov_eroded: flags.iter().map(|f| f & 4 != 0).collect(),
    })
}

pub fn read_sample(path: &Path) -> Result<Sample> {
    let b = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sample(&b).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Write `samples/<id>.smp` and the manifest under `root`.
pub fn save_preprocessed(root: &Path, ds: &Dataset) -> Result<()> {
    let dir = root.join("samples");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for s in ds.samples.values() {
        let p = dir.join(format!("{}.smp", s.id));
        fs::write(&p, encode_sample(s)).map_err(|e| Error::io(&p, e))?;
    }
    let m = root.join("manifest.txt");
    fs::write(&m, ds.manifest.render()).map_err(|e| Error::io(&m, e))
}
