//! Image standardization, FOV erosion and thin-vessel weight maps.

use crate::data::clahe::{clahe, ClaheParams};
use crate::data::image::Image8;
use crate::data::morphology::{components, distance_to_background, erode_disk, feature_transform, thin};
use crate::error::{Error, Result};

/// Scale constant of the weight map `w = 1 / (alpha · d)`.
pub const WEIGHT_ALPHA: f64 = 0.18;
/// FOV erosion radius in pixels.
pub const FOV_EROSION: f64 = 4.0;

/// Green channel → CLAHE → affine min–max mapping of the FOV pixels onto
/// `[-1, 1]`. Pixels outside the FOV are 0; a constant FOV maps to 0.
pub fn preprocess(rgb: &Image8, fov: &[bool], clahe_params: &ClaheParams) -> Result<Vec<f32>> {
    if fov.len() != rgb.width * rgb.height {
        return Err(Error::Data(format!(
            "mask has {} pixels but the image is {}x{}",
            fov.len(),
            rgb.width,
            rgb.height
        )));
    }
    let eq = clahe(&rgb.green(), clahe_params);
    standardize(&eq.data, fov)
}

pub fn standardize(values: &[u8], fov: &[bool]) -> Result<Vec<f32>> {
    let inside = values.iter().zip(fov).filter(|(_, &m)| m).map(|(&v, _)| v);
    let (lo, hi) = inside.fold((u8::MAX, u8::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !fov.iter().any(|&m| m) {
        return Err(Error::Data("field-of-view mask is empty".into()));
    }
    let range = (hi - lo) as f32;
    Ok(values
        .iter()
        .zip(fov)
        .map(|(&v, &m)| if !m || range == 0.0 { 0.0 } else { 2.0 * (v - lo) as f32 / range - 1.0 })
        .collect())
}

pub fn erode_fov(fov: &[bool], w: usize, h: usize, radius: f64) -> Vec<bool> {
    erode_disk(fov, w, h, radius)
}

/// Local vessel diameter for every vessel pixel (0 on background).
///
/// The label is thinned to a skeleton; each skeleton pixel gets
/// `d = 2·EDT - 1` (at least 1) from its distance to the nearest background
/// pixel, and every vessel pixel inherits `d` from its nearest skeleton pixel.
/// Components that thin away completely keep their deepest pixel as skeleton.
pub fn vessel_diameter(label: &[bool], w: usize, h: usize) -> Vec<f64> {
    let mut diam = vec![0.0; w * h];
    if !label.iter().any(|&v| v) {
        return diam;
    }
    let edt2 = distance_to_background(label, w, h, false);
    let mut skel = thin(label, w, h);
    let (comp, n) = components(label, w, h);
    let mut has_skel = vec![false; n as usize + 1];
    for i in 0..w * h {
        if skel[i] {
            has_skel[comp[i] as usize] = true;
        }
    }
    let mut deepest: Vec<Option<usize>> = vec![None; n as usize + 1];
    for i in 0..w * h {
        let c = comp[i] as usize;
        if c != 0 && !has_skel[c] && deepest[c].is_none_or(|j| edt2[i] > edt2[j]) {
            deepest[c] = Some(i);
        }
    }
    for i in deepest.into_iter().flatten() {
        skel[i] = true;
    }

    let cap = (w.max(h) as f64).powi(2);
    let (_, nearest) = feature_transform(&skel, w, h);
    for i in 0..w * h {
        if label[i] {
            let s = nearest[i];
            let edt = edt2[s].min(cap).sqrt();
            diam[i] = (2.0 * edt - 1.0).max(1.0);
        }
    }
    diam
}

/// `w = 1 / (alpha · d)` on vessel pixels, 1 on background.
pub fn weight_map(label: &[bool], w: usize, h: usize, alpha: f64) -> Vec<f32> {
    let d = vessel_diameter(label, w, h);
    label.iter().zip(&d).map(|(&v, &d)| if v { (1.0 / (alpha * d)) as f32 } else { 1.0 }).collect()
}
