//! Contrast-limited adaptive histogram equalization on 8-bit gray images.
//!
//! Follows the usual tile/LUT formulation: the image (reflect-101 extended to
//! a multiple of the tile grid) is cut into `tiles_x × tiles_y` tiles, each
//! tile's 256-bin histogram is clipped at `clip · area / 256` with the excess
//! spread uniformly, and output values are bilinear blends of the four
//! nearest tile mappings.

use crate::data::image::Image8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClaheParams {
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Clip limit relative to the uniform bin height; non-finite or `<= 0`
    /// disables clipping.
    pub clip_limit: f64,
}

impl Default for ClaheParams {
    fn default() -> Self {
        ClaheParams { tiles_x: 8, tiles_y: 8, clip_limit: 2.0 }
    }
}

fn reflect101(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * len - 2;
    let r = i % period;
    if r >= len {
        period - r
    } else {
        r
    }
}

fn tile_lut(hist: &mut [u32; 256], area: u32, clip_limit: f64) -> [u8; 256] {
    if clip_limit.is_finite() && clip_limit > 0.0 {
        let limit = ((clip_limit * area as f64 / 256.0) as u32).max(1);
        let mut clipped = 0u32;
        for h in hist.iter_mut() {
            if *h > limit {
                clipped += *h - limit;
                *h = limit;
            }
        }
        let batch = clipped / 256;
        let mut residual = clipped - batch * 256;
        for h in hist.iter_mut() {
            *h += batch;
        }
        if residual > 0 {
            let step = (256 / residual as usize).max(1);
            let mut i = 0;
            while i < 256 && residual > 0 {
                hist[i] += 1;
                residual -= 1;
                i += step;
            }
        }
    }
    let scale = 255.0 / area as f64;
    let mut lut = [0u8; 256];
    let mut sum = 0u32;
    for (v, h) in hist.iter().enumerate() {
        sum += h;
        lut[v] = (sum as f64 * scale).round().clamp(0.0, 255.0) as u8;
    }
    lut
}

pub fn clahe(img: &Image8, params: &ClaheParams) -> Image8 {
    let src = img.green();
    let (w, h) = (src.width, src.height);
    let (tx, ty) = (params.tiles_x.max(1), params.tiles_y.max(1));
    let ext_w = w.div_ceil(tx) * tx;
    let ext_h = h.div_ceil(ty) * ty;
    let (tw, th) = (ext_w / tx, ext_h / ty);
    let area = (tw * th) as u32;

    let mut luts = vec![[0u8; 256]; tx * ty];
    for j in 0..ty {
        for i in 0..tx {
            let mut hist = [0u32; 256];
            for y in j * th..(j + 1) * th {
                let sy = reflect101(y, h);
                for x in i * tw..(i + 1) * tw {
                    hist[src.data[sy * w + reflect101(x, w)] as usize] += 1;
                }
            }
            luts[j * tx + i] = tile_lut(&mut hist, area, params.clip_limit);
        }
    }

    let inv_tw = 1.0 / tw as f32;
    let inv_th = 1.0 / th as f32;
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        let tyf = y as f32 * inv_th - 0.5;
        let ty1f = tyf.floor();
        let ya = tyf - ty1f;
        let ty1 = (ty1f as isize).max(0) as usize;
        let ty2 = ((ty1f as isize + 1) as usize).min(ty - 1);
        for x in 0..w {
            let txf = x as f32 * inv_tw - 0.5;
            let tx1f = txf.floor();
            let xa = txf - tx1f;
            let tx1 = (tx1f as isize).max(0) as usize;
            let tx2 = ((tx1f as isize + 1) as usize).min(tx - 1);
            let v = src.data[y * w + x] as usize;
            let l = |r: usize, c: usize| luts[r * tx + c][v] as f32;
            let top = l(ty1, tx1) * (1.0 - xa) + l(ty1, tx2) * xa;
            let bot = l(ty2, tx1) * (1.0 - xa) + l(ty2, tx2) * xa;
            out[y * w + x] = (top * (1.0 - ya) + bot * ya).round().clamp(0.0, 255.0) as u8;
        }
    }
    Image8 { width: w, height: h, channels: 1, data: out }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn uniform_image_stays_uniform() {
        let img = Image8::gray(37, 29, vec![90; 37 * 29]).unwrap();
        let out = clahe(&img, &ClaheParams::default());
        assert!(out.data.iter().all(|&v| v == out.data[0]));
    }

    /// Plain global histogram equalization, coded directly.
    fn hist_eq(img: &Image8) -> Vec<u8> {
        let n = img.data.len() as f64;
        let mut hist = [0usize; 256];
        img.data.iter().for_each(|&v| hist[v as usize] += 1);
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for v in 0..256 {
            acc += hist[v];
            cdf[v] = acc;
        }
        img.data.iter().map(|&v| (cdf[v as usize] as f64 * 255.0 / n).round() as u8).collect()
    }

    #[test]
    fn single_tile_without_clip_is_histogram_equalization() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<u8> = (0..61 * 47).map(|_| (rng.random::<f64>().powi(2) * 200.0) as u8 + 20).collect();
        let img = Image8::gray(61, 47, data).unwrap();
        let p = ClaheParams { tiles_x: 1, tiles_y: 1, clip_limit: f64::INFINITY };
        assert_eq!(clahe(&img, &p).data, hist_eq(&img));
    }

    #[test]
    fn clipping_limits_contrast_gain() {
        // a narrow band of gray levels gets stretched less when clipped
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let data: Vec<u8> = (0..64 * 64).map(|_| rng.random_range(100..110)).collect();
        let img = Image8::gray(64, 64, data).unwrap();
        let span = |p: ClaheParams| {
            let o = clahe(&img, &p);
            *o.data.iter().max().unwrap() as i32 - *o.data.iter().min().unwrap() as i32
        };
        let free = span(ClaheParams { clip_limit: f64::INFINITY, ..Default::default() });
        let clipped = span(ClaheParams::default());
        assert!(clipped < free, "{clipped} vs {free}");
    }
}
