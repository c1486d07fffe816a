//! Binary morphology on row-major `bool` masks: exact Euclidean distance and
//! feature transforms, disk erosion, Zhang–Suen thinning and connected
//! components.

use std::collections::VecDeque;

/// For every pixel, the squared Euclidean distance to the nearest seed pixel
/// and that seed's flat index. Pixels are `f64::INFINITY` / `usize::MAX` when
/// there are no seeds at all.
///
/// Two separable passes of the lower-envelope-of-parabolas transform, each
/// tracking which site produced the minimum.
pub fn feature_transform(seeds: &[bool], w: usize, h: usize) -> (Vec<f64>, Vec<usize>) {
    assert_eq!(seeds.len(), w * h);
    let inf = f64::INFINITY;
    // column pass: nearest seed row within each column
    let mut col_d = vec![inf; w * h];
    let mut col_row = vec![usize::MAX; w * h];
    let mut f = vec![inf; h];
    let mut d = vec![0.0; h];
    let mut arg = vec![0usize; h];
    for x in 0..w {
        for y in 0..h {
            f[y] = if seeds[y * w + x] { 0.0 } else { inf };
        }
        if lower_envelope(&f, &mut d, &mut arg) {
            for y in 0..h {
                col_d[y * w + x] = d[y];
                col_row[y * w + x] = arg[y];
            }
        }
    }
    // row pass over the column results
    let mut dist = vec![inf; w * h];
    let mut idx = vec![usize::MAX; w * h];
    let mut f = vec![inf; w];
    let mut d = vec![0.0; w];
    let mut arg = vec![0usize; w];
    for y in 0..h {
        f.copy_from_slice(&col_d[y * w..(y + 1) * w]);
        if lower_envelope(&f, &mut d, &mut arg) {
            for x in 0..w {
                let sx = arg[x];
                dist[y * w + x] = d[x];
                idx[y * w + x] = col_row[y * w + sx] * w + sx;
            }
        }
    }
    (dist, idx)
}

/// 1-D squared distance transform `d[q] = min_p (q - p)² + f[p]` over the
/// finite entries of `f`. Returns false when every entry is infinite.
fn lower_envelope(f: &[f64], d: &mut [f64], arg: &mut [usize]) -> bool {
    let sites: Vec<usize> = (0..f.len()).filter(|&p| f[p].is_finite()).collect();
    if sites.is_empty() {
        return false;
    }
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let inter = |p: usize, q: usize| {
        let (pf, qf) = (p as f64, q as f64);
        ((f[p] + pf * pf) - (f[q] + qf * qf)) / (2.0 * (pf - qf))
    };
    v.push(sites[0]);
    z.push(f64::NEG_INFINITY);
    z.push(f64::INFINITY);
    for &q in &sites[1..] {
        let mut s = inter(q, *v.last().unwrap());
        while s <= z[v.len() - 1] {
            v.pop();
            z.pop();
            s = inter(q, *v.last().unwrap());
        }
        v.push(q);
        *z.last_mut().unwrap() = s;
        z.push(f64::INFINITY);
    }
    let mut k = 0;
    for q in 0..f.len() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        d[q] = dq * dq + f[p];
        arg[q] = p;
    }
    true
}

/// Squared distance from each pixel to the nearest background pixel.
/// With `border_is_background`, the area outside the image counts as
/// background one pixel beyond the edge.
pub fn distance_to_background(fg: &[bool], w: usize, h: usize, border_is_background: bool) -> Vec<f64> {
    if !border_is_background {
        let bg: Vec<bool> = fg.iter().map(|&v| !v).collect();
        return feature_transform(&bg, w, h).0;
    }
    let (pw, ph) = (w + 2, h + 2);
    let mut bg = vec![true; pw * ph];
    for y in 0..h {
        for x in 0..w {
            bg[(y + 1) * pw + x + 1] = !fg[y * w + x];
        }
    }
    let (d, _) = feature_transform(&bg, pw, ph);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        out.extend_from_slice(&d[(y + 1) * pw + 1..(y + 1) * pw + 1 + w]);
    }
    out
}

/// Erosion by a Euclidean disk of `radius`: a pixel survives when no
/// background pixel (outside the image included) lies within distance
/// `radius` of it.
pub fn erode_disk(mask: &[bool], w: usize, h: usize, radius: f64) -> Vec<bool> {
    let d2 = distance_to_background(mask, w, h, true);
    let r2 = radius * radius;
    mask.iter().zip(&d2).map(|(&m, &d)| m && d > r2).collect()
}

/// Zhang–Suen thinning to an 8-connected one-pixel-wide skeleton.
pub fn thin(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut img = mask.to_vec();
    let at = |img: &[bool], x: isize, y: isize| -> u8 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0
        } else {
            img[y as usize * w + x as usize] as u8
        }
    };
    let mut remove = Vec::new();
    loop {
        let mut changed = false;
        for step in 0..2 {
            remove.clear();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if !img[y as usize * w + x as usize] {
                        continue;
                    }
                    // P2..P9 clockwise from north
                    let p = [
                        at(&img, x, y - 1),
                        at(&img, x + 1, y - 1),
                        at(&img, x + 1, y),
                        at(&img, x + 1, y + 1),
                        at(&img, x, y + 1),
                        at(&img, x - 1, y + 1),
                        at(&img, x - 1, y),
                        at(&img, x - 1, y - 1),
                    ];
                    let b: u8 = p.iter().sum();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| p[i] == 0 && p[(i + 1) % 8] == 1).count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (p[0], p[2], p[4], p[6]);
                    let ok = if step == 0 {
                        p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0
                    } else {
                        p2 * p4 * p8 == 0 && p2 * p6 * p8 == 0
                    };
                    if ok {
                        remove.push(y as usize * w + x as usize);
                    }
                }
            }
            for &i in &remove {
                img[i] = false;
            }
            changed |= !remove.is_empty();
        }
        if !changed {
            return img;
        }
    }
}

/// 8-connected component labels (0 = background, components numbered from 1)
/// and the component count.
pub fn components(mask: &[bool], w: usize, h: usize) -> (Vec<u32>, u32) {
    let mut labels = vec![0u32; w * h];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask[j] && labels[j] == 0 {
                        labels[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    (labels, next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_nearest(seeds: &[bool], w: usize, h: usize) -> Vec<f64> {
        (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                (0..w * h)
                    .filter(|&j| seeds[j])
                    .map(|j| ((j % w) as f64 - x).powi(2) + ((j / w) as f64 - y).powi(2))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn feature_transform_matches_brute_force() {
        let (w, h) = (23, 17);
        let seeds: Vec<bool> = (0..w * h).map(|i| (i * 7919 + i / 5) % 37 == 0).collect();
        let (d, idx) = feature_transform(&seeds, w, h);
        assert_eq!(d, brute_nearest(&seeds, w, h));
        for i in 0..w * h {
            let j = idx[i];
            assert!(seeds[j]);
            let dd = ((j % w) as f64 - (i % w) as f64).powi(2) + ((j / w) as f64 - (i / w) as f64).powi(2);
            assert_eq!(dd, d[i]);
        }
    }

    #[test]
    fn no_seeds_is_infinite() {
        let (d, idx) = feature_transform(&[false; 6], 3, 2);
        assert!(d.iter().all(|v| v.is_infinite()));
        assert!(idx.iter().all(|&i| i == usize::MAX));
    }

    #[test]
    fn full_square_erodes_to_center() {
        let e = erode_disk(&[true; 100], 10, 10, 4.0);
        let kept: Vec<usize> = (0..100).filter(|&i| e[i]).collect();
        assert_eq!(kept, vec![44, 45, 54, 55]);
    }

    #[test]
    fn disk_erodes_to_smaller_disk() {
        let (w, r, big) = (41usize, 4.0, 15.0);
        let c = 20.0;
        let disk = |rad: f64| -> Vec<bool> {
            (0..w * w).map(|i| (((i % w) as f64 - c).powi(2) + ((i / w) as f64 - c).powi(2)).sqrt() <= rad).collect()
        };
        let e = erode_disk(&disk(big), w, w, r);
        let inner = disk(big - r - 1.0);
        let outer = disk(big - r + 1.0);
        for i in 0..w * w {
            if inner[i] {
                assert!(e[i]);
            }
            if e[i] {
                assert!(outer[i]);
            }
        }
    }

    #[test]
    fn zero_radius_erosion_is_identity() {
        let m: Vec<bool> = (0..64).map(|i| i % 3 != 0).collect();
        assert_eq!(erode_disk(&m, 8, 8, 0.0), m);
    }

    #[test]
    fn thinning_keeps_lines_and_centers_bars() {
        let (w, h) = (20, 9);
        let line: Vec<bool> = (0..w * h).map(|i| i / w == 4 && (2..18).contains(&(i % w))).collect();
        assert_eq!(thin(&line, w, h), line);
        let bar: Vec<bool> = (0..w * h).map(|i| (2..7).contains(&(i / w)) && (2..18).contains(&(i % w))).collect();
        let sk = thin(&bar, w, h);
        for x in 6..14 {
            assert!(sk[4 * w + x], "center row pixel {x} missing");
            assert!(!sk[3 * w + x] && !sk[5 * w + x]);
        }
    }

    #[test]
    fn component_count() {
        let m = [true, true, false, false, false, false, true, true, true];
        let (l, n) = components(&m, 3, 3);
        assert_eq!(n, 2);
        assert_eq!(l[0], l[1]);
        assert_ne!(l[0], l[6]);
        assert_eq!(l[6], l[8]);
    }
}
