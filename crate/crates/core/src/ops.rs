//! Forward and backward kernels for the layer primitives.
//!
//! Kernels are pure functions over [`Tensor`]s. Parallel loops only ever write
//! disjoint output chunks and every reduction runs in a fixed order, so results
//! are bit-identical from run to run regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

/// Valid destination range `[lo, hi)` for a tap with offset `off` along an
/// axis of length `len`: positions `p` with `0 <= p + off < len`.
#[inline]
fn tap_range(off: isize, len: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

fn check_conv(x: Shape, k: Shape) -> Result<()> {
    if !matches!(k.h, 1 | 3) || !matches!(k.w, 1 | 3) {
        return shape_err(format!("conv2d kernel must be 1x1 or 3x3 spatially, got {}x{}", k.h, k.w));
    }
    if k.c != x.c {
        return shape_err(format!("conv2d kernel {k} expects {} input channels but input {x} has {}", k.c, x.c));
    }
    Ok(())
}

/// Same-size, stride-1, zero-padded cross-correlation.
/// `k` has shape `[c_out, c_in, kh, kw]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ks = k.shape();
    check_conv(xs, ks)?;
    let (h, w) = (xs.h, xs.w);
    let (ph, pw) = ((ks.h / 2) as isize, (ks.w / 2) as isize);
    let cout = ks.n;
    let mut out = Tensor::zeros(Shape::new(xs.n, cout, h, w));
    if xs.plane() == 0 {
        return Ok(out);
    }
    let kd = k.data();
    out.data_mut().par_chunks_mut(h * w).enumerate().for_each(|(idx, oplane)| {
        let (n, co) = (idx / cout, idx % cout);
        for ci in 0..xs.c {
            let iplane = x.plane(n, ci);
            for ky in 0..ks.h {
                let oy = ky as isize - ph;
                let (ylo, yhi) = tap_range(oy, h);
                for kx in 0..ks.w {
                    let ox = kx as isize - pw;
                    let (xlo, xhi) = tap_range(ox, w);
                    let wv = kd[((co * ks.c + ci) * ks.h + ky) * ks.w + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    for y in ylo..yhi {
                        let sy = (y as isize + oy) as usize;
                        let sx = (xlo as isize + ox) as usize;
                        let orow = &mut oplane[y * w + xlo..y * w + xhi];
                        let irow = &iplane[sy * w + sx..sy * w + sx + (xhi - xlo)];
                        for (o, &i) in orow.iter_mut().zip(irow) {
                            *o = *o + wv * i;
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input and its kernel.
pub fn conv2d_backward<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let xs = x.shape();
    let ks = k.shape();
    check_conv(xs, ks)?;
    let (h, w) = (xs.h, xs.w);
    if dy.shape() != Shape::new(xs.n, ks.n, h, w) {
        return shape_err(format!("conv2d upstream gradient {} does not match output", dy.shape()));
    }
    let (ph, pw) = ((ks.h / 2) as isize, (ks.w / 2) as isize);
    let kd = k.data();

    let mut dx = Tensor::zeros(xs);
    if xs.plane() > 0 {
        dx.data_mut().par_chunks_mut(h * w).enumerate().for_each(|(idx, dplane)| {
            let (n, ci) = (idx / xs.c, idx % xs.c);
            for co in 0..ks.n {
                let gplane = dy.plane(n, co);
                for ky in 0..ks.h {
                    let oy = ky as isize - ph;
                    let (ylo, yhi) = tap_range(oy, h);
                    for kx in 0..ks.w {
                        let ox = kx as isize - pw;
                        let (xlo, xhi) = tap_range(ox, w);
                        let wv = kd[((co * ks.c + ci) * ks.h + ky) * ks.w + kx];
                        for y in ylo..yhi {
                            let sy = (y as isize + oy) as usize;
                            let sx = (xlo as isize + ox) as usize;
                            let grow = &gplane[y * w + xlo..y * w + xhi];
                            let drow = &mut dplane[sy * w + sx..sy * w + sx + (xhi - xlo)];
                            for (d, &g) in drow.iter_mut().zip(grow) {
                                *d = *d + wv * g;
                            }
                        }
                    }
                }
            }
        });
    }

    let taps = ks.h * ks.w;
    let mut dk = Tensor::zeros(ks);
    dk.data_mut().par_chunks_mut(taps).enumerate().for_each(|(idx, dtaps)| {
        let (co, ci) = (idx / ks.c, idx % ks.c);
        for n in 0..xs.n {
            let gplane = dy.plane(n, co);
            let iplane = x.plane(n, ci);
            for ky in 0..ks.h {
                let oy = ky as isize - ph;
                let (ylo, yhi) = tap_range(oy, h);
                for kx in 0..ks.w {
                    let ox = kx as isize - pw;
                    let (xlo, xhi) = tap_range(ox, w);
                    let mut acc = T::zero();
                    for y in ylo..yhi {
                        let sy = (y as isize + oy) as usize;
                        let sx = (xlo as isize + ox) as usize;
                        let grow = &gplane[y * w + xlo..y * w + xhi];
                        let irow = &iplane[sy * w + sx..sy * w + sx + (xhi - xlo)];
                        let mut row = T::zero();
                        for (&g, &i) in grow.iter().zip(irow) {
                            row = row + g * i;
                        }
                        acc = acc + row;
                    }
                    dtaps[ky * ks.w + kx] = dtaps[ky * ks.w + kx] + acc;
                }
            }
        }
    });
    Ok((dx, dk))
}

/// 2×2 max-pool with stride 2. Returns the pooled tensor and, per output
/// element, the flat input index of the selected maximum (first maximum in
/// row-major window order on ties).
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return shape_err(format!("maxpool2 needs even spatial dims, got {}x{}", s.h, s.w));
    }
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(os);
    let mut arg = vec![0usize; os.numel()];
    let xd = x.data();
    let mut o = 0;
    for plane in 0..s.n * s.c {
        let base = plane * s.plane();
        for y in 0..os.h {
            for xx in 0..os.w {
                let mut best = base + 2 * y * s.w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * s.w + 2 * xx + dx;
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                out.data_mut()[o] = xd[best];
                arg[o] = best;
                o += 1;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2_backward<T: Scalar>(input: Shape, arg: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input);
    let d = dx.data_mut();
    for (&i, &g) in arg.iter().zip(dy.data()) {
        d[i] = d[i] + g;
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, 2 * s.h, 2 * s.w), |n, c, y, xx| x.at(n, c, y / 2, xx / 2))
}

pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let s = dy.shape();
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut dx = Tensor::zeros(os);
    let gd = dy.data();
    let mut o = 0;
    for plane in 0..os.n * os.c {
        let base = plane * s.plane();
        for y in 0..os.h {
            for x in 0..os.w {
                let i = base + 2 * y * s.w + 2 * x;
                dx.data_mut()[o] = gd[i] + gd[i + 1] + gd[i + s.w] + gd[i + s.w + 1];
                o += 1;
            }
        }
    }
    dx
}

/// Per-channel batch statistics `(mean, biased variance)` over `(n, h, w)`.
pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let m = (s.n * s.plane()) as f64;
    let mut mean = Vec::with_capacity(s.c);
    let mut var = Vec::with_capacity(s.c);
    for c in 0..s.c {
        let mut acc = 0.0f64;
        for n in 0..s.n {
            acc += x.plane(n, c).iter().map(|v| v.f64()).sum::<f64>();
        }
        let mu = acc / m;
        let mut sq = 0.0f64;
        for n in 0..s.n {
            sq += x.plane(n, c).iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>();
        }
        mean.push(T::c(mu));
        var.push(T::c(sq / m));
    }
    (mean, var)
}

/// `(x - mean_c) * inv_std_c` per channel.
pub fn normalize<T: Scalar>(x: &Tensor<T>, mean: &[T], inv_std: &[T]) -> Tensor<T> {
    let s = x.shape();
    let mut out = x.clone();
    let p = s.plane();
    out.data_mut().par_chunks_mut(p).enumerate().for_each(|(idx, plane)| {
        let c = idx % s.c;
        let (m, k) = (mean[c], inv_std[c]);
        plane.iter_mut().for_each(|v| *v = (*v - m) * k);
    });
    out
}

pub fn inv_std<T: Scalar>(var: &[T]) -> Vec<T> {
    var.iter().map(|&v| T::one() / (v + T::c(BN_EPS)).sqrt()).collect()
}

/// Training-mode batch-norm backward given the normalized output `xhat`.
pub fn batchnorm_train_backward<T: Scalar>(xhat: &Tensor<T>, inv_std: &[T], dy: &Tensor<T>) -> Tensor<T> {
    let s = xhat.shape();
    let m = (s.n * s.plane()) as f64;
    let mut sum_dy = vec![0.0f64; s.c];
    let mut sum_dy_xhat = vec![0.0f64; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            for (&g, &xh) in dy.plane(n, c).iter().zip(xhat.plane(n, c)) {
                sum_dy[c] += g.f64();
                sum_dy_xhat[c] += g.f64() * xh.f64();
            }
        }
    }
    let mut dx = Tensor::zeros(s);
    let p = s.plane();
    dx.data_mut().par_chunks_mut(p).enumerate().for_each(|(idx, plane)| {
        let (n, c) = (idx / s.c, idx % s.c);
        let k = T::c(inv_std[c].f64() / m);
        let (a, b) = (T::c(sum_dy[c]), T::c(sum_dy_xhat[c]));
        let mm = T::c(m);
        for ((d, &g), &xh) in plane.iter_mut().zip(dy.plane(n, c)).zip(xhat.plane(n, c)) {
            *d = k * (mm * g - a - xh * b);
        }
    });
    dx
}

/// Scale each channel plane by `inv_std_c`.
pub fn scale_channels<T: Scalar>(dy: &Tensor<T>, k: &[T]) -> Tensor<T> {
    let s = dy.shape();
    let mut out = dy.clone();
    out.data_mut().par_chunks_mut(s.plane().max(1)).enumerate().for_each(|(idx, plane)| {
        let kc = k[idx % s.c];
        plane.iter_mut().for_each(|v| *v = *v * kc);
    });
    out
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// Two-class softmax over the channel axis.
pub fn softmax2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.c != 2 {
        return shape_err(format!("softmax2 expects 2 channels, got {s}"));
    }
    let mut out = Tensor::zeros(s);
    let p = s.plane();
    for n in 0..s.n {
        let a = x.plane(n, 0);
        let b = x.plane(n, 1);
        let base = n * 2 * p;
        let (o0, o1) = out.data_mut()[base..base + 2 * p].split_at_mut(p);
        for i in 0..p {
            let m = a[i].max(b[i]);
            let ea = (a[i] - m).exp();
            let eb = (b[i] - m).exp();
            let z = ea + eb;
            o0[i] = ea / z;
            o1[i] = eb / z;
        }
    }
    Ok(out)
}

pub fn softmax2_backward<T: Scalar>(probs: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let s = probs.shape();
    let p = s.plane();
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        let (p0, p1) = (probs.plane(n, 0), probs.plane(n, 1));
        let (g0, g1) = (dy.plane(n, 0), dy.plane(n, 1));
        let base = n * 2 * p;
        let (d0, d1) = dx.data_mut()[base..base + 2 * p].split_at_mut(p);
        for i in 0..p {
            let dot = p0[i] * g0[i] + p1[i] * g1[i];
            d0[i] = p0[i] * (g0[i] - dot);
            d1[i] = p1[i] * (g1[i] - dot);
        }
    }
    dx
}

/// Stack `b`'s channels after `a`'s.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return shape_err(format!("concat needs matching batch and spatial dims, got {sa} and {sb}"));
    }
    let mut data = Vec::with_capacity(sa.numel() + sb.numel());
    for n in 0..sa.n {
        let ca = sa.c * sa.plane();
        let cb = sb.c * sb.plane();
        data.extend_from_slice(&a.data()[n * ca..(n + 1) * ca]);
        data.extend_from_slice(&b.data()[n * cb..(n + 1) * cb]);
    }
    Tensor::from_vec(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w), data)
}

pub fn concat_backward<T: Scalar>(ca: usize, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let s = dy.shape();
    let cb = s.c - ca;
    let p = s.plane();
    let mut da = Vec::with_capacity(s.n * ca * p);
    let mut db = Vec::with_capacity(s.n * cb * p);
    for n in 0..s.n {
        let base = n * s.c * p;
        da.extend_from_slice(&dy.data()[base..base + ca * p]);
        db.extend_from_slice(&dy.data()[base + ca * p..base + s.c * p]);
    }
    (
        Tensor::from_vec(Shape::new(s.n, ca, s.h, s.w), da).expect("concat split"),
        Tensor::from_vec(Shape::new(s.n, cb, s.h, s.w), db).expect("concat split"),
    )
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = a.clone();
    out.add_assign(b)
        .map_err(|_| Error::Shape(format!("add needs equal shapes, got {} and {}", a.shape(), b.shape())))?;
    Ok(out)
}
