//! Weighted focal loss and the ℓ2 weight penalty.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Scalar, Shape, Tensor};

/// Lower clamp for the true-class probability inside the logarithm.
pub const P_FLOOR: f64 = 1e-7;

/// Per-pixel supervision for one batch: binary labels, positive weights and a
/// binary mask, all shaped `[n, 1, h, w]`.
#[derive(Debug, Clone)]
pub struct LossTarget<T> {
    pub labels: Tensor<T>,
    pub weights: Tensor<T>,
    pub mask: Tensor<T>,
    pub gamma: f64,
    active: usize,
}

impl<T: Scalar> LossTarget<T> {
    pub fn new(labels: Tensor<T>, weights: Tensor<T>, mask: Tensor<T>, gamma: f64) -> Result<Self> {
        let s = labels.shape();
        if s.c != 1 || weights.shape() != s || mask.shape() != s {
            return Err(Error::Shape(format!(
                "loss target maps must share a single-channel shape: labels {s}, weights {}, mask {}",
                weights.shape(),
                mask.shape()
            )));
        }
        if !(gamma >= 0.0) {
            return Err(Error::Config(format!("focal gamma must be >= 0, got {gamma}")));
        }
        let active = mask.data().iter().filter(|&&m| m > T::zero()).count();
        if active == 0 {
            return Err(Error::Data("focal loss mask selects no pixels".into()));
        }
        Ok(LossTarget { labels, weights, mask, gamma, active })
    }

    pub fn active_pixels(&self) -> usize {
        self.active
    }

    fn check_probs(&self, probs: Shape) -> Result<()> {
        let s = self.labels.shape();
        if probs != Shape::new(s.n, 2, s.h, s.w) {
            return Err(Error::Shape(format!(
                "focal loss expects probabilities [{}, 2, {}, {}], got {probs}",
                s.n, s.h, s.w
            )));
        }
        Ok(())
    }
}

/// Pixel term `(1 - p)^γ · (-ln max(p, floor))` and its derivative in `p`.
#[inline]
fn focal_term(p: f64, gamma: f64) -> (f64, f64) {
    let q = (1.0 - p).max(0.0);
    let (log_term, dlog) = if p >= P_FLOOR { (-p.ln(), -1.0 / p) } else { (-P_FLOOR.ln(), 0.0) };
    if gamma == 0.0 {
        return (log_term, dlog);
    }
    let mod_ = q.powf(gamma);
    let dmod = if q > 0.0 { -gamma * q.powf(gamma - 1.0) } else { 0.0 };
    (mod_ * log_term, dmod * log_term + mod_ * dlog)
}

/// Mean over masked pixels of `w · (1 - p_t)^γ · (-ln p_t)`, where `p_t` is
/// the probability assigned to the labelled class.
pub fn focal_forward<T: Scalar>(probs: &Tensor<T>, target: &LossTarget<T>) -> Result<T> {
    target.check_probs(probs.shape())?;
    let s = target.labels.shape();
    let mut acc = 0.0f64;
    for n in 0..s.n {
        let (p0, p1) = (probs.plane(n, 0), probs.plane(n, 1));
        let lab = target.labels.plane(n, 0);
        let wt = target.weights.plane(n, 0);
        let msk = target.mask.plane(n, 0);
        for i in 0..s.plane() {
            if msk[i] > T::zero() {
                let pt = if lab[i] > T::c(0.5) { p1[i] } else { p0[i] };
                acc += wt[i].f64() * focal_term(pt.f64(), target.gamma).0;
            }
        }
    }
    Ok(T::c(acc / target.active as f64))
}

/// Gradient of [`focal_forward`] with respect to `probs`, scaled by `upstream`.
pub fn focal_backward<T: Scalar>(probs: &Tensor<T>, target: &LossTarget<T>, upstream: T) -> Tensor<T> {
    let s = target.labels.shape();
    let scale = upstream.f64() / target.active as f64;
    let mut dp = Tensor::zeros(probs.shape());
    let p = s.plane();
    for n in 0..s.n {
        let lab = target.labels.plane(n, 0);
        let wt = target.weights.plane(n, 0);
        let msk = target.mask.plane(n, 0);
        for i in 0..p {
            if msk[i] > T::zero() {
                let c = usize::from(lab[i] > T::c(0.5));
                let pt = probs.plane(n, c)[i].f64();
                let d = wt[i].f64() * focal_term(pt, target.gamma).1 * scale;
                dp.data_mut()[(n * 2 + c) * p + i] = T::c(d);
            }
        }
    }
    dp
}

/// Weighted focal loss on plain tensors.
pub fn focal_loss<T: Scalar>(
    probs: &Tensor<T>,
    labels: &Tensor<T>,
    weights: &Tensor<T>,
    mask: &Tensor<T>,
    gamma: f64,
) -> Result<f64> {
    let target = LossTarget::new(labels.clone(), weights.clone(), mask.clone(), gamma)?;
    Ok(focal_forward(probs, &target)?.f64())
}

/// `λ · Σ θ²` over the given kernel nodes, recorded on `graph`.
pub fn l2_penalty<T: Scalar>(graph: &mut Graph<T>, kernels: &[NodeId], lambda: f64) -> Option<NodeId> {
    let mut total: Option<NodeId> = None;
    for &k in kernels {
        let sq = graph.sum_squares(k);
        total = Some(match total {
            None => sq,
            Some(t) => crate::graph::Tape::add(graph, &t, &sq).expect("scalar add"),
        });
    }
    total.map(|t| graph.scale(t, T::c(lambda)))
}
