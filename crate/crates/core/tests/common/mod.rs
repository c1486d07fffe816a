#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use tinyunet::graph::{Graph, Mode, NodeId, Tape};
use tinyunet::model::{UNet, UNetConfig};
use tinyunet::train::loss::{l2_penalty, LossTarget};
use tinyunet::{Shape, Tensor};

pub const STEP: f64 = 1e-4;
pub const DENOM_FLOOR: f64 = 1e-8;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(DENOM_FLOOR)
}

pub fn random(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

/// Values bounded away from 0 and pairwise distinct, so ReLU and max-pool
/// stay differentiable under the finite-difference step.
pub fn random_kinkless(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut t = random(shape, seed);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        let s = if *v < 0.0 { -1.0 } else { 1.0 };
        *v = s * (0.05 + v.abs()) + 1e-3 * i as f64;
    }
    t
}

/// Σ (y + r)² for a fixed random `r`: a scalar whose gradient in `y` is
/// generic (not constant).
pub fn project(g: &mut Graph<f64>, y: NodeId, seed: u64) -> NodeId {
    let r = random(g.get(y).shape(), seed ^ 0xABCD);
    let r = g.input(r);
    let s = g.add(&y, &r).unwrap();
    g.sum_squares(s)
}

/// Largest relative error between backprop and central differences over
/// every element of every input.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let loss = f(&mut g, &ids);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> =
        ids.iter().map(|&i| g.grad(i).cloned().unwrap_or_else(|| Tensor::zeros(g.get(i).shape()))).collect();

    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| g.input(x.clone())).collect();
        let l = f(&mut g, &ids);
        g.get(l).data()[0]
    };
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for k in 0..xs.len() {
        for e in 0..xs[k].len() {
            let orig = xs[k].data()[e];
            xs[k].data_mut()[e] = orig + STEP;
            let up = eval(&xs);
            xs[k].data_mut()[e] = orig - STEP;
            let down = eval(&xs);
            xs[k].data_mut()[e] = orig;
            let num = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[k].data()[e], num));
        }
    }
    worst
}

/// Objective of a batch: focal loss (plus optional ℓ2) in train mode.
pub struct Objective {
    pub x: Tensor<f64>,
    pub target: Arc<LossTarget<f64>>,
    pub lambda: f64,
}

impl Objective {
    pub fn synthetic(n: usize, h: usize, w: usize, gamma: f64, lambda: f64, seed: u64) -> Self {
        let s = Shape::new(n, 1, h, w);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(s, seed);
        let labels = Tensor::from_fn(s, |_, _, _, _| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        let weights = Tensor::from_fn(s, |_, _, _, _| rng.random_range(0.5..3.0));
        let mask = Tensor::from_fn(s, |_, _, _, _| if rng.random_bool(0.85) { 1.0 } else { 0.0 });
        let target = Arc::new(LossTarget::new(labels, weights, mask, gamma).unwrap());
        Objective { x, target, lambda }
    }

    pub fn value(&self, net: &mut UNet<f64>) -> f64 {
        let mut g = Graph::new();
        let l = self.record(net, &mut g);
        g.get(l).data()[0]
    }

    fn record(&self, net: &mut UNet<f64>, g: &mut Graph<f64>) -> NodeId {
        let out = net.forward(g, self.x.clone(), Mode::Train).unwrap();
        let mut l = g.focal_loss(out.probs, self.target.clone()).unwrap();
        for s in &out.side {
            let sl = g.focal_loss(*s, self.target.clone()).unwrap();
            l = g.add(&l, &sl).unwrap();
        }
        if let Some(p) = l2_penalty(g, &out.kernels, self.lambda) {
            l = g.add(&l, &p).unwrap();
        }
        l
    }

    /// Backprop gradients of every parameter, in parameter order.
    pub fn gradients(&self, net: &mut UNet<f64>) -> Vec<Tensor<f64>> {
        let mut g = Graph::new();
        let l = self.record(net, &mut g);
        g.backward(l).unwrap();
        let mut grads: Vec<Tensor<f64>> = net.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        for (id, gr) in g.param_grads() {
            grads[id.0].add_assign(gr).unwrap();
        }
        grads
    }
}

/// Max relative error of the parameter gradient of `obj` on a fresh network.
pub fn check_network(cfg: UNetConfig, obj: &Objective, seed: u64) -> f64 {
    let mut net = UNet::<f64>::build(cfg, seed).unwrap();
    let analytic = obj.gradients(&mut net);
    let mut worst = 0.0f64;
    for k in 0..net.params().len() {
        for e in 0..net.params()[k].value.len() {
            let orig = net.params()[k].value.data()[e];
            net.params_mut()[k].value.data_mut()[e] = orig + STEP;
            let up = obj.value(&mut net);
            net.params_mut()[k].value.data_mut()[e] = orig - STEP;
            let down = obj.value(&mut net);
            net.params_mut()[k].value.data_mut()[e] = orig;
            let num = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[k].data()[e], num));
        }
    }
    worst
}

/// Direct nested-loop same-padded cross-correlation.
pub fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
    let (xs, ks) = (x.shape(), k.shape());
    let r = (ks.h / 2) as isize;
    Tensor::from_fn(Shape::new(xs.n, ks.n, xs.h, xs.w), |n, o, y, xx| {
        let mut acc = 0.0;
        for c in 0..xs.c {
            for dy in 0..ks.h {
                for dx in 0..ks.w {
                    let sy = y as isize + dy as isize - r;
                    let sx = xx as isize + dx as isize - r;
                    if sy >= 0 && sx >= 0 && (sy as usize) < xs.h && (sx as usize) < xs.w {
                        acc += x.at(n, c, sy as usize, sx as usize) * k.at(o, c, dy, dx);
                    }
                }
            }
        }
        acc
    })
}

/// AUC as the fraction of positive/negative pairs ordered correctly, ties ½.
pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Adam on a scalar, written out step by step.
pub fn adam_reference(theta0: f64, grad: impl Fn(f64) -> f64, lr: f64, steps: usize) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let (mut m, mut v, mut th) = (0.0, 0.0, theta0);
    let mut trace = Vec::new();
    for t in 1..=steps {
        let g = grad(th);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        th -= lr * mh / (vh.sqrt() + eps);
        trace.push(th);
    }
    trace
}
