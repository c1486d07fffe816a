//! Bias-corrected Adam.

use crate::graph::Parameter;
use crate::tensor::{Scalar, Tensor};
use crate::train::config::AdamParams;

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub hp: AdamParams,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Parameter<T>], hp: AdamParams) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState { m: zeros(), v: zeros(), t: 0, hp }
    }

    /// One update of every parameter from its `grad`.
    pub fn step(&mut self, params: &mut [Parameter<T>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter list changed under the optimizer");
        self.t += 1;
        let AdamParams { beta1, beta2, eps } = self.hp;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            for (((w, m), v), g) in p.value.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g) {
                let gf = g.f64();
                let mf = beta1 * m.f64() + (1.0 - beta1) * gf;
                let vf = beta2 * v.f64() + (1.0 - beta2) * gf * gf;
                *m = T::c(mf);
                *v = T::c(vf);
                let update = lr * (mf / bc1) / ((vf / bc2).sqrt() + eps);
                *w = T::c(w.f64() - update);
            }
        }
    }
}
