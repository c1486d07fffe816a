//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Graph`] records every operation of one forward pass in execution order,
//! so node inputs always precede the node. [`Graph::backward`] sweeps the list
//! in reverse once; a second call is rejected. Graphs are rebuilt per step.
//!
//! Network code is written against the [`Tape`] trait so the same forward
//! definition runs either recorded ([`Graph`]) or eagerly ([`Eager`]), the
//! latter dropping intermediates as soon as they go out of scope.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Shape, Tensor};
use crate::train::loss::{self, LossTarget};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { name: name.into(), value, grad }
    }
}

/// Running statistics of one batch-norm layer. No learnable affine.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BnState<T> {
    pub fn new(channels: usize) -> Self {
        BnState { running_mean: vec![T::zero(); channels], running_var: vec![T::one(); channels] }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Batch norm in either mode. Train mode normalizes by batch statistics and
/// folds them into the running averages; infer mode uses the running stats.
/// Returns the output and the per-channel inverse standard deviation used.
fn batchnorm_forward<T: Scalar>(x: &Tensor<T>, bn: &mut BnState<T>, mode: Mode) -> Result<(Tensor<T>, Vec<T>)> {
    let s = x.shape();
    if s.c != bn.channels() {
        return Err(Error::Shape(format!("batchnorm over {} channels applied to {s}", bn.channels())));
    }
    match mode {
        Mode::Train => {
            if s.n * s.plane() < 2 {
                return Err(Error::Shape(format!("train-mode batchnorm needs >= 2 values per channel, got {s}")));
            }
            let (mean, var) = ops::channel_stats(x);
            let k = ops::inv_std(&var);
            let mom = T::c(ops::BN_MOMENTUM);
            let one = T::one();
            for c in 0..s.c {
                bn.running_mean[c] = mom * bn.running_mean[c] + (one - mom) * mean[c];
                bn.running_var[c] = mom * bn.running_var[c] + (one - mom) * var[c];
            }
            Ok((ops::normalize(x, &mean, &k), k))
        }
        Mode::Infer => {
            let k = ops::inv_std(&bn.running_var);
            Ok((ops::normalize(x, &bn.running_mean, &k), k))
        }
    }
}

/// Operations a network forward pass is written against.
pub trait Tape<T: Scalar> {
    type Var: Clone;

    fn input(&mut self, x: Tensor<T>) -> Self::Var;
    fn param(&mut self, id: ParamId, value: &Tensor<T>) -> Self::Var;
    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor<T>;

    fn conv2d(&mut self, x: &Self::Var, k: &Self::Var) -> Result<Self::Var>;
    fn maxpool2(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn upsample2(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn batchnorm(&mut self, x: &Self::Var, bn: &mut BnState<T>, mode: Mode) -> Result<Self::Var>;
    fn relu(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn softmax2(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn concat(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
}

/// Immediate evaluation without gradient bookkeeping.
#[derive(Debug, Default)]
pub struct Eager;

impl<T: Scalar> Tape<T> for Eager {
    type Var = Arc<Tensor<T>>;

    fn input(&mut self, x: Tensor<T>) -> Self::Var {
        Arc::new(x)
    }
    fn param(&mut self, _id: ParamId, value: &Tensor<T>) -> Self::Var {
        Arc::new(value.clone())
    }
    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor<T> {
        v
    }
    fn conv2d(&mut self, x: &Self::Var, k: &Self::Var) -> Result<Self::Var> {
        Ok(Arc::new(ops::conv2d(x, k)?))
    }
    fn maxpool2(&mut self, x: &Self::Var) -> Result<Self::Var> {
        Ok(Arc::new(ops::maxpool2(x)?.0))
    }
    fn upsample2(&mut self, x: &Self::Var) -> Result<Self::Var> {
        Ok(Arc::new(ops::upsample2(x)))
    }
    fn batchnorm(&mut self, x: &Self::Var, bn: &mut BnState<T>, mode: Mode) -> Result<Self::Var> {
        Ok(Arc::new(batchnorm_forward(x, bn, mode)?.0))
    }
    fn relu(&mut self, x: &Self::Var) -> Result<Self::Var> {
        Ok(Arc::new(ops::relu(x)))
    }
    fn softmax2(&mut self, x: &Self::Var) -> Result<Self::Var> {
        Ok(Arc::new(ops::softmax2(x)?))
    }
    fn concat(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        Ok(Arc::new(ops::concat_channels(a, b)?))
    }
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        Ok(Arc::new(ops::add(a, b)?))
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d(NodeId, NodeId),
    MaxPool(NodeId, Vec<usize>),
    Upsample(NodeId),
    BnTrain(NodeId, Vec<T>),
    BnInfer(NodeId, Vec<T>),
    Relu(NodeId),
    Softmax2(NodeId),
    Concat(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sum(NodeId),
    SumSquares(NodeId),
    Scale(NodeId, T),
    Focal(NodeId, Arc<LossTarget<T>>),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    swept: bool,
    lean: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), swept: false, lean: false }
    }

    /// A graph that after backward retains gradients only for leaves and the
    /// loss. Used by the training loop to bound memory.
    pub fn lean() -> Self {
        Graph { nodes: Vec::new(), swept: false, lean: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op, value, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn get(&self, id: NodeId) -> &Tensor<T> {
        self.val(id)
    }

    /// Gradient of the last backward sweep, if `id` was reachable from the loss.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Parameter leaves and their gradients, in recording order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.nodes.iter().filter_map(|n| match (&n.op, &n.grad) {
            (Op::Param(p), Some(g)) => Some((*p, g)),
            _ => None,
        })
    }

    /// Σ of all elements, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(v))
    }

    /// Σ x², as a scalar node.
    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x).sum_squares();
        self.push(Op::SumSquares(x), Tensor::scalar(v))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let v = self.val(x).map(|e| e * c);
        self.push(Op::Scale(x, c), v)
    }

    /// Weighted focal loss of a two-class probability map, as a scalar node.
    pub fn focal_loss(&mut self, probs: NodeId, target: Arc<LossTarget<T>>) -> Result<NodeId> {
        let v = loss::focal_forward(self.val(probs), &target)?;
        Ok(self.push(Op::Focal(probs, target), Tensor::scalar(v)))
    }

    /// Backpropagate from the scalar `loss`. Every node reachable from it ends
    /// up with a gradient of its own shape.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.swept {
            return Err(Error::Graph("backward already ran on this graph".into()));
        }
        if self.val(loss).shape() != Shape::scalar() {
            return Err(Error::Graph(format!("backward needs a scalar loss, got {}", self.val(loss).shape())));
        }
        self.swept = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let send = |grads: &mut Vec<Option<Tensor<T>>>, to: NodeId, d: Tensor<T>| -> Result<()> {
                match &mut grads[to.0] {
                    Some(acc) => acc.add_assign(&d),
                    slot @ None => {
                        *slot = Some(d);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Conv2d(x, k) => {
                    let (dx, dk) = ops::conv2d_backward(self.val(*x), self.val(*k), &g)?;
                    send(&mut grads, *x, dx)?;
                    send(&mut grads, *k, dk)?;
                }
                Op::MaxPool(x, arg) => {
                    let dx = ops::maxpool2_backward(self.val(*x).shape(), arg, &g);
                    send(&mut grads, *x, dx)?;
                }
                Op::Upsample(x) => send(&mut grads, *x, ops::upsample2_backward(&g))?,
                Op::BnTrain(x, k) => {
                    let dx = ops::batchnorm_train_backward(&node.value, k, &g);
                    send(&mut grads, *x, dx)?;
                }
                Op::BnInfer(x, k) => send(&mut grads, *x, ops::scale_channels(&g, k))?,
                Op::Relu(x) => send(&mut grads, *x, ops::relu_backward(self.val(*x), &g))?,
                Op::Softmax2(x) => send(&mut grads, *x, ops::softmax2_backward(&node.value, &g))?,
                Op::Concat(a, b) => {
                    let (da, db) = ops::concat_backward(self.val(*a).shape().c, &g);
                    send(&mut grads, *a, da)?;
                    send(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    send(&mut grads, *a, g.clone())?;
                    send(&mut grads, *b, g.clone())?;
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    send(&mut grads, *x, Tensor::full(self.val(*x).shape(), gv))?;
                }
                Op::SumSquares(x) => {
                    let gv = g.data()[0] + g.data()[0];
                    send(&mut grads, *x, self.val(*x).map(|e| gv * e))?;
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    send(&mut grads, *x, g.map(|e| e * c))?;
                }
                Op::Focal(p, target) => {
                    let dp = loss::focal_backward(self.val(*p), target, g.data()[0]);
                    send(&mut grads, *p, dp)?;
                }
            }
            if !self.lean || matches!(self.nodes[i].op, Op::Param(_) | Op::Input) || i == loss.0 {
                self.nodes[i].grad = Some(g);
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Tape<T> for Graph<T> {
    type Var = NodeId;

    fn input(&mut self, x: Tensor<T>) -> NodeId {
        self.push(Op::Input, x)
    }

    fn param(&mut self, id: ParamId, value: &Tensor<T>) -> NodeId {
        self.push(Op::Param(id), value.clone())
    }

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor<T> {
        self.val(*v)
    }

    fn conv2d(&mut self, x: &NodeId, k: &NodeId) -> Result<NodeId> {
        let y = ops::conv2d(self.val(*x), self.val(*k))?;
        Ok(self.push(Op::Conv2d(*x, *k), y))
    }

    fn maxpool2(&mut self, x: &NodeId) -> Result<NodeId> {
        let (y, arg) = ops::maxpool2(self.val(*x))?;
        Ok(self.push(Op::MaxPool(*x, arg), y))
    }

    fn upsample2(&mut self, x: &NodeId) -> Result<NodeId> {
        let y = ops::upsample2(self.val(*x));
        Ok(self.push(Op::Upsample(*x), y))
    }

    fn batchnorm(&mut self, x: &NodeId, bn: &mut BnState<T>, mode: Mode) -> Result<NodeId> {
        let (y, k) = batchnorm_forward(self.val(*x), bn, mode)?;
        let op = match mode {
            Mode::Train => Op::BnTrain(*x, k),
            Mode::Infer => Op::BnInfer(*x, k),
        };
        Ok(self.push(op, y))
    }

    fn relu(&mut self, x: &NodeId) -> Result<NodeId> {
        let y = ops::relu(self.val(*x));
        Ok(self.push(Op::Relu(*x), y))
    }

    fn softmax2(&mut self, x: &NodeId) -> Result<NodeId> {
        let y = ops::softmax2(self.val(*x))?;
        Ok(self.push(Op::Softmax2(*x), y))
    }

    fn concat(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let y = ops::concat_channels(self.val(*a), self.val(*b))?;
        Ok(self.push(Op::Concat(*a, *b), y))
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let y = ops::add(self.val(*a), self.val(*b))?;
        Ok(self.push(Op::Add(*a, *b), y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_relu_on_positive_input_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn(Shape::new(1, 2, 3, 3), |_, c, y, x| 0.1 + (c + y + x) as f64));
        let r = g.relu(&x).unwrap();
        let l = g.sum(r);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constant_kernel_interior_grad_is_nine() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn(Shape::new(1, 1, 5, 5), |_, _, y, x| (y * x) as f64));
        let k = g.param(ParamId(0), &Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let y = g.conv2d(&x, &k).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        let gx = g.grad(x).unwrap();
        for y in 1..4 {
            for xx in 1..4 {
                assert_eq!(gx.at(0, 0, y, xx), 9.0);
            }
        }
        assert_eq!(gx.at(0, 0, 0, 0), 4.0);
        assert_eq!(g.param_grads().count(), 1);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(Shape::new(1, 1, 2, 2), 1.0));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::Graph(_))));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(Shape::new(1, 1, 2, 2), 1.0));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(Shape::new(1, 1, 2, 2), 3.0));
        let y = g.add(&x, &x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn train_batchnorm_standardizes() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn(Shape::new(3, 2, 4, 4), |n, c, y, x| {
            ((n * 31 + c * 17 + y * 7 + x * 3) % 11) as f64 * (1.0 + c as f64)
        }));
        let mut bn = BnState::new(2);
        let y = g.batchnorm(&x, &mut bn, Mode::Train).unwrap();
        let (mean, var) = ops::channel_stats(g.get(y));
        for c in 0..2 {
            assert!(mean[c].abs() < 1e-3);
            assert!((var[c] - 1.0).abs() < 1e-3);
        }
        assert_ne!(bn.running_mean, vec![0.0, 0.0]);
    }

    #[test]
    fn infer_batchnorm_matches_formula() {
        let mut bn = BnState { running_mean: vec![0.5, -2.0], running_var: vec![4.0, 0.25] };
        let xt = Tensor::from_fn(Shape::new(1, 2, 2, 3), |_, c, y, x| (c * 6 + y * 3 + x) as f64 - 4.0);
        let mut e = Eager;
        let xv = Tape::<f64>::input(&mut e, xt.clone());
        let y = e.batchnorm(&xv, &mut bn, Mode::Infer).unwrap();
        for c in 0..2 {
            for yy in 0..2 {
                for xx in 0..3 {
                    let want = (xt.at(0, c, yy, xx) - bn.running_mean[c]) / (bn.running_var[c] + 1e-5).sqrt();
                    assert!((y.at(0, c, yy, xx) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batchnorm_rejects_single_value_channels() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
        assert!(g.batchnorm(&x, &mut BnState::new(1), Mode::Train).is_err());
    }
}
