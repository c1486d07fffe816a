//! The parameterized U-Net family.
//!
//! Topology for the plain variant with two convolutions per block:
//!
//! ```text
//! enc1:  conv3x3(1->f)  BN ReLU  conv3x3(f->f)  BN ReLU
//! enc i: maxpool  conv3x3(c[i-1]->c[i]) BN ReLU  conv3x3(c[i]->c[i]) BN ReLU   (i = L is the bottleneck)
//! dec j: upsample  conv1x1(c[j+1]->c[j]) BN ReLU  concat(enc j)
//!        conv3x3(2c[j]->c[j]) BN ReLU  conv3x3(c[j]->c[j]) BN ReLU
//! head:  conv3x3(f->2)  softmax
//! ```
//!
//! with `c[i] = f * 2^(i-1)`. No convolution carries a bias and batch norm has
//! no affine parameters. A one-level network has no pooling, upsampling or
//! skip connection: it is the chain `enc1` → `dec1` (without the concat) → head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{BnState, Mode, ParamId, Parameter, Tape};
use crate::model::config::{UNetConfig, Variant};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone)]
struct ConvUnit {
    kernel: ParamId,
    bn: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockKind {
    Plain,
    Residual,
    Dense,
}

#[derive(Debug, Clone)]
struct Block {
    kind: BlockKind,
    convs: Vec<ConvUnit>,
    proj: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    level: usize,
    up: Option<ConvUnit>,
    block: Block,
    side: Option<ParamId>,
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Output<V> {
    /// `[n, 2, h, w]` class probabilities; channel 1 is vessel.
    pub probs: V,
    /// Full-resolution auxiliary probability maps (side-output variant only),
    /// deepest decoder level first.
    pub side: Vec<V>,
    /// Every convolution kernel as a tape variable, for the weight penalty.
    pub kernels: Vec<V>,
}

/// A built network: named parameters, batch-norm state and the layer plan.
#[derive(Debug, Clone)]
pub struct UNet<T> {
    cfg: UNetConfig,
    params: Vec<Parameter<T>>,
    bn: Vec<(String, BnState<T>)>,
    encoder: Vec<Block>,
    decoder: Vec<DecoderLevel>,
    head: ParamId,
}

/// Declared kernel: name and `[c_out, c_in, k, k]`.
pub(crate) type KernelSpec = (String, Shape);

struct Builder {
    kernels: Vec<KernelSpec>,
    bns: Vec<(String, usize)>,
}

impl Builder {
    fn kernel(&mut self, name: String, cout: usize, cin: usize, k: usize) -> ParamId {
        self.kernels.push((name, Shape::new(cout, cin, k, k)));
        ParamId(self.kernels.len() - 1)
    }

    fn unit(&mut self, prefix: &str, tag: &str, cout: usize, cin: usize, k: usize) -> ConvUnit {
        let kernel = self.kernel(format!("{prefix}.{tag}.kernel"), cout, cin, k);
        let bn_name = if tag == "up" { format!("{prefix}.up.bn") } else { format!("{prefix}.bn{}", &tag[4..]) };
        self.bns.push((bn_name, cout));
        ConvUnit { kernel, bn: self.bns.len() - 1 }
    }

    fn block(&mut self, prefix: &str, kind: BlockKind, cin: usize, cout: usize, convs: usize) -> Block {
        let mut units = Vec::with_capacity(convs);
        let mut dense_width = cin;
        for k in 0..convs {
            let in_ch = match kind {
                BlockKind::Dense => dense_width,
                _ if k == 0 => cin,
                _ => cout,
            };
            units.push(self.unit(prefix, &format!("conv{}", k + 1), cout, in_ch, 3));
            dense_width += cout;
        }
        let proj = (kind == BlockKind::Residual && cin != cout)
            .then(|| self.kernel(format!("{prefix}.proj.kernel"), cout, cin, 1));
        Block { kind, convs: units, proj }
    }
}

fn plan(cfg: &UNetConfig) -> (Builder, Vec<Block>, Vec<DecoderLevel>, ParamId) {
    let mut b = Builder { kernels: Vec::new(), bns: Vec::new() };
    let l = cfg.levels;
    let convs = cfg.convs_per_level;
    let enc_kind = match cfg.variant {
        Variant::Residual => BlockKind::Residual,
        Variant::Dense => BlockKind::Dense,
        _ => BlockKind::Plain,
    };
    let dec_kind = if cfg.variant == Variant::Residual { BlockKind::Residual } else { BlockKind::Plain };

    let mut encoder = Vec::with_capacity(l);
    for i in 1..=l {
        let cin = if i == 1 { 1 } else { cfg.channels(i - 1) };
        encoder.push(b.block(&format!("enc{i}"), enc_kind, cin, cfg.channels(i), convs));
    }

    let mut decoder = Vec::new();
    if l == 1 {
        let f = cfg.base_filters;
        decoder.push(DecoderLevel { level: 1, up: None, block: b.block("dec1", dec_kind, f, f, convs), side: None });
    } else {
        for j in (1..l).rev() {
            let c = cfg.channels(j);
            let prefix = format!("dec{j}");
            let up = b.unit(&prefix, "up", c, cfg.channels(j + 1), 1);
            let block = b.block(&prefix, dec_kind, 2 * c, c, convs);
            let side = (cfg.variant == Variant::SideOutput).then(|| b.kernel(format!("{prefix}.side.kernel"), 2, c, 1));
            decoder.push(DecoderLevel { level: j, up: Some(up), block, side });
        }
    }
    let head = b.kernel("head.kernel".into(), 2, cfg.base_filters, 3);
    (b, encoder, decoder, head)
}

/// Names and shapes of every kernel `build` would create, in creation order.
pub(crate) fn kernel_layout(cfg: &UNetConfig) -> Vec<KernelSpec> {
    plan(cfg).0.kernels
}

impl<T: Scalar> UNet<T> {
    /// Build a network with He-normal initialized kernels drawn from `seed`.
    pub fn build(cfg: UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (b, encoder, decoder, head) = plan(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = b
            .kernels
            .into_iter()
            .map(|(name, s)| {
                let fan_in = (s.c * s.h * s.w) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
                let data = (0..s.numel()).map(|_| T::c(normal.sample(&mut rng))).collect();
                Parameter::new(name, Tensor::from_vec(s, data).expect("kernel shape"))
            })
            .collect();
        let bn = b.bns.into_iter().map(|(name, c)| (name, BnState::new(c))).collect();
        Ok(UNet { cfg, params, bn, encoder, decoder, head })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn bn_states(&self) -> &[(String, BnState<T>)] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [(String, BnState<T>)] {
        &mut self.bn
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn check_input(&self, s: Shape) -> Result<()> {
        let d = self.cfg.divisor();
        if s.c != 1 {
            return Err(Error::Shape(format!("network input must have 1 channel, got {s}")));
        }
        if !s.h.is_multiple_of(d) || !s.w.is_multiple_of(d) || s.h == 0 || s.w == 0 {
            return Err(Error::Shape(format!(
                "input {}x{} is not divisible by {d} (required for {} levels)",
                s.h, s.w, self.cfg.levels
            )));
        }
        Ok(())
    }

    pub fn forward<P: Tape<T>>(&mut self, tape: &mut P, x: Tensor<T>, mode: Mode) -> Result<Output<P::Var>> {
        self.check_input(x.shape())?;
        let relu = self.cfg.relu_enabled;
        let pv: Vec<P::Var> = self.params.iter().enumerate().map(|(i, p)| tape.param(ParamId(i), &p.value)).collect();
        let bn = &mut self.bn;

        let mut h = tape.input(x);
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (i, block) in self.encoder.iter().enumerate() {
            if i > 0 {
                h = tape.maxpool2(&h)?;
            }
            h = run_block(tape, &h, block, &pv, bn, mode, relu)?;
            skips.push(h.clone());
        }
        // the bottleneck output feeds the decoder directly, never a concat
        skips.pop();

        let mut side = Vec::new();
        for dec in &self.decoder {
            if let Some(up) = &dec.up {
                let u = tape.upsample2(&h)?;
                let u = run_unit(tape, &u, up, &pv, bn, mode, relu)?;
                let skip = skips.pop().expect("skip for each decoder level");
                h = tape.concat(&skip, &u)?;
            }
            h = run_block(tape, &h, &dec.block, &pv, bn, mode, relu)?;
            if let Some(k) = dec.side {
                let logits = tape.conv2d(&h, &pv[k.0])?;
                let mut s = tape.softmax2(&logits)?;
                for _ in 1..dec.level {
                    s = tape.upsample2(&s)?;
                }
                side.push(s);
            }
        }

        let logits = tape.conv2d(&h, &pv[self.head.0])?;
        let probs = tape.softmax2(&logits)?;
        Ok(Output { probs, side, kernels: pv })
    }

    /// Class probabilities `[n, 2, h, w]` for inputs of any size: the input
    /// is mirror-padded up to the next multiple of the pooling divisor and the
    /// output cropped back.
    pub fn infer_padded(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let d = self.cfg.divisor();
        let (ph, pw) = (s.h.div_ceil(d) * d, s.w.div_ceil(d) * d);
        let padded = if (ph, pw) == (s.h, s.w) { x } else { x.mirror_pad(ph, pw)? };
        let mut e = crate::graph::Eager;
        let out = self.forward(&mut e, padded, Mode::Infer)?;
        let p = Tape::<T>::value(&e, &out.probs);
        if (ph, pw) == (s.h, s.w) {
            Ok(p.clone())
        } else {
            p.crop(0, 0, s.h, s.w)
        }
    }

    /// Vessel probability map `[n, 1, h, w]` in inference mode.
    pub fn predict(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        let mut e = crate::graph::Eager;
        let out = self.forward(&mut e, x, Mode::Infer)?;
        let p = Tape::<T>::value(&e, &out.probs);
        let s = p.shape();
        Ok(Tensor::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, y, x| p.at(n, 1, y, x)))
    }
}

fn run_unit<T: Scalar, P: Tape<T>>(
    tape: &mut P,
    x: &P::Var,
    unit: &ConvUnit,
    pv: &[P::Var],
    bn: &mut [(String, BnState<T>)],
    mode: Mode,
    relu: bool,
) -> Result<P::Var> {
    let y = tape.conv2d(x, &pv[unit.kernel.0])?;
    let y = tape.batchnorm(&y, &mut bn[unit.bn].1, mode)?;
    if relu {
        tape.relu(&y)
    } else {
        Ok(y)
    }
}

fn run_block<T: Scalar, P: Tape<T>>(
    tape: &mut P,
    x: &P::Var,
    block: &Block,
    pv: &[P::Var],
    bn: &mut [(String, BnState<T>)],
    mode: Mode,
    relu: bool,
) -> Result<P::Var> {
    match block.kind {
        BlockKind::Plain | BlockKind::Residual => {
            let mut h = x.clone();
            for unit in &block.convs {
                h = run_unit(tape, &h, unit, pv, bn, mode, relu)?;
            }
            if block.kind == BlockKind::Plain {
                return Ok(h);
            }
            let short = match block.proj {
                Some(p) => tape.conv2d(x, &pv[p.0])?,
                None => x.clone(),
            };
            tape.add(&h, &short)
        }
        BlockKind::Dense => {
            let mut acc = x.clone();
            let mut out = x.clone();
            for (k, unit) in block.convs.iter().enumerate() {
                out = run_unit(tape, &acc, unit, pv, bn, mode, relu)?;
                if k + 1 < block.convs.len() {
                    acc = tape.concat(&acc, &out)?;
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Eager, Graph};

    fn input(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(Shape::new(2, 1, h, w), |n, _, y, x| ((n * 7 + y * 3 + x * 5) % 13) as f64 / 6.0 - 1.0)
    }

    #[test]
    fn parameter_names_follow_the_layout() {
        let net = UNet::<f32>::build(UNetConfig::default(), 0).unwrap();
        let names: Vec<&str> = net.params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names[0], "enc1.conv1.kernel");
        assert!(names.contains(&"dec2.up.kernel"));
        assert!(names.contains(&"dec1.conv2.kernel"));
        assert_eq!(*names.last().unwrap(), "head.kernel");
        assert_eq!(net.param("dec1.up.kernel").unwrap().value.shape(), Shape::new(16, 32, 1, 1));
        assert_eq!(net.param("dec1.conv1.kernel").unwrap().value.shape(), Shape::new(16, 32, 3, 3));
    }

    #[test]
    fn output_shape_and_probability_sum() {
        for cfg in [
            UNetConfig::new(3, 2),
            UNetConfig::new(1, 2),
            UNetConfig::new(2, 3).with_convs(1).with_relu(false),
            UNetConfig::new(3, 2).with_variant(Variant::SideOutput),
            UNetConfig::new(3, 2).with_variant(Variant::Residual),
            UNetConfig::new(3, 2).with_variant(Variant::Dense),
        ] {
            let mut net = UNet::<f64>::build(cfg, 3).unwrap();
            let mut e = Eager;
            let out = net.forward(&mut e, input(8, 12), Mode::Train).unwrap();
            assert_eq!(out.probs.shape(), Shape::new(2, 2, 8, 12));
            for n in 0..2 {
                for (a, b) in out.probs.plane(n, 0).iter().zip(out.probs.plane(n, 1)) {
                    assert!((a + b - 1.0).abs() < 1e-12);
                }
            }
            let expected_side = if cfg.variant == Variant::SideOutput { cfg.levels - 1 } else { 0 };
            assert_eq!(out.side.len(), expected_side);
            for s in &out.side {
                assert_eq!(s.shape(), Shape::new(2, 2, 8, 12));
            }
        }
    }

    #[test]
    fn indivisible_input_names_divisor() {
        let mut net = UNet::<f32>::build(UNetConfig::new(3, 2), 0).unwrap();
        let err = net.predict(Tensor::zeros(Shape::new(1, 1, 10, 8))).unwrap_err();
        assert!(err.to_string().contains("divisible by 4"), "{err}");
    }

    #[test]
    fn zero_head_gives_half() {
        let mut net = UNet::<f64>::build(UNetConfig::new(2, 4), 9).unwrap();
        net.param_mut("head.kernel").unwrap().value.fill(0.0);
        let p = net.predict(input(8, 8)).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn single_level_is_a_plain_chain() {
        let mut net = UNet::<f64>::build(UNetConfig::new(1, 4), 1).unwrap();
        assert_eq!(net.params().len(), 5);
        let mut g = Graph::new();
        let out = net.forward(&mut g, input(6, 6), Mode::Train).unwrap();
        assert_eq!(g.get(out.probs).shape(), Shape::new(2, 2, 6, 6));
        // 5 params + input + 4×(conv, bn, relu) + head conv + softmax
        assert_eq!(g.len(), 5 + 1 + 12 + 2);
    }

    #[test]
    fn residual_block_with_zero_convs_passes_shortcut() {
        let cfg = UNetConfig::new(1, 2).with_variant(Variant::Residual);
        let mut net = UNet::<f64>::build(cfg, 4).unwrap();
        for p in net.params_mut() {
            if p.name.contains(".conv") {
                p.value.fill(0.0);
            }
        }
        net.param_mut("enc1.proj.kernel").unwrap().value.fill(1.0);
        let block = net.encoder[0].clone();
        let x = input(4, 4);
        let mut e = Eager;
        let pv: Vec<_> =
            net.params.iter().enumerate().map(|(i, p)| Tape::<f64>::param(&mut e, ParamId(i), &p.value)).collect();
        let xv = Tape::<f64>::input(&mut e, x.clone());
        let y = run_block(&mut e, &xv, &block, &pv, &mut net.bn, Mode::Train, true).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 2, 4, 4));
        for c in 0..2 {
            for n in 0..2 {
                assert_eq!(y.plane(n, c), x.plane(n, 0));
            }
        }
    }

    #[test]
    fn infer_forward_is_deterministic() {
        let mut net = UNet::<f32>::build(UNetConfig::new(3, 4), 11).unwrap();
        let x = input(16, 16).cast::<f32>();
        let a = net.predict(x.clone()).unwrap();
        let b = net.predict(x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = UNet::<f32>::build(UNetConfig::default(), 5).unwrap();
        let b = UNet::<f32>::build(UNetConfig::default(), 5).unwrap();
        let c = UNet::<f32>::build(UNetConfig::default(), 6).unwrap();
        assert_eq!(a.params()[3].value, b.params()[3].value);
        assert_ne!(a.params()[3].value, c.params()[3].value);
    }
}
