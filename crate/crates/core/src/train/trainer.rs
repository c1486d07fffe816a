//! The training loop: sampled patch batches, Adam, per-epoch validation on
//! whole images, learning-rate decay and early stopping.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::mpsc::sync_channel;
use std::sync::Arc;

use crate::data::dataset::Sample;
use crate::data::sampler::{Batch, PatchSampler};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Tape};
use crate::model::UNet;
use crate::tensor::{Scalar, Shape, Tensor};
use crate::train::adam::AdamState;
use crate::train::config::TrainConfig;
use crate::train::loss::{focal_forward, l2_penalty, LossTarget};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean focal loss of the main output over the epoch's batches.
    pub train_loss: f64,
    /// Focal loss pooled over all validation FOV pixels.
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
    Diverged { epoch: usize, step: usize, loss: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    pub stop: StopReason,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{:.8},{:.8},{:.6e}", r.epoch, r.train_loss, r.val_loss, r.lr);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn diverged(&self) -> bool {
        matches!(self.stop, StopReason::Diverged { .. })
    }
}

/// Best validation loss seen so far and the weights that produced it.
#[derive(Debug, Clone)]
pub struct EarlyStopState<T> {
    pub best_loss: f64,
    pub best_epoch: Option<usize>,
    pub best: Option<UNet<T>>,
    pub since_improvement: usize,
}

impl<T: Scalar> EarlyStopState<T> {
    pub fn new() -> Self {
        EarlyStopState { best_loss: f64::INFINITY, best_epoch: None, best: None, since_improvement: 0 }
    }

    /// Record an epoch's validation loss; true once patience is exhausted.
    pub fn update(&mut self, epoch: usize, val_loss: f64, net: &UNet<T>, patience: usize) -> bool {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = Some(epoch);
            self.best = Some(net.clone());
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        self.since_improvement >= patience
    }
}

impl<T: Scalar> Default for EarlyStopState<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn target<T: Scalar>(
    label: &Tensor<f32>,
    weights: &Tensor<f32>,
    mask: &Tensor<f32>,
    gamma: f64,
) -> Result<LossTarget<T>> {
    LossTarget::new(label.cast(), weights.cast(), mask.cast(), gamma)
}

/// One optimizer step on `batch`. Returns the main-output focal loss before
/// the update; the optimized objective also includes side-output losses and
/// the weight penalty.
pub fn train_step<T: Scalar>(
    net: &mut UNet<T>,
    adam: &mut AdamState<T>,
    batch: &Batch,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::lean();
    let out = net.forward(&mut g, batch.image.cast(), Mode::Train)?;
    let tgt = Arc::new(target::<T>(&batch.label, &batch.weights, &batch.mask, cfg.gamma)?);
    let main = g.focal_loss(out.probs, tgt.clone())?;
    let main_value = g.get(main).data()[0].f64();
    let mut total = main;
    for s in &out.side {
        let l = g.focal_loss(*s, tgt.clone())?;
        total = g.add(&total, &l)?;
    }
    if cfg.lambda > 0.0 {
        if let Some(p) = l2_penalty(&mut g, &out.kernels, cfg.lambda) {
            total = g.add(&total, &p)?;
        }
    }
    let total_value = g.get(total).data()[0].f64();
    if !main_value.is_finite() || !total_value.is_finite() {
        return Ok(f64::NAN);
    }
    g.backward(total)?;
    net.zero_grad();
    for (id, grad) in g.param_grads() {
        net.params_mut()[id.0].grad.add_assign(grad)?;
    }
    if net.params().iter().any(|p| !p.grad.all_finite()) {
        return Ok(f64::NAN);
    }
    adam.step(net.params_mut(), lr);
    Ok(main_value)
}

/// Whole-image input tensor `[1, 1, h, w]`.
pub fn image_tensor<T: Scalar>(s: &Sample) -> Tensor<T> {
    Tensor::from_vec(Shape::new(1, 1, s.height, s.width), s.image.iter().map(|&v| T::c(v as f64)).collect())
        .expect("sample dimensions")
}

fn map_tensor<T: Scalar>(s: &Sample, f: impl Fn(usize) -> f64) -> Tensor<T> {
    Tensor::from_vec(Shape::new(1, 1, s.height, s.width), (0..s.pixels()).map(|i| T::c(f(i))).collect())
        .expect("sample dimensions")
}

/// Focal loss pooled over the (uneroded) FOV pixels of whole images.
pub fn validation_loss<T: Scalar>(net: &mut UNet<T>, samples: &[&Sample], gamma: f64) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for s in samples {
        let probs = net.infer_padded(image_tensor(s))?;
        let tgt = LossTarget::new(
            map_tensor(s, |i| s.label[i] as u8 as f64),
            map_tensor(s, |i| s.weights[i] as f64),
            map_tensor(s, |i| s.fov[i] as u8 as f64),
            gamma,
        )?;
        let l = focal_forward(&probs, &tgt)?.f64();
        sum += l * tgt.active_pixels() as f64;
        count += tgt.active_pixels();
    }
    if count == 0 {
        return Err(Error::Data("no validation pixels".into()));
    }
    Ok(sum / count as f64)
}

/// Train `net` in place and leave it holding the best-validation weights.
///
/// A non-finite loss or gradient ends training with
/// [`StopReason::Diverged`]; the history up to that point is returned and the
/// best snapshot (if any epoch completed) is restored.
pub fn train<T: Scalar>(
    net: &mut UNet<T>,
    train_set: &[&Sample],
    val_set: &[&Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if val_set.is_empty() {
        return Err(Error::Config("training needs at least one validation case".into()));
    }
    let d = net.config().divisor();
    if !cfg.patch.is_multiple_of(d) {
        return Err(Error::Config(format!(
            "patch {} is not divisible by {d} (2^(levels-1) for {} levels)",
            cfg.patch,
            net.config().levels
        )));
    }
    let sampler = PatchSampler::new(train_set.to_vec(), cfg.patch)?;
    let mut adam = AdamState::new(net.params(), cfg.adam);
    let mut early = EarlyStopState::new();
    let mut records = Vec::new();
    let bpe = cfg.batches_per_epoch;
    let total_batches = (cfg.max_epochs * bpe) as u64;

    let stop = std::thread::scope(|scope| -> Result<StopReason> {
        // batches are produced ahead of the optimizer but consumed in order
        let (tx, rx) = sync_channel::<Batch>(2);
        let sampler = &sampler;
        scope.spawn(move || {
            for i in 0..total_batches {
                if tx.send(sampler.batch(cfg.batch_size, &cfg.augment, cfg.seed, i)).is_err() {
                    break;
                }
            }
        });
        let result = (|| {
            for epoch in 0..cfg.max_epochs {
                let lr = cfg.lr_at(epoch);
                let mut acc = 0.0;
                for step in 0..bpe {
                    let batch = rx.recv().map_err(|_| Error::Graph("batch producer stopped".into()))?;
                    let loss = train_step(net, &mut adam, &batch, cfg, lr)?;
                    if !loss.is_finite() {
                        return Ok(StopReason::Diverged { epoch, step, loss });
                    }
                    acc += loss;
                }
                let val_loss = validation_loss(net, val_set, cfg.gamma)?;
                let rec = EpochRecord { epoch, train_loss: acc / bpe as f64, val_loss, lr };
                records.push(rec);
                on_epoch(&rec);
                log::debug!("epoch {epoch}: train {:.5} val {val_loss:.5} lr {lr:.3e}", rec.train_loss);
                if !val_loss.is_finite() {
                    return Ok(StopReason::Diverged { epoch, step: bpe, loss: val_loss });
                }
                if early.update(epoch, val_loss, net, cfg.patience) {
                    return Ok(StopReason::Patience);
                }
            }
            Ok(StopReason::MaxEpochs)
        })();
        drop(rx);
        result
    })?;

    if let Some(best) = early.best.take() {
        *net = best;
    }
    Ok(History { records, best_epoch: early.best_epoch, best_val_loss: early.best_loss, stop })
}
