use crate::data::sampler::AugmentConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Learning-rate factor applied once per epoch.
    pub decay: f64,
    pub lr_floor: f64,
    pub batch_size: usize,
    pub patch: usize,
    pub batches_per_epoch: usize,
    /// Focal exponent γ.
    pub gamma: f64,
    /// ℓ2 coefficient λ.
    pub lambda: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Number of training cases to use; `None` keeps the whole pool.
    pub subset: Option<usize>,
    pub adam: AdamParams,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 5e-5,
            decay: 0.97,
            lr_floor: 1e-6,
            batch_size: 50,
            patch: 168,
            batches_per_epoch: 32,
            gamma: 2.0,
            lambda: 1e-4,
            patience: 20,
            max_epochs: 600,
            seed: 1,
            subset: None,
            adam: AdamParams::default(),
            augment: AugmentConfig::default(),
        }
    }
}

pub const SUBSET_SIZES: [usize; 5] = [1, 2, 4, 8, 16];

impl TrainConfig {
    /// Learning rate during epoch `e` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        (self.lr0 * self.decay.powi(epoch as i32)).max(self.lr_floor)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let pos = [("lr0", self.lr0), ("decay", self.decay), ("lr_floor", self.lr_floor)];
        for (k, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        if self.decay > 1.0 {
            return bad(format!("decay must be <= 1, got {}", self.decay));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) || !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("gamma and lambda must be >= 0 (gamma {}, lambda {})", self.gamma, self.lambda));
        }
        for (k, v) in [
            ("batch_size", self.batch_size),
            ("patch", self.patch),
            ("batches_per_epoch", self.batches_per_epoch),
            ("patience", self.patience),
            ("max_epochs", self.max_epochs),
        ] {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        if let Some(n) = self.subset {
            if n == 0 || n > 16 {
                return bad(format!("training subset size must be in 1..=16, got {n}"));
            }
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad(format!("invalid Adam parameters {a:?}"));
        }
        self.augment.validate()
    }
}
