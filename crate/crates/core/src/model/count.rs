//! Exact parameter accounting.
//!
//! The plain family has the closed form `P(L, f) = Q(L)·f² + 27·f`, where the
//! linear term is the 1-channel input convolution (9f) plus the 3×3 two-class
//! head (18f), and `Q(L)` collects every channel-to-channel kernel.

use crate::model::config::{UNetConfig, Variant};
use crate::model::unet::kernel_layout;

/// Quadratic coefficient for two convolutions per block.
pub fn quadratic_coefficient(levels: usize) -> usize {
    assert!(levels >= 1);
    if levels == 1 {
        return 27;
    }
    let enc: usize = (2..=levels).map(|i| 27 * (1 << (2 * i - 3))).sum();
    let dec: usize = (1..levels).map(|j| (1 << (2 * j - 1)) + 27 * (1 << (2 * (j - 1)))).sum();
    9 + enc + dec
}

/// Quadratic coefficient for one convolution per block.
pub fn quadratic_coefficient_single(levels: usize) -> usize {
    assert!(levels >= 1);
    if levels == 1 {
        return 9;
    }
    let enc: usize = (2..=levels).map(|i| 9 * (1 << (2 * i - 3))).sum();
    let dec: usize = (1..levels).map(|j| (1 << (2 * j - 1)) + 18 * (1 << (2 * (j - 1)))).sum();
    enc + dec
}

/// Number of trainable scalars of the network `cfg` describes.
///
/// Plain and side-output variants use the closed form; residual and dense
/// variants are summed over their kernel layout.
pub fn count_params(cfg: &UNetConfig) -> usize {
    let f = cfg.base_filters;
    let q = match cfg.convs_per_level {
        1 => quadratic_coefficient_single(cfg.levels),
        _ => quadratic_coefficient(cfg.levels),
    };
    let plain = q * f * f + 27 * f;
    match cfg.variant {
        Variant::Plain => plain,
        // one 1×1 (c_j -> 2) head per decoder level
        Variant::SideOutput => plain + 2 * f * ((1 << (cfg.levels - 1)) - 1),
        Variant::Residual | Variant::Dense => kernel_layout(cfg).iter().map(|(_, s)| s.numel()).sum(),
    }
}
