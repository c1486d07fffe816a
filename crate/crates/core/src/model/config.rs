use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Plain,
    Residual,
    Dense,
    SideOutput,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Plain, Variant::Residual, Variant::Dense, Variant::SideOutput];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Residual => "residual",
            Variant::Dense => "dense",
            Variant::SideOutput => "side_output",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "plain" => Ok(Variant::Plain),
            "residual" | "res" => Ok(Variant::Residual),
            "dense" | "den" => Ok(Variant::Dense),
            "side_output" | "side" => Ok(Variant::SideOutput),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected plain, residual, dense or side_output)"
            ))),
        }
    }
}

/// One point of the architecture grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct UNetConfig {
    /// Resolution stages; the deepest one is the bottleneck.
    pub levels: usize,
    /// Channels of the first convolution; doubled at every level.
    pub base_filters: usize,
    /// 3×3 convolutions per block, 1 or 2.
    pub convs_per_level: usize,
    pub relu_enabled: bool,
    pub variant: Variant,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { levels: 3, base_filters: 16, convs_per_level: 2, relu_enabled: true, variant: Variant::Plain }
    }
}

/// Deepest supported U-Net; at 168-pixel patches anything deeper stops
/// dividing evenly anyway.
pub const MAX_LEVELS: usize = 8;

impl UNetConfig {
    pub fn new(levels: usize, base_filters: usize) -> Self {
        UNetConfig { levels, base_filters, ..Default::default() }
    }

    pub fn with_convs(mut self, convs: usize) -> Self {
        self.convs_per_level = convs;
        self
    }

    pub fn with_relu(mut self, on: bool) -> Self {
        self.relu_enabled = on;
        self
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.variant = v;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > MAX_LEVELS {
            return Err(Error::Config(format!("levels must be in 1..={MAX_LEVELS}, got {}", self.levels)));
        }
        if self.base_filters == 0 {
            return Err(Error::Config("base_filters must be >= 1".into()));
        }
        if !matches!(self.convs_per_level, 1 | 2) {
            return Err(Error::Config(format!("convs_per_level must be 1 or 2, got {}", self.convs_per_level)));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Channel width at 1-indexed `level`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_filters << (level - 1)
    }
}
