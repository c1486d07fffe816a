//! Network construction, parameter accounting and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod count;
pub mod unet;

pub use config::{UNetConfig, Variant};
pub use count::count_params;
pub use unet::{Output, UNet};
