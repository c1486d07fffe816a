//! Fundus image ingestion, preprocessing, patch sampling and synthetic data.

pub mod clahe;
pub mod dataset;
pub mod image;
pub mod morphology;
pub mod preprocess;
pub mod sampler;
pub mod synth;

pub use dataset::{load_dataset, split, Dataset, DatasetSplit, Manifest, PrepConfig, Sample};
pub use image::Image8;
pub use sampler::{sample_batch, AugmentConfig, Batch, PatchSampler};
pub use synth::{synth_dataset, SyntheticConfig};
