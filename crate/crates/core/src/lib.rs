//! Deformable-convolution U-Nets for semantic segmentation of fisheye road
//! scenes, built on a small dense-tensor autograd engine.
//!
//! Layout:
//! - [`tensor`], [`autograd`]: tensors and the reverse-mode computation record
//! - [`deform`]: deformable and modulated-deformable convolution
//! - [`blocks`], [`models`]: conv/residual blocks and the four U-Net variants
//! - [`losses`], [`metrics`]: training losses and confusion-matrix metrics
//! - [`data`]: fisheye dataset loading, augmentation and synthetic scenes
//! - [`train`]: optimizer, schedule, training loop, checkpoints and reports

pub mod autograd;
pub mod blocks;
pub mod data;
pub mod deform;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod params;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use data::{SegmentationSample, SplitRatios};
pub use losses::{ClassWeights, LossKind};
pub use metrics::ConfusionMatrix;
pub use models::{ModelConfig, UNet, Variant};
pub use train::TrainConfig;
pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
