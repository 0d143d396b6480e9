//! Joint mixed-precision quantization and group pruning through a single
//! shared weight tensor.
//!
//! Quantized codes of higher bitwidths are built from lower ones by adding
//! quantized residuals. Binary gates on those residuals pick the bitwidth,
//! gates on filter groups prune, and both are trained through a
//! straight-through estimator against `CE + lambda * ln(BOPs)`.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod compression;
pub mod costmodel;
pub mod data;
pub mod decomposition;
pub mod error;
pub mod gates;
pub mod model;
pub mod optim;
pub mod quantizer;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use compression::{CompressionConfig, LayerConfig, FULL_PRECISION_BITS};
pub use costmodel::{discrete_cost, search_space_size, CostOptions, CostReport, LayerSpec};
pub use data::{gaussian_blobs, BlobsConfig, Dataset};
pub use error::{Error, Result};
pub use gates::GateThresholds;
pub use model::{Mlp, Mode, ModelConfig};
pub use quantizer::{BitLadder, QuantInterval};
pub use tensor::Tensor;
pub use trainer::{MetricsTrace, SearchRunConfig};
