//! Dimension-wise sparsity allocation for one-shot pruning.
//!
//! Each output row of a layer gets its own sparsity level. Rows whose
//! outputs degrade most under pruning are given a lower sparsity, rows that
//! tolerate it a higher one, while the layer's mean sparsity stays at its
//! budget. The core is generic over `f32`/`f64` via [`Scalar`].

pub mod allocation;
pub mod budget;
pub mod diagnostics;
pub mod error;
pub mod masking;
pub mod optimizer;
pub mod pipeline;
pub mod quality;
pub mod scalar;
pub mod scoring;
pub mod tensor;

pub use allocation::{AllocationMethod, LayerAllocation, LayerBudget, OwlParams};
pub use error::{Result, TrimError};
pub use masking::{ComparisonGroup, PruneMask, SparsityVector};
pub use optimizer::{lr_search, trim_adjust, TrimConfig, TrimResult};
pub use quality::{DimMetric, LayerMetric};
pub use scalar::Scalar;
pub use scoring::{ScoreMatrix, ScoreMetric};
pub use tensor::{DetRng, Matrix, Seed, TensorContainer};

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
/// `D × N` layer weights.
pub type WeightMatrix = Matrix<f32>;
/// `N × L` layer inputs, one calibration sample per column.
pub type ActivationBatch = Matrix<f32>;
pub type ScoreMatrix32 = ScoreMatrix<f32>;
pub type ToyModel32 = pipeline::ToyModel<f32>;
pub type ToyModel64 = pipeline::ToyModel<f64>;
