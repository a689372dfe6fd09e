//! End-to-end pruning of toy multi-layer models: activation capture,
//! gradient capture, layer-ordered pruning with optional input
//! recalculation, and holdout evaluation.

pub mod calib;
pub mod grad;
pub mod model;
pub mod run;

pub use calib::{CalibrationSet, CalibrationSource, DEFAULT_CALIB_SAMPLES};
pub use grad::{capture_gradients, loss_and_gradients, loss_and_gradients_with, train_regressor, GradientLoss};
pub use model::{sidecar_path, Activation, Layer, ToyModel};
pub use run::{
    capture_activations, evaluate_models, evaluate_run, prune_model, score_layers, EvalReport, LayerRecord,
    LayerReport, PruneConfig, PruneRun, RunReport, REPORT_SCHEMA_VERSION,
};
