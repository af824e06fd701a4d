//! Confidence-based model selection under subpopulation shift.
//!
//! Temperature calibration with ECE matching, clustering of inputs, per-cluster routing to the
//! most confident base model, synthetic shift benchmarks and mixture evaluation.

pub mod benchgen;
pub mod calibration;
pub mod clustering;
pub mod confidence;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod rng;
pub mod selection;

pub use calibration::{
    calibrate_models, compute_ece, grid_search_temperature, match_calibration_targets,
    CalibrationProfile, EceBreakdown, ModelCalibration, TemperatureGrid, TemperatureSearch,
    DEFAULT_BINS,
};
pub use clustering::{
    adjusted_rand_index, build_features, choose_k, kmeans, ClusterAssignment, ClusterConfig,
    FeatureSource,
};
pub use confidence::{calibrated_probabilities, confidence_table, predictive_entropy, ConfidenceTable};
pub use data::{
    load_dataset, DatasetManifest, EmbeddingMatrix, GroupVector, LabelVector, LinearHead,
    LogitMatrix, MatrixFormat, NamedLogits, ValidatedDataset,
};
pub use error::{Error, Result};
pub use selection::{
    ensemble_logits, ensemble_weights, select, select_cluster, select_input_dep, select_single,
    tune_by_frequency, SelectOptions, SelectionMode, SelectionResult,
};
pub use evaluation::{
    ablate, build_mixture, run_suite, score, AblationRow, EvalReport, MethodSummary, SuiteConfig,
};
