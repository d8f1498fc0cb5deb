//! Promotion of sparse scribble annotations to dense predicted full
//! annotations (PFAs).
//!
//! Per image, a random forest trained on the scribbled pixels of a
//! filter-bank feature stack gives a local class-probability map. It can be
//! averaged with an externally produced global map, regularized with a
//! weighted-TV Potts model or a fully connected CRF, and rounded to labels.
//! [`eval`] scores the result against ground truth.

pub mod annotation;
pub mod error;
pub mod eval;
pub mod features;
pub mod forest;
pub mod fusion;
pub mod io;
pub mod probmap;
pub mod regularizers;
pub mod synth;
pub mod types;

pub use annotation::{curate_scribbles, labelmap_to_scribbles, scribbles_to_labelmap, Curation};
pub use error::{Error, Result};
pub use eval::{accumulate_confusion, gap_report, miou, ConfusionMatrix, EvalReport, GapReport};
pub use features::{extract_features, load_filter_bank, synthetic_filter_bank, FeatureStack, Filter, FilterBank};
pub use forest::{
    gini_importance, predict_local, select_and_retrain, train_forest, ForestConfig, ImportanceScores, TrainedForest,
};
pub use fusion::{combine, extract_pfa, pfa_variant, PamSource, PfaOutput, Regularizer};
pub use probmap::{labelmap_to_onehot, load_global_probs, load_probability_map, save_probability_map};
pub use regularizers::{
    crf_energy, crf_mean_field, data_energy, edge_weights, potts_map, DenseCrfParams, EnergyReport, PottsParams,
};
pub use types::{
    ClassField, ClassSet, LabelMap, PixelGrid, ProbabilityMap, Provenance, RgbImage, ScribbleSet, SoftMask, UNLABELED,
};
