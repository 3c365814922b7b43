//! Post-hoc committee building over pre-computed model predictions.
//!
//! A [`ModelPool`] holds logits of several models on one labeled evaluation
//! set together with a per-example cost for each model. From it the crate
//! evaluates ensembles (mean of logits or probabilities), simulates
//! confidence-gated cascades with early exit, searches exit thresholds and
//! model combinations under average-cost, accuracy and worst-case-cost
//! constraints, and extends cascades to per-pixel (dense) prediction with
//! grid-cell routing.
//!
//! ```
//! use committee::{evaluate_cascade, CascadeSpec, LabeledDataset, ModelPool, PredictionSet};
//!
//! let a = PredictionSet::new("a", "small", vec![2.0, 0.0, 0.1, 0.0, 0.0, 1.0], 2, 1.0).unwrap();
//! let b = PredictionSet::new("b", "large", vec![0.0, 0.0, 3.0, 0.0, 0.0, 0.0], 2, 4.0).unwrap();
//! let pool = ModelPool::new(vec![a, b], LabeledDataset::new(vec![0, 0, 1])).unwrap();
//!
//! let spec = CascadeSpec::new(["a", "b"], vec![0.6]);
//! let eval = evaluate_cascade(&spec, &pool).unwrap();
//! assert_eq!(eval.accuracy, 1.0);
//! assert!((eval.avg_cost - 7.0 / 3.0).abs() < 1e-12);
//! ```

pub mod cascade;
pub mod confidence;
pub mod dense;
mod error;
mod par;
pub mod selection;
pub mod store;
pub mod thresholds;

pub use cascade::{
    cost_from_exit_ratios, evaluate_cascade, evaluate_ensemble, AggregationMode, CascadeEvaluation,
    CascadeReport, CascadeSpec, StagedPredictions,
};
pub use confidence::{
    confidence, selective_accuracy, softmax, ConfidenceMetric, SelectiveAccuracyCurve,
};
pub use dense::{
    dense_confidence, evaluate_dense_cascade, miou, CellSize, DenseCascadeSpec, DenseEvaluation,
    DenseLabelSet, DensePool, DensePredictionSet,
};
pub use error::{Error, Result};
pub use selection::{
    assemble_self_cascade, enumerate_candidates, pareto_frontier, search_frontier, select_cascade,
    Objective, OrderPolicy, ParetoFrontier, SelectionProblem,
};
pub use store::{
    generate_synthetic_pool, load_pool, save_pool, split_dataset, LabeledDataset, ModelPool,
    PoolManifest, PredictionSet, SynthConfig,
};
pub use thresholds::{
    build_threshold_grid, search_thresholds, threshold_sweep, ThresholdGrid, ThresholdTarget,
};
