//! Optimal transport maps between 2-D densities from a single Gaussian-basis
//! convex potential, and the linear optimal transport (LOT) embedding built
//! on top of them.

pub mod classify;
pub mod error;
pub mod grid;
pub mod io;
pub mod lot;
pub mod metrics;
pub mod potential;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{gaussian_pyramid, DensityGrid, Domain, GridGeometry, VectorFieldGrid};
pub use potential::{
    basis_derivatives, BasisDerivatives, BasisLayer, JacobianGrid, PotentialField, Pushforward,
};
pub use metrics::{map_mean_abs_curl, mass_transported, mean_abs_curl, relative_mse, MetricsReport};
pub use solver::{
    analytic_gradient, objective, objective_terms, solve_multiscale, solve_single_scale, AdamState, SolveReport,
    SolverConfig, StopReason,
};
pub use lot::{
    forward_lot, forward_lot_with_report, inverse_lot, lot_distance, predict_composition,
    predict_scaling, predict_scaling_about, predict_translation, LotEmbedding,
};
pub use synth::{
    gen_gaussian_class, reference_gaussian, reference_uniform, ImageMeta, LabeledDataset,
    SynthConfig,
};
pub use classify::{
    crossval_accuracy, crossval_many, linsvm_fit, logreg_fit, pca_fit_transform, plda_fit,
    ClassifierKind, CvResult, FeatureKind, FeatureMatrix, FoldPlan, LinearModel, Pca, Plda,
    Preprocess,
};
