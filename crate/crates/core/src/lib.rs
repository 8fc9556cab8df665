//! Deformable shape fitting with the Estimation-Correction-Tuning pipeline.
//!
//! Given one response map per landmark and a trained [`PointDistributionModel`],
//! [`fit`] decodes map peaks, projects them onto the model with per-landmark
//! confidences, and refines the result with weighted regularized mean-shift.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod doc;
pub mod error;
pub mod fitter;
pub mod metrics;
pub mod pdm;
pub mod procrustes;
pub mod pts;
pub mod response;
pub mod shape;
pub mod synth;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use fitter::{fit, FitConfig, FitResult, Weighting};
pub use metrics::{EvalItem, EvalOptions, EvalReport};
pub use pdm::{
    generate_shape, project_shape, train_pdm, PdmParams, PointDistributionModel, TrainOptions,
};
pub use response::{ResponseMap, ResponseStack};
pub use shape::{Shape, SimilarityTransform};
pub use synth::{make_training_shapes, sample_scenario, GeneratorSpec, Scenario, ScenarioConfig};
