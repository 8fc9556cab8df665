//! Shared fixtures for the benchmarks.

use ect_core::synth::TrainingSet;
use ect_core::{
    make_training_shapes, sample_scenario, train_pdm, GeneratorSpec, PointDistributionModel,
    Scenario, ScenarioConfig, TrainOptions,
};

pub const TRAINING_SHAPES: usize = 300;

pub fn training_set() -> TrainingSet {
    make_training_shapes(&GeneratorSpec::face68_reference(11), TRAINING_SHAPES)
        .expect("reference generator")
}

pub fn model(set: &TrainingSet) -> PointDistributionModel {
    train_pdm(&set.shapes, &TrainOptions::default()).expect("reference model")
}

pub fn scenario_config(seed: u64, noise: f64, occluded: f64) -> ScenarioConfig {
    ScenarioConfig {
        seed,
        noise_amplitude: noise,
        occluded_fraction: occluded,
        mode_scale: 1.0,
        ..ScenarioConfig::default()
    }
}

pub fn scenario(model: &PointDistributionModel, seed: u64) -> Scenario {
    sample_scenario(model, &scenario_config(seed, 0.3, 0.1)).expect("scenario")
}
