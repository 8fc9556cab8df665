//! Hand-built models for unit tests.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pdm::{similarity_basis, PointDistributionModel};
use crate::shape::Shape;

/// A model with the given mean and `eigenvalues.len()` random orthonormal components.
pub fn model_with_mean(mean: Shape, eigenvalues: &[f64], seed: u64) -> PointDistributionModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centered = mean.translated(-mean.centroid()[0], -mean.centroid()[1]);
    let sim = similarity_basis(&centered.to_vector());
    let dim = 2 * mean.n();
    let mut comps = DMatrix::zeros(dim, eigenvalues.len());
    for j in 0..eigenvalues.len() {
        let mut v = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        for _ in 0..2 {
            v -= &sim * (sim.transpose() * &v);
            for i in 0..j {
                let c = comps.column(i);
                v -= c * c.dot(&v);
            }
        }
        v /= v.norm();
        comps.set_column(j, &v);
    }
    PointDistributionModel::from_parts(
        mean,
        sim,
        comps,
        DVector::from_column_slice(eigenvalues),
        1.0,
    )
    .unwrap()
}

/// Irregular `n`-gon of roughly `radius` pixels around `center`.
pub fn blob(n: usize, radius: f64, center: [f64; 2]) -> Shape {
    let pts: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let a = i as f64 / n as f64 * std::f64::consts::TAU;
            let r = radius * (1.0 + 0.25 * (3.0 * a).sin() + 0.1 * (2.0 * a).cos());
            [center[0] + r * a.cos(), center[1] + r * a.sin()]
        })
        .collect();
    Shape::from_points(&pts).unwrap()
}
