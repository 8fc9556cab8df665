//! Least-squares similarity registration and generalized Procrustes analysis.

use crate::error::{Error, Result};
use crate::shape::{
    apply_similarity, check_same_n, is_degenerate_norm, Shape, SimilarityTransform,
};

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-10;

/// Similarity transform minimizing `sum ||s R x_i + t - y_i||^2` over `src -> dst`.
///
/// Works on centered point sets treated as complex numbers, so the fitted rotation is
/// always proper (no reflection).
pub fn optimal_similarity(src: &Shape, dst: &Shape) -> Result<SimilarityTransform> {
    check_same_n(src, dst)?;
    let cs = src.centroid();
    let cd = dst.centroid();
    let (mut dot, mut cross, mut norm2) = (0.0, 0.0, 0.0);
    for (p, q) in src.points().zip(dst.points()) {
        let (x, y) = (p[0] - cs[0], p[1] - cs[1]);
        let (u, v) = (q[0] - cd[0], q[1] - cd[1]);
        dot += x * u + y * v;
        cross += x * v - y * u;
        norm2 += x * x + y * y;
    }
    if is_degenerate_norm(norm2.sqrt(), src) {
        return Err(Error::AlignmentDegenerate(
            "source landmarks coincide".to_string(),
        ));
    }
    let scale = dot.hypot(cross) / norm2;
    if !(scale > 0.0) {
        return Err(Error::AlignmentDegenerate(
            "target landmarks coincide".to_string(),
        ));
    }
    let angle = cross.atan2(dot);
    let (sin, cos) = angle.sin_cos();
    let tx = cd[0] - scale * (cos * cs[0] - sin * cs[1]);
    let ty = cd[1] - scale * (sin * cs[0] + cos * cs[1]);
    SimilarityTransform::new(scale, angle, [tx, ty])
}

/// Output of [`procrustes_align`].
#[derive(Clone, Debug)]
pub struct ProcrustesResult {
    /// Each input registered onto `mean`.
    pub aligned: Vec<Shape>,
    /// Centered, unit Frobenius norm mean shape.
    pub mean: Shape,
    pub iterations: usize,
    pub converged: bool,
}

/// Generalized Procrustes analysis.
///
/// The mean starts as the normalized first shape. Each round registers every shape onto
/// the current mean, averages, re-centers and rescales to unit norm, and rotates the new
/// mean back onto the first estimate so the frame cannot drift.
pub fn procrustes_align(shapes: &[Shape], max_iters: usize, tol: f64) -> Result<ProcrustesResult> {
    if shapes.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "procrustes needs at least 2 shapes, got {}",
            shapes.len()
        )));
    }
    let n = shapes[0].n();
    for s in shapes {
        if s.n() != n {
            return Err(Error::LandmarkCountMismatch {
                expected: n,
                found: s.n(),
            });
        }
    }

    let reference = shapes[0].normalized()?;
    let mut mean = reference.clone();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let aligned = align_all(shapes, &mean)?;
        let mut sum = vec![0.0; 2 * n];
        for s in &aligned {
            for (acc, c) in sum.iter_mut().zip(s.coords()) {
                *acc += c;
            }
        }
        let avg = Shape::new(sum.into_iter().map(|c| c / shapes.len() as f64).collect())?;
        let avg = avg.normalized()?;
        let t = optimal_similarity(&avg, &reference)?;
        let next = apply_similarity(&t, &avg)?.normalized()?;
        let change = next
            .coords()
            .iter()
            .zip(mean.coords())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        mean = next;
        if change < tol {
            converged = true;
            break;
        }
    }

    let aligned = align_all(shapes, &mean)?;
    Ok(ProcrustesResult {
        aligned,
        mean,
        iterations,
        converged,
    })
}

fn align_all(shapes: &[Shape], target: &Shape) -> Result<Vec<Shape>> {
    shapes
        .iter()
        .map(|s| apply_similarity(&optimal_similarity(s, target)?, s))
        .collect()
}
