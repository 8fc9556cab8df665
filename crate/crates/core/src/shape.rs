//! Landmark shapes and 2D similarity transforms.

use nalgebra::{DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum landmark count for a valid shape.
pub const MIN_LANDMARKS: usize = 3;

/// A set of `n` 2D landmarks stored as interleaved `(x1, y1, ..., xn, yn)` pixel coordinates.
///
/// `x` is the column and `y` the row of a response map; pixel centers sit on integer
/// coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Shape {
    coords: Vec<f64>,
}

impl Shape {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if !coords.len().is_multiple_of(2) {
            return Err(Error::InvalidShape(format!(
                "coordinate count {} is odd",
                coords.len()
            )));
        }
        if coords.len() / 2 < MIN_LANDMARKS {
            return Err(Error::InvalidShape(format!(
                "{} landmarks, need at least {MIN_LANDMARKS}",
                coords.len() / 2
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("shape coordinates"));
        }
        Ok(Shape { coords })
    }

    pub fn from_points(points: &[[f64; 2]]) -> Result<Self> {
        Shape::new(points.iter().flat_map(|p| [p[0], p[1]]).collect())
    }

    pub fn from_vector(v: &DVector<f64>) -> Result<Self> {
        Shape::new(v.iter().copied().collect())
    }

    /// Number of landmarks.
    pub fn n(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        [self.coords[2 * i], self.coords[2 * i + 1]]
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = [f64; 2]> + '_ {
        self.coords.chunks_exact(2).map(|c| [c[0], c[1]])
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.coords)
    }

    pub fn centroid(&self) -> [f64; 2] {
        let n = self.n() as f64;
        let (sx, sy) = self
            .points()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
        [sx / n, sy / n]
    }

    /// Frobenius norm of the coordinates about the centroid.
    pub fn centered_norm(&self) -> f64 {
        let c = self.centroid();
        self.points()
            .map(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Shape {
        let coords = self
            .coords
            .chunks_exact(2)
            .flat_map(|c| [c[0] + dx, c[1] + dy])
            .collect();
        Shape { coords }
    }

    /// Copy centered at the origin with unit Frobenius norm.
    pub fn normalized(&self) -> Result<Shape> {
        let c = self.centroid();
        let norm = self.centered_norm();
        if is_degenerate_norm(norm, self) {
            return Err(Error::AlignmentDegenerate(
                "all landmarks coincide".to_string(),
            ));
        }
        let coords = self
            .coords
            .chunks_exact(2)
            .flat_map(|p| [(p[0] - c[0]) / norm, (p[1] - c[1]) / norm])
            .collect();
        Ok(Shape { coords })
    }

    /// Per-landmark Euclidean distances to `other`.
    pub fn landmark_errors(&self, other: &Shape) -> Result<Vec<f64>> {
        check_same_n(self, other)?;
        Ok(self
            .points()
            .zip(other.points())
            .map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]))
            .collect())
    }

    /// Mean per-landmark Euclidean distance to `other`, in pixels.
    pub fn mean_landmark_error(&self, other: &Shape) -> Result<f64> {
        let errs = self.landmark_errors(other)?;
        Ok(errs.iter().sum::<f64>() / errs.len() as f64)
    }
}

impl TryFrom<Vec<f64>> for Shape {
    type Error = Error;

    fn try_from(coords: Vec<f64>) -> Result<Self> {
        Shape::new(coords)
    }
}

impl From<Shape> for Vec<f64> {
    fn from(s: Shape) -> Self {
        s.coords
    }
}

pub(crate) fn check_same_n(a: &Shape, b: &Shape) -> Result<()> {
    if a.n() != b.n() {
        return Err(Error::LandmarkCountMismatch {
            expected: a.n(),
            found: b.n(),
        });
    }
    Ok(())
}

pub(crate) fn is_degenerate_norm(norm: f64, shape: &Shape) -> bool {
    let magnitude = shape.coords.iter().fold(1.0_f64, |m, c| m.max(c.abs()));
    norm <= 1e-12 * magnitude * (shape.n() as f64).sqrt()
}

/// Uniform scale, rotation and translation: `x -> scale * R(angle) * x + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    scale: f64,
    angle: f64,
    translation: [f64; 2],
}

impl SimilarityTransform {
    pub fn new(scale: f64, angle: f64, translation: [f64; 2]) -> Result<Self> {
        if !(scale.is_finite() && angle.is_finite() && translation.iter().all(|t| t.is_finite())) {
            return Err(Error::NonFinite("similarity transform"));
        }
        if scale <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "similarity scale must be positive, got {scale}"
            )));
        }
        Ok(SimilarityTransform {
            scale,
            angle,
            translation,
        })
    }

    pub fn identity() -> Self {
        SimilarityTransform {
            scale: 1.0,
            angle: 0.0,
            translation: [0.0, 0.0],
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn translation(&self) -> [f64; 2] {
        self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix2<f64> {
        let (s, c) = self.angle.sin_cos();
        Matrix2::new(c, -s, s, c)
    }

    pub fn apply_point(&self, p: [f64; 2]) -> [f64; 2] {
        let q = self.scale * (self.rotation_matrix() * Vector2::new(p[0], p[1]));
        [q.x + self.translation[0], q.y + self.translation[1]]
    }

    pub fn inverse(&self) -> Self {
        let inv_scale = 1.0 / self.scale;
        let rt = self.rotation_matrix().transpose();
        let t = -inv_scale * (rt * Vector2::new(self.translation[0], self.translation[1]));
        SimilarityTransform {
            scale: inv_scale,
            angle: -self.angle,
            translation: [t.x, t.y],
        }
    }
}

/// Maps every landmark of `shape` through `t`.
pub fn apply_similarity(t: &SimilarityTransform, shape: &Shape) -> Result<Shape> {
    let coords: Vec<f64> = shape.points().flat_map(|p| t.apply_point(p)).collect();
    if coords.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("transformed shape"));
    }
    Ok(Shape { coords })
}
