//! Point Distribution Model: training, linear shape generation and the shape prior.
//!
//! The model is the compact linear form `s = mean + S p`, where the first four columns
//! of `S` are orthonormalized similarity directions of the mean shape (scale/rotation
//! pair and the two translations) and the remaining `m` columns are PCA components of
//! the similarity-free shape residuals. `p` accordingly holds four similarity
//! coefficients followed by the non-rigid parameters `q`.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::doc::to_precise_json;
use crate::error::{Error, Result};
use crate::procrustes::{optimal_similarity, procrustes_align, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::shape::{apply_similarity, Shape, SimilarityTransform};

/// Number of similarity coefficients at the front of every parameter vector.
pub const SIMILARITY_DIM: usize = 4;

pub const DEFAULT_VARIANCE_RETAINED: f64 = 0.95;

/// Columns of `S` must be orthonormal to this tolerance.
pub const ORTHONORMALITY_TOL: f64 = 1e-8;

const MODEL_FORMAT: &str = "ect-pdm";
const MODEL_VERSION: u64 = 1;

/// How many PCA components to keep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentSelection {
    /// Smallest count whose eigenvalues cover at least this fraction of the residual variance.
    VarianceRetained(f64),
    /// Exact count, capped at the numerical rank of the data.
    Count(usize),
}

impl Default for ComponentSelection {
    fn default() -> Self {
        ComponentSelection::VarianceRetained(DEFAULT_VARIANCE_RETAINED)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub selection: ComponentSelection,
    pub procrustes_max_iters: usize,
    pub procrustes_tol: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            selection: ComponentSelection::default(),
            procrustes_max_iters: DEFAULT_MAX_ITERS,
            procrustes_tol: DEFAULT_TOL,
        }
    }
}

/// PDM parameter vector: `[p*_1..p*_4, q_1..q_m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PdmParams(DVector<f64>);

impl PdmParams {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("PDM parameters"));
        }
        Ok(PdmParams(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        PdmParams::new(DVector::from_column_slice(values))
    }

    pub fn zeros(len: usize) -> Self {
        PdmParams(DVector::zeros(len))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    pub fn similarity(&self) -> &[f64] {
        &self.0.as_slice()[..SIMILARITY_DIM.min(self.0.len())]
    }

    pub fn nonrigid(&self) -> &[f64] {
        &self.0.as_slice()[SIMILARITY_DIM.min(self.0.len())..]
    }
}

/// Trained linear shape model. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct PointDistributionModel {
    mean: Shape,
    similarity: DMatrix<f64>,
    components: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    basis: DMatrix<f64>,
    retained_variance: f64,
}

impl PointDistributionModel {
    /// Assembles a model from its parts, checking every structural invariant.
    pub fn from_parts(
        mean: Shape,
        similarity: DMatrix<f64>,
        components: DMatrix<f64>,
        eigenvalues: DVector<f64>,
        retained_variance: f64,
    ) -> Result<Self> {
        let dim = 2 * mean.n();
        let m = eigenvalues.len();
        if similarity.shape() != (dim, SIMILARITY_DIM) {
            return Err(Error::DimensionMismatch {
                expected: dim * SIMILARITY_DIM,
                found: similarity.len(),
            });
        }
        if components.shape() != (dim, m) {
            return Err(Error::DimensionMismatch {
                expected: dim * m,
                found: components.len(),
            });
        }
        if m + SIMILARITY_DIM > dim {
            return Err(Error::InvalidConfig(format!(
                "{m} components exceed the {} available non-rigid dimensions",
                dim - SIMILARITY_DIM
            )));
        }
        if similarity
            .iter()
            .chain(components.iter())
            .chain(eigenvalues.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("PDM"));
        }
        if eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(Error::InvalidConfig("eigenvalues must be positive".into()));
        }
        if eigenvalues.as_slice().windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidConfig(
                "eigenvalues must be sorted descending".into(),
            ));
        }
        let mut basis = DMatrix::zeros(dim, SIMILARITY_DIM + m);
        basis.columns_mut(0, SIMILARITY_DIM).copy_from(&similarity);
        basis.columns_mut(SIMILARITY_DIM, m).copy_from(&components);
        let gram_err = (basis.transpose() * &basis
            - DMatrix::identity(SIMILARITY_DIM + m, SIMILARITY_DIM + m))
        .amax();
        if gram_err > ORTHONORMALITY_TOL {
            return Err(Error::InvalidConfig(format!(
                "basis is not orthonormal (max deviation {gram_err:e})"
            )));
        }
        Ok(PointDistributionModel {
            mean,
            similarity,
            components,
            eigenvalues,
            basis,
            retained_variance,
        })
    }

    /// Landmark count.
    pub fn n(&self) -> usize {
        self.mean.n()
    }

    /// Number of non-rigid components.
    pub fn m(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Length of a parameter vector, `4 + m`.
    pub fn param_len(&self) -> usize {
        SIMILARITY_DIM + self.m()
    }

    pub fn mean_shape(&self) -> &Shape {
        &self.mean
    }

    pub fn similarity_bases(&self) -> &DMatrix<f64> {
        &self.similarity
    }

    pub fn components(&self) -> &DMatrix<f64> {
        &self.components
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Combined basis `S = [similarity | components]`.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Fraction of the similarity-free training variance captured by the kept components.
    pub fn retained_variance(&self) -> f64 {
        self.retained_variance
    }

    /// Diagonal of the pseudo-inverse prior precision: zeros for the similarity
    /// coefficients, `1/lambda_j` for the non-rigid ones.
    pub fn inverse_prior_diagonal(&self) -> DVector<f64> {
        DVector::from_fn(self.param_len(), |k, _| {
            if k < SIMILARITY_DIM {
                0.0
            } else {
                1.0 / self.eigenvalues[k - SIMILARITY_DIM]
            }
        })
    }

    /// Similarity coefficients that map the mean shape onto `t(mean)` exactly.
    pub fn similarity_params(&self, t: &SimilarityTransform) -> Result<PdmParams> {
        let posed = apply_similarity(t, &self.mean)?;
        let delta = posed.to_vector() - self.mean.to_vector();
        let rigid = self.similarity.transpose() * delta;
        let mut p = DVector::zeros(self.param_len());
        p.rows_mut(0, SIMILARITY_DIM).copy_from(&rigid);
        PdmParams::new(p)
    }

    pub(crate) fn check_params(&self, params: &PdmParams) -> Result<()> {
        if params.len() != self.param_len() {
            return Err(Error::DimensionMismatch {
                expected: self.param_len(),
                found: params.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_shape(&self, shape: &Shape) -> Result<()> {
        if shape.n() != self.n() {
            return Err(Error::LandmarkCountMismatch {
                expected: self.n(),
                found: shape.n(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            n: self.n(),
            m: self.m(),
            mean_shape: self.mean.coords().to_vec(),
            similarity_bases: columns(&self.similarity),
            components: columns(&self.components),
            eigenvalues: self.eigenvalues.iter().copied().collect(),
            retained_variance: self.retained_variance,
        };
        Ok(to_precise_json(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: Option<String>,
            version: u64,
        }
        let header: Header =
            serde_json::from_str(text).map_err(|e| Error::format(MODEL_FORMAT, e.to_string()))?;
        if header.format.as_deref() != Some(MODEL_FORMAT) {
            return Err(Error::format(MODEL_FORMAT, "missing or wrong `format` tag"));
        }
        if header.version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion {
                format: MODEL_FORMAT,
                version: header.version,
            });
        }
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::format(MODEL_FORMAT, e.to_string()))?;
        let dim = 2 * file.n;
        if file.mean_shape.len() != dim
            || file.similarity_bases.len() != SIMILARITY_DIM
            || file.components.len() != file.m
            || file.eigenvalues.len() != file.m
            || file
                .similarity_bases
                .iter()
                .chain(&file.components)
                .any(|c| c.len() != dim)
        {
            return Err(Error::format(
                MODEL_FORMAT,
                "array sizes disagree with n and m",
            ));
        }
        let mean =
            Shape::new(file.mean_shape).map_err(|e| Error::format(MODEL_FORMAT, e.to_string()))?;
        let from_cols = |cols: &[Vec<f64>]| DMatrix::from_fn(dim, cols.len(), |r, c| cols[c][r]);
        PointDistributionModel::from_parts(
            mean,
            from_cols(&file.similarity_bases),
            from_cols(&file.components),
            DVector::from_vec(file.eigenvalues),
            file.retained_variance,
        )
        .map_err(|e| Error::format(MODEL_FORMAT, e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u64,
    n: usize,
    m: usize,
    mean_shape: Vec<f64>,
    similarity_bases: Vec<Vec<f64>>,
    components: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
    retained_variance: f64,
}

fn columns(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter()
        .map(|c| c.iter().copied().collect())
        .collect()
}

/// `s = mean + S p`.
pub fn generate_shape(model: &PointDistributionModel, params: &PdmParams) -> Result<Shape> {
    model.check_params(params)?;
    let s = model.mean.to_vector() + &model.basis * params.as_vector();
    Shape::from_vector(&s)
}

/// Unweighted least-squares inverse of [`generate_shape`]: `p = S^T (s - mean)`.
pub fn project_shape(model: &PointDistributionModel, shape: &Shape) -> Result<PdmParams> {
    model.check_shape(shape)?;
    let p = model.basis.transpose() * (shape.to_vector() - model.mean.to_vector());
    PdmParams::new(p)
}

/// Mahalanobis norm of the non-rigid parameters, `sum q_j^2 / lambda_j`.
///
/// The similarity coefficients carry a flat prior and contribute nothing.
pub fn prior_penalty(model: &PointDistributionModel, params: &PdmParams) -> f64 {
    params
        .nonrigid()
        .iter()
        .zip(model.eigenvalues.iter())
        .map(|(q, l)| q * q / l)
        .sum()
}

/// Builds a PDM from example shapes.
///
/// Each shape is registered by undoing the similarity that best maps the mean onto it,
/// so the model frame has the canonical orientation, is centered at the origin, and
/// is scaled by the mean similarity scale of the training shapes. Eigenvalues are
/// therefore in squared pixels, on the same footing as the fitting bandwidth.
pub fn train_pdm(shapes: &[Shape], options: &TrainOptions) -> Result<PointDistributionModel> {
    if let ComponentSelection::VarianceRetained(f) = options.selection {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "variance_retained must lie in (0, 1], got {f}"
            )));
        }
    }
    let min_shapes = match options.selection {
        ComponentSelection::Count(k) => (k + 1).max(2),
        ComponentSelection::VarianceRetained(_) => 2,
    };
    if shapes.len() < min_shapes {
        return Err(Error::InsufficientData(format!(
            "{} shapes given, need at least {min_shapes}",
            shapes.len()
        )));
    }

    let gpa = procrustes_align(shapes, options.procrustes_max_iters, options.procrustes_tol)?;

    // Procrustes registration scales each shape to fit the mean, which shrinks deformation
    // by the shape's own size. Instead fit the mean onto each shape and undo that pose, so
    // deformation keeps its magnitude relative to the mean.
    let mut unit = gpa.mean;
    let mut registered = register_onto(shapes, &unit)?;
    for _ in 0..options.procrustes_max_iters {
        let next = average_shape(&registered.0)?.normalized()?;
        let change = (next.to_vector() - unit.to_vector()).norm();
        unit = next;
        registered = register_onto(shapes, &unit)?;
        if change < options.procrustes_tol {
            break;
        }
    }
    let (registered, scales) = registered;
    let size = scales.iter().sum::<f64>() / scales.len() as f64;
    let dim = 2 * unit.n();

    let mean = unit.to_vector() * size;
    let similarity = similarity_basis(&mean);

    // Similarity-free residuals, one column per shape.
    let mut residuals = DMatrix::zeros(dim, shapes.len());
    for (k, s) in registered.iter().enumerate() {
        let r = s.to_vector() * size - &mean;
        let r = &r - &similarity * (similarity.transpose() * &r);
        residuals.set_column(k, &r);
    }
    let centre = residuals.column_mean();
    for mut col in residuals.column_iter_mut() {
        col -= &centre;
    }
    let cov = &residuals * residuals.transpose() / (shapes.len() - 1) as f64;

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    // Relative floor for rounding noise, absolute floor for data with no shape variation.
    let rank_floor = (top * dim as f64 * 1e-12).max(size * size * 1e-18);
    let total: f64 = order
        .iter()
        .map(|&k| eig.eigenvalues[k])
        .filter(|&l| l > 0.0)
        .sum();
    let rank = order
        .iter()
        .take_while(|&&k| eig.eigenvalues[k] > rank_floor && eig.eigenvalues[k] > 0.0)
        .count()
        .min(dim - SIMILARITY_DIM)
        .min(shapes.len() - 1);

    let m = match options.selection {
        ComponentSelection::Count(k) => k.min(rank),
        ComponentSelection::VarianceRetained(f) => {
            let target = f * total * (1.0 - 1e-12);
            let mut acc = 0.0;
            let mut m = 0;
            while m < rank && acc < target {
                acc += eig.eigenvalues[order[m]];
                m += 1;
            }
            m
        }
    };

    let mut components = DMatrix::zeros(dim, m);
    let mut eigenvalues = DVector::zeros(m);
    for j in 0..m {
        let k = order[j];
        let mut v: DVector<f64> = eig.eigenvectors.column(k).into_owned();
        // Remove rounding leakage into the similarity span and earlier components.
        for _ in 0..2 {
            v -= &similarity * (similarity.transpose() * &v);
            for i in 0..j {
                let c = components.column(i);
                v -= c * c.dot(&v);
            }
        }
        v /= v.norm();
        let pivot = v.iamax();
        if v[pivot] < 0.0 {
            v = -v;
        }
        components.set_column(j, &v);
        eigenvalues[j] = eig.eigenvalues[k];
    }
    let kept: f64 = eigenvalues.sum();
    let retained = if total > 0.0 {
        (kept / total).min(1.0)
    } else {
        1.0
    };

    PointDistributionModel::from_parts(
        Shape::from_vector(&mean)?,
        similarity,
        components,
        eigenvalues,
        retained,
    )
}

/// Each shape mapped into the frame of `unit` by the inverse of the similarity that best
/// fits `unit` onto it, together with that similarity's scale.
fn register_onto(shapes: &[Shape], unit: &Shape) -> Result<(Vec<Shape>, Vec<f64>)> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut scales = Vec::with_capacity(shapes.len());
    for s in shapes {
        let t = optimal_similarity(unit, s)?;
        out.push(apply_similarity(&t.inverse(), s)?);
        scales.push(t.scale());
    }
    Ok((out, scales))
}

fn average_shape(shapes: &[Shape]) -> Result<Shape> {
    let mut sum = DVector::zeros(2 * shapes[0].n());
    for s in shapes {
        sum += s.to_vector();
    }
    Shape::from_vector(&(sum / shapes.len() as f64))
}

/// Orthonormal basis of `{mean, rot90(mean), x-translation, y-translation}`.
pub(crate) fn similarity_basis(mean: &DVector<f64>) -> DMatrix<f64> {
    let dim = mean.len();
    let raw = [
        mean.clone(),
        DVector::from_fn(dim, |r, _| {
            if r % 2 == 0 {
                -mean[r + 1]
            } else {
                mean[r - 1]
            }
        }),
        DVector::from_fn(dim, |r, _| if r % 2 == 0 { 1.0 } else { 0.0 }),
        DVector::from_fn(dim, |r, _| if r % 2 == 0 { 0.0 } else { 1.0 }),
    ];
    let mut basis = DMatrix::zeros(dim, SIMILARITY_DIM);
    for (j, v) in raw.into_iter().enumerate() {
        let mut v = v;
        for _ in 0..2 {
            for i in 0..j {
                let b = basis.column(i);
                v -= b * b.dot(&v);
            }
        }
        v /= v.norm();
        basis.set_column(j, &v);
    }
    basis
}
