//! Estimation, correction and tuning of a landmark shape against response maps.
//!
//! 1. Estimation: each landmark starts at the peak of its response map.
//! 2. Correction: the coarse shape is projected onto the PDM with per-landmark
//!    confidences and a Gaussian prior on the non-rigid parameters.
//! 3. Tuning: weighted regularized mean-shift. Every iteration extracts shrinking
//!    patches around the current landmarks, recomputes confidences and KDE mean-shift
//!    vectors, and takes the prior-regularized weighted projection of those vectors.
//!
//! The linear model `s = mean + S p` is used throughout, so the Jacobian of the shape
//! with respect to `p` is the constant basis `S`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::doc::to_precise_json;
use crate::error::{Error, Result};
use crate::pdm::{generate_shape, prior_penalty, PdmParams, PointDistributionModel};
use crate::pts::{format_pts, parse_pts};
use crate::response::{extract_patch, peak_location, PatchResponse, ResponseStack};
use crate::shape::{Shape, SimilarityTransform};

/// How landmark confidences enter the fit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Per-landmark confidence from patch mass and dispersion.
    #[default]
    Confidence,
    /// Every landmark weighted 1: plain regularized landmark mean-shift.
    Uniform,
}

/// Fitting schedule and tuning constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// Maximum number of tuning iterations `K`.
    pub iterations: usize,
    /// Odd patch side per tuning iteration, non-increasing; `patch_sizes[0]` is also used
    /// for the estimation-step confidences.
    pub patch_sizes: Vec<usize>,
    /// Kernel bandwidth `rho` in pixels.
    pub rho: f64,
    /// Prior weight of the correction step.
    pub gamma: f64,
    /// Confidence sigmoid slope.
    pub sigmoid_a: f64,
    /// Confidence sigmoid offset.
    pub sigmoid_b: f64,
    pub w_min: f64,
    pub w_max: f64,
    /// Stop once the mean landmark displacement of an update falls below this, in pixels.
    pub converge_tol: f64,
    /// Landmarks with final confidence below this are flagged occluded.
    pub occlusion_threshold: f64,
    pub weighting: Weighting,
}

impl Default for FitConfig {
    fn default() -> Self {
        let rho = 5.0;
        FitConfig {
            iterations: 5,
            patch_sizes: vec![31, 25, 19, 13, 9],
            rho,
            gamma: rho * rho,
            sigmoid_a: 0.25,
            sigmoid_b: 25.0,
            w_min: 1e-3,
            w_max: 1.0 - 1e-6,
            converge_tol: 0.05,
            occlusion_threshold: 0.5,
            weighting: Weighting::Confidence,
        }
    }
}

impl FitConfig {
    /// Defaults with a confidence sigmoid that actually separates weak evidence.
    ///
    /// With density-normalized maps the mass/dispersion ratio of a clean landmark is
    /// about `1 / (2 sigma^2)` (0.014 for `sigma = 6`). The default `a = 0.25, b = 25`
    /// saturates at `w_max` for every ratio; here `b = -25` and `a = 5000` put the
    /// sigmoid midpoint at a ratio of 0.005.
    pub fn occlusion_sensitive() -> Self {
        FitConfig {
            sigmoid_a: 5000.0,
            sigmoid_b: -25.0,
            ..FitConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.patch_sizes.len() != self.iterations {
            return bad(format!(
                "{} patch sizes given for {} iterations",
                self.patch_sizes.len(),
                self.iterations
            ));
        }
        if self
            .patch_sizes
            .iter()
            .any(|&r| r < 3 || r.is_multiple_of(2))
        {
            return bad("patch sizes must be odd and >= 3".into());
        }
        if self.patch_sizes.windows(2).any(|w| w[1] > w[0]) {
            return bad("patch sizes must be non-increasing".into());
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad(format!("rho must be positive, got {}", self.rho));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if !(self.sigmoid_a.is_finite() && self.sigmoid_b.is_finite()) {
            return bad("sigmoid parameters must be finite".into());
        }
        if !(0.0 <= self.w_min && self.w_min < self.w_max && self.w_max <= 1.0) {
            return bad(format!(
                "need 0 <= w_min < w_max <= 1, got {} and {}",
                self.w_min, self.w_max
            ));
        }
        if !(self.converge_tol >= 0.0) {
            return bad("converge_tol must be non-negative".into());
        }
        if !self.occlusion_threshold.is_finite() {
            return bad("occlusion_threshold must be finite".into());
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Landmark confidence from a raw (unnormalized) patch.
///
/// `w = clamp(sigmoid(a * mass / dispersion + b), w_min, w_max)`, where dispersion is
/// the trace of the response-weighted covariance of the patch coordinates. Empty
/// patches get `w_min`; a patch whose mass sits on a single cell gets `w_max`.
pub fn confidence_weight(patch: &PatchResponse, cfg: &FitConfig) -> f64 {
    let mass = patch.mass();
    if !(mass > 0.0) {
        return cfg.w_min;
    }
    let (mut mx, mut my) = (0.0, 0.0);
    for (c, v) in patch.omega().zip(patch.values()) {
        mx += v / mass * c[0];
        my += v / mass * c[1];
    }
    let dispersion: f64 = patch
        .omega()
        .zip(patch.values())
        .map(|(c, v)| v / mass * ((c[0] - mx).powi(2) + (c[1] - my).powi(2)))
        .sum();
    if dispersion <= 0.0 {
        return cfg.w_max;
    }
    sigmoid(cfg.sigmoid_a * mass / dispersion + cfg.sigmoid_b).clamp(cfg.w_min, cfg.w_max)
}

/// Weighted, prior-regularized projection of a coarse shape onto the PDM:
/// `p0 = (gamma L^-1 + S^T W S)^-1 S^T W (coarse - mean)`.
pub fn robust_initialize(
    model: &PointDistributionModel,
    coarse: &Shape,
    weights: &[f64],
    gamma: f64,
) -> Result<PdmParams> {
    model.check_shape(coarse)?;
    check_weights(model, weights)?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "gamma must be non-negative, got {gamma}"
        )));
    }
    if weights.iter().filter(|&&w| w > 0.0).count() < 3 {
        return Err(Error::InitDegenerate(
            "fewer than 3 landmarks carry positive weight".into(),
        ));
    }
    let residual = coarse.to_vector() - model.mean_shape().to_vector();
    solve_regularized(model, weights, gamma, &residual, None)
        .map(PdmParams::new)
        .unwrap_or_else(|| {
            Err(Error::InitDegenerate(
                "weighted normal matrix is not positive definite".into(),
            ))
        })
}

/// Solves `(reg L^-1 + S^T W S) x = S^T W v - reg L^-1 p` (with `p = 0` when absent).
fn solve_regularized(
    model: &PointDistributionModel,
    weights: &[f64],
    reg: f64,
    v: &DVector<f64>,
    p: Option<&DVector<f64>>,
) -> Option<DVector<f64>> {
    let s = model.basis();
    let mut ws = s.clone();
    for (r, mut row) in ws.row_iter_mut().enumerate() {
        row *= weights[r / 2];
    }
    let prior = model.inverse_prior_diagonal() * reg;
    let mut a = s.transpose() * &ws;
    for k in 0..prior.len() {
        a[(k, k)] += prior[k];
    }
    let mut rhs = ws.transpose() * v;
    if let Some(p) = p {
        rhs -= prior.component_mul(p);
    }
    let chol = a.cholesky()?;
    let x = chol.solve(&rhs);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn check_weights(model: &PointDistributionModel, weights: &[f64]) -> Result<()> {
    if weights.len() != model.n() {
        return Err(Error::LandmarkCountMismatch {
            expected: model.n(),
            found: weights.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidConfig(
            "weights must be finite and non-negative".into(),
        ));
    }
    Ok(())
}

/// Posterior over a patch's candidate positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    /// One weight per patch cell, summing to 1.
    pub weights: Vec<f64>,
    /// Every kernel term underflowed; the weights are the normalized responses alone.
    pub fallback: bool,
}

/// E-step: `w_y ∝ pi_y N(x; y, rho_i I)` over the patch cells.
///
/// Evaluated in the log domain with the maximum subtracted, so small `rho_i` does not
/// underflow the whole patch.
pub fn estep_posterior(
    patch: &PatchResponse,
    x_current: [f64; 2],
    rho_i: f64,
) -> Result<Posterior> {
    if !(rho_i > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "kernel variance must be positive, got {rho_i}"
        )));
    }
    let mass = patch.mass();
    if !(mass > 0.0) {
        return Err(Error::ZeroEvidence);
    }
    let logs: Vec<f64> = patch
        .omega()
        .zip(patch.values())
        .map(|(y, &pi)| {
            if pi > 0.0 {
                let d2 = (x_current[0] - y[0]).powi(2) + (x_current[1] - y[1]).powi(2);
                pi.ln() - d2 / (2.0 * rho_i)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top.is_finite() {
        let mut weights: Vec<f64> = logs.iter().map(|&l| (l - top).exp()).collect();
        let total: f64 = weights.iter().sum();
        if total.is_finite() && total > 0.0 {
            weights.iter_mut().for_each(|w| *w /= total);
            return Ok(Posterior {
                weights,
                fallback: false,
            });
        }
    }
    Ok(Posterior {
        weights: patch.values().iter().map(|v| v / mass).collect(),
        fallback: true,
    })
}

/// Result of [`mean_shift_vector`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanShift {
    pub v: [f64; 2],
    /// The patch was empty and `v` is zero.
    pub zero_evidence: bool,
    pub fallback: bool,
}

/// Displacement from `x_current` to the posterior mean of the patch candidates.
pub fn mean_shift_vector(
    patch: &PatchResponse,
    x_current: [f64; 2],
    rho_i: f64,
) -> Result<MeanShift> {
    let post = match estep_posterior(patch, x_current, rho_i) {
        Ok(p) => p,
        Err(Error::ZeroEvidence) => {
            return Ok(MeanShift {
                v: [0.0, 0.0],
                zero_evidence: true,
                fallback: false,
            })
        }
        Err(e) => return Err(e),
    };
    let (mut mx, mut my) = (0.0, 0.0);
    for (y, w) in patch.omega().zip(&post.weights) {
        mx += w * y[0];
        my += w * y[1];
    }
    Ok(MeanShift {
        v: [mx - x_current[0], my - x_current[1]],
        zero_evidence: false,
        fallback: post.fallback,
    })
}

/// Regularized weighted parameter step
/// `dp = (rho^2 L^-1 + S^T W S)^-1 (S^T W v - rho^2 L^-1 p)`.
///
/// `weights` holds one confidence per landmark; each one fills both the x and y
/// diagonal entries of `W`.
pub fn param_increment(
    model: &PointDistributionModel,
    params: &PdmParams,
    v: &DVector<f64>,
    weights: &[f64],
    rho: f64,
) -> Result<DVector<f64>> {
    model.check_params(params)?;
    check_weights(model, weights)?;
    if v.len() != 2 * model.n() {
        return Err(Error::DimensionMismatch {
            expected: 2 * model.n(),
            found: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("mean-shift vector"));
    }
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "rho must be non-negative, got {rho}"
        )));
    }
    solve_regularized(model, weights, rho * rho, v, Some(params.as_vector()))
        .ok_or(Error::SingularSystem)
}

/// `params + dp`, see [`param_increment`].
pub fn update_params(
    model: &PointDistributionModel,
    params: &PdmParams,
    v: &DVector<f64>,
    weights: &[f64],
    rho: f64,
) -> Result<PdmParams> {
    let dp = param_increment(model, params, v, weights, rho)?;
    PdmParams::new(params.as_vector() + dp)
}

/// Expected negative log-posterior with the E-step frozen at `centers`:
/// `||q||^2_{L^-1} + sum_i w_i sum_y (w_y / rho^2) ||x_i - y||^2`, with `x = generate(params)`.
///
/// `patches` are raw or normalized patches in landmark order; empty patches contribute
/// nothing.
pub fn evaluate_q_surrogate(
    model: &PointDistributionModel,
    params: &PdmParams,
    patches: &[PatchResponse],
    centers: &[[f64; 2]],
    weights: &[f64],
    rho: f64,
) -> Result<f64> {
    let shape = generate_shape(model, params)?;
    check_weights(model, weights)?;
    if patches.len() != model.n() || centers.len() != model.n() {
        return Err(Error::LandmarkCountMismatch {
            expected: model.n(),
            found: patches.len().min(centers.len()),
        });
    }
    let rho2 = rho * rho;
    let mut data = 0.0;
    for (i, ((patch, &c), &w)) in patches.iter().zip(centers).zip(weights).enumerate() {
        if w == 0.0 || !(patch.mass() > 0.0) {
            continue;
        }
        let post = estep_posterior(patch, c, rho2 / w)?;
        let x = shape.point(i);
        let spread: f64 = patch
            .omega()
            .zip(&post.weights)
            .map(|(y, wy)| wy * ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)))
            .sum();
        data += w * spread / rho2;
    }
    Ok(prior_penalty(model, params) + data)
}

/// One tuning iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub patch_size: usize,
    /// Shape after the update.
    pub shape: Shape,
    pub delta_p_norm: f64,
    /// Surrogate objective after the update, E-step frozen at the pre-update shape.
    pub surrogate: f64,
    /// Mean landmark displacement caused by the update, in pixels.
    pub shape_change: f64,
}

/// Output of [`fit`].
#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub shape: Shape,
    pub params: PdmParams,
    /// Final per-landmark confidences, within `[w_min, w_max]` (all 1 for uniform weighting).
    pub weights: Vec<f64>,
    pub occlusion_flags: Vec<bool>,
    /// Peak-decoded shape from the estimation step.
    pub coarse_shape: Shape,
    /// PDM-corrected shape that seeds tuning.
    pub initial_shape: Shape,
    pub trace: Vec<IterationRecord>,
    pub converged: bool,
}

/// Runs estimation, correction and tuning on one response stack.
pub fn fit(
    model: &PointDistributionModel,
    stack: &ResponseStack,
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    let n = model.n();
    if stack.n() != n {
        return Err(Error::LandmarkCountMismatch {
            expected: n,
            found: stack.n(),
        });
    }

    // Estimation
    let peaks: Vec<_> = stack.maps().map(peak_location).collect();
    if peaks.iter().all(|p| p.zero_evidence) {
        return degenerate_fit(model, stack, cfg);
    }
    let coarse = Shape::new(
        peaks
            .iter()
            .flat_map(|p| [p.x as f64, p.y as f64])
            .collect(),
    )?;
    let weight_of = |patch: &PatchResponse| match cfg.weighting {
        Weighting::Confidence => confidence_weight(patch, cfg),
        Weighting::Uniform => 1.0,
    };
    let mut weights = (0..n)
        .map(|i| {
            Ok(weight_of(&extract_patch(
                stack,
                i,
                coarse.point(i),
                cfg.patch_sizes[0],
            )?))
        })
        .collect::<Result<Vec<_>>>()?;

    // Correction
    let mut params = robust_initialize(model, &coarse, &weights, cfg.gamma)?;
    let mut shape = generate_shape(model, &params)?;
    let initial_shape = shape.clone();

    // Tuning
    let rho2 = cfg.rho * cfg.rho;
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut converged = false;
    for (k, &r) in cfg.patch_sizes.iter().enumerate() {
        let mut patches = Vec::with_capacity(n);
        let mut v = DVector::zeros(2 * n);
        for i in 0..n {
            let x = shape.point(i);
            let patch = extract_patch(stack, i, x, r)?;
            let w = weight_of(&patch);
            let ms = mean_shift_vector(&patch, x, rho2 / w)?;
            v[2 * i] = ms.v[0];
            v[2 * i + 1] = ms.v[1];
            weights[i] = w;
            patches.push(patch);
        }
        let dp = param_increment(model, &params, &v, &weights, cfg.rho)?;
        let next_params = PdmParams::new(params.as_vector() + &dp)?;
        let next = generate_shape(model, &next_params)?;
        let centers: Vec<[f64; 2]> = shape.points().collect();
        let surrogate =
            evaluate_q_surrogate(model, &next_params, &patches, &centers, &weights, cfg.rho)?;
        let shape_change = next.mean_landmark_error(&shape)?;
        trace.push(IterationRecord {
            iteration: k,
            patch_size: r,
            shape: next.clone(),
            delta_p_norm: dp.norm(),
            surrogate,
            shape_change,
        });
        params = next_params;
        shape = next;
        if shape_change < cfg.converge_tol {
            converged = true;
            break;
        }
    }

    let occlusion_flags = weights
        .iter()
        .map(|&w| w < cfg.occlusion_threshold)
        .collect();
    Ok(FitResult {
        shape,
        params,
        weights,
        occlusion_flags,
        coarse_shape: coarse,
        initial_shape,
        trace,
        converged,
    })
}

/// No map carries any evidence: the mean shape at the canvas center, every landmark occluded.
fn degenerate_fit(
    model: &PointDistributionModel,
    stack: &ResponseStack,
    cfg: &FitConfig,
) -> Result<FitResult> {
    let c = model.mean_shape().centroid();
    let t = SimilarityTransform::new(
        1.0,
        0.0,
        [
            stack.width() as f64 / 2.0 - c[0],
            stack.height() as f64 / 2.0 - c[1],
        ],
    )?;
    let params = model.similarity_params(&t)?;
    let shape = generate_shape(model, &params)?;
    let w = match cfg.weighting {
        Weighting::Confidence => cfg.w_min,
        Weighting::Uniform => 1.0,
    };
    Ok(FitResult {
        coarse_shape: shape.clone(),
        initial_shape: shape.clone(),
        shape,
        params,
        weights: vec![w; model.n()],
        occlusion_flags: vec![true; model.n()],
        trace: Vec::new(),
        converged: false,
    })
}

const FIT_FORMAT: &str = "ect-fit";
const FIT_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
struct FitDocument {
    format: String,
    version: u64,
    n: usize,
    shape_pts: String,
    params: Vec<f64>,
    weights: Vec<f64>,
    occlusion_flags: Vec<bool>,
    coarse_shape: Vec<f64>,
    initial_shape: Vec<f64>,
    converged: bool,
    trace: Vec<IterationRecord>,
}

impl FitResult {
    pub fn to_json(&self) -> Result<String> {
        let doc = FitDocument {
            format: FIT_FORMAT.into(),
            version: FIT_VERSION,
            n: self.shape.n(),
            shape_pts: format_pts(&self.shape),
            params: self.params.as_vector().iter().copied().collect(),
            weights: self.weights.clone(),
            occlusion_flags: self.occlusion_flags.clone(),
            coarse_shape: self.coarse_shape.coords().to_vec(),
            initial_shape: self.initial_shape.coords().to_vec(),
            converged: self.converged,
            trace: self.trace.clone(),
        };
        Ok(to_precise_json(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: FitDocument =
            serde_json::from_str(text).map_err(|e| Error::format(FIT_FORMAT, e.to_string()))?;
        if doc.format != FIT_FORMAT {
            return Err(Error::format(FIT_FORMAT, "wrong `format` tag"));
        }
        if doc.version != FIT_VERSION {
            return Err(Error::UnsupportedVersion {
                format: FIT_FORMAT,
                version: doc.version,
            });
        }
        let shape = parse_pts(&doc.shape_pts)?;
        if shape.n() != doc.n || doc.weights.len() != doc.n || doc.occlusion_flags.len() != doc.n {
            return Err(Error::format(FIT_FORMAT, "array sizes disagree with n"));
        }
        Ok(FitResult {
            shape,
            params: PdmParams::from_slice(&doc.params)?,
            weights: doc.weights,
            occlusion_flags: doc.occlusion_flags,
            coarse_shape: Shape::new(doc.coarse_shape)?,
            initial_shape: Shape::new(doc.initial_shape)?,
            trace: doc.trace,
            converged: doc.converged,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Dense `S^T W S` for tests and diagnostics.
pub fn weighted_normal_matrix(model: &PointDistributionModel, weights: &[f64]) -> DMatrix<f64> {
    let s = model.basis();
    let w = DMatrix::from_diagonal(&DVector::from_fn(2 * model.n(), |r, _| weights[r / 2]));
    s.transpose() * w * s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pdm::project_shape;
    use crate::response::{normalize_patch, render_ideal_stack, ResponseMap};
    use crate::testutil::{blob, model_with_mean};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn patch(center: [i64; 2], size: usize, values: Vec<f64>) -> PatchResponse {
        PatchResponse::new(0, center, size, values).unwrap()
    }

    fn gaussian_patch(
        center: [i64; 2],
        size: usize,
        mean: [f64; 2],
        sigma: f64,
        scale: f64,
    ) -> PatchResponse {
        let half = (size / 2) as i64;
        let mut values = Vec::new();
        for dy in -half..=half {
            for dx in -half..=half {
                let (x, y) = ((center[0] + dx) as f64, (center[1] + dy) as f64);
                let d2 = (x - mean[0]).powi(2) + (y - mean[1]).powi(2);
                values.push(scale * (-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
        patch(center, size, values)
    }

    #[test]
    fn default_config_is_valid_and_checked() {
        FitConfig::default().validate().unwrap();
        FitConfig::occlusion_sensitive().validate().unwrap();
        let bad = [
            FitConfig {
                patch_sizes: vec![9, 13, 19, 25, 31],
                ..FitConfig::default()
            },
            FitConfig {
                patch_sizes: vec![31, 25, 20, 13, 9],
                ..FitConfig::default()
            },
            FitConfig {
                iterations: 3,
                ..FitConfig::default()
            },
            FitConfig {
                w_min: 0.9,
                w_max: 0.5,
                ..FitConfig::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn confidence_edge_cases() {
        let cfg = FitConfig::occlusion_sensitive();
        assert_eq!(
            confidence_weight(&patch([5, 5], 3, vec![0.0; 9]), &cfg),
            cfg.w_min
        );
        let mut v = vec![0.0; 9];
        v[2] = 0.4;
        assert_eq!(confidence_weight(&patch([5, 5], 3, v), &cfg), cfg.w_max);
    }

    #[test]
    fn confidence_is_monotone_in_mass() {
        let cfg = FitConfig::occlusion_sensitive();
        let peak = 1.0 / (2.0 * std::f64::consts::PI * 36.0);
        let full = gaussian_patch([50, 50], 31, [50.0, 50.0], 6.0, peak);
        let weak = gaussian_patch([50, 50], 31, [50.0, 50.0], 6.0, 0.1 * peak);
        // Direct evaluation of the formula for both patches.
        let direct = |p: &PatchResponse| {
            let m: f64 = p.values().iter().sum();
            let mx: f64 = p.omega().zip(p.values()).map(|(c, v)| c[0] * v / m).sum();
            let my: f64 = p.omega().zip(p.values()).map(|(c, v)| c[1] * v / m).sum();
            let var: f64 = p
                .omega()
                .zip(p.values())
                .map(|(c, v)| v / m * ((c[0] - mx).powi(2) + (c[1] - my).powi(2)))
                .sum();
            (1.0 / (1.0 + (-(cfg.sigmoid_a * m / var + cfg.sigmoid_b)).exp()))
                .clamp(cfg.w_min, cfg.w_max)
        };
        let (wf, ww) = (
            confidence_weight(&full, &cfg),
            confidence_weight(&weak, &cfg),
        );
        assert!((wf - direct(&full)).abs() < 1e-12 && (ww - direct(&weak)).abs() < 1e-12);
        assert!(ww < wf, "{ww} !< {wf}");
    }

    fn toy(seed: u64, n: usize, eig: &[f64]) -> PointDistributionModel {
        model_with_mean(blob(n, 40.0, [0.0, 0.0]), eig, seed)
    }

    #[test]
    fn init_recovers_in_span_shape_without_prior() {
        let model = toy(1, 10, &[400.0, 200.0, 100.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p0 = PdmParams::new(DVector::from_fn(model.param_len(), |_, _| {
            rng.random_range(-30.0..30.0)
        }))
        .unwrap();
        let coarse = generate_shape(&model, &p0).unwrap();
        let p = robust_initialize(&model, &coarse, &[1.0; 10], 0.0).unwrap();
        assert!((p.as_vector() - p0.as_vector()).amax() < 1e-8);
    }

    #[test]
    fn init_at_mean_is_zero() {
        let model = toy(3, 10, &[400.0, 200.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w: Vec<f64> = (0..10).map(|_| rng.random_range(0.1..1.0)).collect();
        let p = robust_initialize(&model, model.mean_shape(), &w, 25.0).unwrap();
        assert!(p.as_vector().amax() < 1e-10);
    }

    #[test]
    fn init_ignores_zero_weight_outlier() {
        let model = toy(5, 12, &[900.0, 400.0, 100.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p0 = PdmParams::new(DVector::from_fn(model.param_len(), |_, _| {
            rng.random_range(-20.0..20.0)
        }))
        .unwrap();
        let truth = generate_shape(&model, &p0).unwrap();
        let mut coords = truth.coords().to_vec();
        coords[6] += 50.0;
        let coarse = Shape::new(coords).unwrap();
        let mut w = vec![1.0; 12];
        w[3] = 0.0;
        let gamma = 25.0;
        let p = robust_initialize(&model, &coarse, &w, gamma).unwrap();

        // Dense oracle: explicit 2n x 2n weight matrix and an LU solve.
        let s = model.basis();
        let wd = DMatrix::from_diagonal(&DVector::from_fn(24, |r, _| w[r / 2]));
        let lam = DMatrix::from_diagonal(&model.inverse_prior_diagonal());
        let a = &lam * gamma + s.transpose() * &wd * s;
        let b = s.transpose() * &wd * (coarse.to_vector() - model.mean_shape().to_vector());
        let oracle = a.lu().solve(&b).unwrap();
        assert!((p.as_vector() - &oracle).amax() < 1e-8);

        // the zero-weight landmark is inferred from the others
        let s_fit = generate_shape(&model, &p).unwrap();
        let err = s_fit.landmark_errors(&truth).unwrap();
        assert!(err[3] < 5.0, "outlier landmark error {}", err[3]);
    }

    #[test]
    fn init_degenerate_weights() {
        let model = toy(7, 10, &[100.0]);
        let mut w = vec![0.0; 10];
        assert!(matches!(
            robust_initialize(&model, model.mean_shape(), &w, 25.0),
            Err(Error::InitDegenerate(_))
        ));
        w[0] = 1.0;
        w[1] = 1.0;
        assert!(matches!(
            robust_initialize(&model, model.mean_shape(), &w, 25.0),
            Err(Error::InitDegenerate(_))
        ));
    }

    #[test]
    fn posterior_cases() {
        // uniform patch: posterior is the normalized kernel
        let p = patch([10, 10], 5, vec![1.0; 25]);
        let post = estep_posterior(&p, [10.0, 10.0], 4.0).unwrap();
        let kernel: Vec<f64> = p
            .omega()
            .map(|y| (-((y[0] - 10.0).powi(2) + (y[1] - 10.0).powi(2)) / 8.0).exp())
            .collect();
        let total: f64 = kernel.iter().sum();
        for (a, b) in post.weights.iter().zip(&kernel) {
            assert!((a - b / total).abs() < 1e-14);
        }

        // single candidate
        let mut v = vec![0.0; 25];
        v[7] = 0.3;
        let post = estep_posterior(&patch([10, 10], 5, v), [0.0, 0.0], 1.0).unwrap();
        assert_eq!(post.weights[7], 1.0);
        assert_eq!(post.weights.iter().sum::<f64>(), 1.0);

        assert!(matches!(
            estep_posterior(&patch([0, 0], 3, vec![0.0; 9]), [0.0, 0.0], 1.0),
            Err(Error::ZeroEvidence)
        ));
        assert!(estep_posterior(&p, [0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn posterior_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let values: Vec<f64> = (0..49).map(|_| rng.random_range(0.0..1.0)).collect();
            let p = normalize_patch(&patch([20, 30], 7, values)).unwrap();
            let x = [rng.random_range(15.0..25.0), rng.random_range(25.0..35.0)];
            let rho_i = rng.random_range(1.0..50.0);
            let post = estep_posterior(&p, x, rho_i).unwrap();
            let raw: Vec<f64> = p
                .omega()
                .zip(p.values())
                .map(|(y, pi)| {
                    let d2 = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2);
                    pi * (-d2 / (2.0 * rho_i)).exp() / (2.0 * std::f64::consts::PI * rho_i)
                })
                .collect();
            let total: f64 = raw.iter().sum();
            for (a, b) in post.weights.iter().zip(&raw) {
                assert!((a - b / total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn posterior_survives_tiny_bandwidth() {
        let p = patch([100, 100], 9, vec![1.0; 81]);
        // the nearest candidate dominates even though every raw kernel term underflows
        let post = estep_posterior(&p, [1000.0, 1000.0], 1e-3).unwrap();
        assert!(!post.fallback);
        assert!((post.weights[80] - 1.0).abs() < 1e-12);
        let post = estep_posterior(&p, [f64::INFINITY, 0.0], 1.0).unwrap();
        assert!(post.fallback);
        assert!((post.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_shift_cases() {
        // fixed point at the mode
        let g = gaussian_patch([40, 40], 31, [40.0, 40.0], 6.0, 1.0);
        let ms = mean_shift_vector(&g, [40.0, 40.0], 25.0).unwrap();
        assert!(ms.v[0].abs() < 0.05 && ms.v[1].abs() < 0.05);

        let mut v = vec![0.0; 81];
        // cell (row 8, col 7) of a 9x9 patch centered at (10, 10) is (13, 14)
        v[8 * 9 + 7] = 1.0;
        let ms = mean_shift_vector(&patch([10, 10], 9, v), [10.0, 10.0], 4.0).unwrap();
        assert_eq!(ms.v, [3.0, 4.0]);

        let empty =
            mean_shift_vector(&patch([10, 10], 3, vec![0.0; 9]), [10.0, 10.0], 4.0).unwrap();
        assert!(empty.zero_evidence);
        assert_eq!(empty.v, [0.0, 0.0]);
    }

    #[test]
    fn mean_shift_with_wide_kernel_tends_to_centroid() {
        let g = gaussian_patch([45, 40], 21, [45.0, 40.0], 3.0, 1.0);
        let x = [40.0, 40.0];
        let ms = mean_shift_vector(&g, x, 1e12).unwrap();
        let total: f64 = g.values().iter().sum();
        let cx: f64 = g
            .omega()
            .zip(g.values())
            .map(|(c, v)| c[0] * v)
            .sum::<f64>()
            / total;
        let cy: f64 = g
            .omega()
            .zip(g.values())
            .map(|(c, v)| c[1] * v)
            .sum::<f64>()
            / total;
        assert!((ms.v[0] - (cx - x[0])).abs() < 1e-10);
        assert!((ms.v[1] - (cy - x[1])).abs() < 1e-10);
    }

    #[test]
    fn stationary_update_is_zero() {
        let model = toy(9, 10, &[400.0, 100.0]);
        let p = PdmParams::zeros(model.param_len());
        let dp = param_increment(&model, &p, &DVector::zeros(20), &[0.7; 10], 5.0).unwrap();
        assert_eq!(dp.amax(), 0.0);
    }

    #[test]
    fn unregularized_limit_is_orthogonal_projection() {
        let model = toy(10, 10, &[400.0, 100.0, 50.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = DVector::from_fn(20, |_, _| rng.random_range(-3.0..3.0));
        let p = PdmParams::new(DVector::from_fn(model.param_len(), |_, _| {
            rng.random_range(-5.0..5.0)
        }))
        .unwrap();
        let dp = param_increment(&model, &p, &v, &[1.0; 10], 0.0).unwrap();
        assert!((&dp - model.basis().transpose() * &v).amax() < 1e-9);
        // same as projecting the displaced shape
        let s = generate_shape(&model, &p).unwrap();
        let moved = Shape::from_vector(&(s.to_vector() + &v)).unwrap();
        let projected = project_shape(&model, &moved).unwrap();
        assert!((projected.as_vector() - (p.as_vector() + &dp)).amax() < 1e-9);
    }

    #[test]
    fn update_matches_dense_solve() {
        let model = toy(12, 10, &[500.0, 300.0, 200.0, 100.0, 50.0, 20.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let v = DVector::from_fn(20, |_, _| rng.random_range(-4.0..4.0));
            let w: Vec<f64> = (0..10).map(|_| rng.random_range(1e-3..1.0)).collect();
            let p = PdmParams::new(DVector::from_fn(model.param_len(), |_, _| {
                rng.random_range(-10.0..10.0)
            }))
            .unwrap();
            let rho = rng.random_range(0.5..8.0);
            let dp = param_increment(&model, &p, &v, &w, rho).unwrap();
            let s = model.basis();
            let wd = DMatrix::from_diagonal(&DVector::from_fn(20, |r, _| w[r / 2]));
            let lam = DMatrix::from_diagonal(&model.inverse_prior_diagonal()) * (rho * rho);
            let a = &lam + s.transpose() * &wd * s;
            let b = s.transpose() * &wd * &v - &lam * p.as_vector();
            let oracle = a.lu().solve(&b).unwrap();
            assert!((dp - oracle).amax() < 1e-9);
        }
    }

    #[test]
    fn update_is_jointly_scale_invariant() {
        let model = toy(14, 10, &[500.0, 80.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let v = DVector::from_fn(20, |_, _| rng.random_range(-4.0..4.0));
        let p = PdmParams::new(DVector::from_fn(model.param_len(), |_, _| {
            rng.random_range(-10.0..10.0)
        }))
        .unwrap();
        let base = param_increment(&model, &p, &v, &[1.0; 10], 5.0).unwrap();
        for c in [0.01, 0.3, 7.0] {
            let scaled = param_increment(&model, &p, &v, &[c; 10], 5.0 * f64::sqrt(c)).unwrap();
            assert!((&scaled - &base).amax() < 1e-9);
        }
    }

    #[test]
    fn update_rejects_non_finite() {
        let model = toy(16, 10, &[100.0]);
        let mut v = DVector::zeros(20);
        v[3] = f64::NAN;
        assert!(matches!(
            param_increment(
                &model,
                &PdmParams::zeros(model.param_len()),
                &v,
                &[1.0; 10],
                5.0
            ),
            Err(Error::NonFinite(_))
        ));
    }

    /// Model whose mean sits on integer pixels, with single-candidate patches at each landmark.
    fn integer_instance() -> (PointDistributionModel, Vec<PatchResponse>, Vec<[f64; 2]>) {
        let mean = Shape::from_points(&[
            [20.0, 20.0],
            [40.0, 22.0],
            [55.0, 35.0],
            [50.0, 55.0],
            [30.0, 60.0],
            [15.0, 45.0],
        ])
        .unwrap();
        let model = model_with_mean(mean.clone(), &[200.0, 50.0], 17);
        let patches: Vec<PatchResponse> = mean
            .points()
            .enumerate()
            .map(|(i, pt)| {
                let mut v = vec![0.0; 9];
                v[4] = 1.0;
                PatchResponse::new(i, [pt[0] as i64, pt[1] as i64], 3, v).unwrap()
            })
            .collect();
        let centers = mean.points().collect();
        (model, patches, centers)
    }

    #[test]
    fn surrogate_cases() {
        let (model, patches, centers) = integer_instance();
        let p0 = PdmParams::zeros(model.param_len());
        let w = vec![0.8; 6];
        let rho = 2.0;
        assert!(
            evaluate_q_surrogate(&model, &p0, &patches, &centers, &w, rho)
                .unwrap()
                .abs()
                < 1e-20
        );

        // Move landmark 2's candidate by d; the quadratic term grows by w d^2 / rho^2.
        let d = 3.0;
        let mut moved = patches.clone();
        let c = patches[2].center();
        moved[2] =
            PatchResponse::new(2, [c[0] + 3, c[1]], 3, patches[2].values().to_vec()).unwrap();
        let q = evaluate_q_surrogate(&model, &p0, &moved, &centers, &w, rho).unwrap();
        assert!((q - 0.8 * d * d / (rho * rho)).abs() < 1e-12);
    }

    #[test]
    fn surrogate_matches_double_sum() {
        let model = toy(18, 8, &[300.0, 100.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let p = PdmParams::new(DVector::from_fn(model.param_len(), |_, _| {
            rng.random_range(-5.0..5.0)
        }))
        .unwrap();
        let shape = generate_shape(&model, &p).unwrap();
        let patches: Vec<PatchResponse> = shape
            .points()
            .enumerate()
            .map(|(i, pt)| {
                let vals = (0..25).map(|_| rng.random_range(0.0..1.0)).collect();
                PatchResponse::new(i, [pt[0].round() as i64 + 1, pt[1].round() as i64], 5, vals)
                    .unwrap()
            })
            .collect();
        let centers: Vec<[f64; 2]> = shape
            .points()
            .map(|p| {
                [
                    p[0] + rng.random_range(-1.0..1.0),
                    p[1] + rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let w: Vec<f64> = (0..8).map(|_| rng.random_range(0.1..1.0)).collect();
        let rho = 3.0;
        let got = evaluate_q_surrogate(&model, &p, &patches, &centers, &w, rho).unwrap();

        let mut oracle: f64 = p
            .nonrigid()
            .iter()
            .zip(model.eigenvalues().iter())
            .map(|(q, l)| q * q / l)
            .sum();
        for i in 0..8 {
            let rho_i = rho * rho / w[i];
            let x = shape.point(i);
            let c = centers[i];
            let terms: Vec<(f64, [f64; 2])> = patches[i]
                .omega()
                .zip(patches[i].values())
                .map(|(y, pi)| {
                    let d2 = (c[0] - y[0]).powi(2) + (c[1] - y[1]).powi(2);
                    (pi * (-d2 / (2.0 * rho_i)).exp(), y)
                })
                .collect();
            let z: f64 = terms.iter().map(|t| t.0).sum();
            for (k, y) in terms {
                oracle +=
                    w[i] * (k / z) / (rho * rho) * ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2));
            }
        }
        assert!((got - oracle).abs() < 1e-10 * (1.0 + oracle.abs()));
    }

    #[test]
    fn m_step_does_not_increase_surrogate() {
        let (model, patches, _) = integer_instance();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..50 {
            let p = PdmParams::new(DVector::from_fn(model.param_len(), |_, _| {
                rng.random_range(-3.0..3.0)
            }))
            .unwrap();
            let shape = generate_shape(&model, &p).unwrap();
            let centers: Vec<[f64; 2]> = shape.points().collect();
            let w: Vec<f64> = (0..6).map(|_| rng.random_range(0.05..1.0)).collect();
            let rho = 2.5;
            let mut v = DVector::zeros(12);
            for i in 0..6 {
                let ms = mean_shift_vector(&patches[i], centers[i], rho * rho / w[i]).unwrap();
                v[2 * i] = ms.v[0];
                v[2 * i + 1] = ms.v[1];
            }
            let next = update_params(&model, &p, &v, &w, rho).unwrap();
            let before = evaluate_q_surrogate(&model, &p, &patches, &centers, &w, rho).unwrap();
            let after = evaluate_q_surrogate(&model, &next, &patches, &centers, &w, rho).unwrap();
            assert!(after <= before + 1e-9, "{after} > {before}");
        }
    }

    #[test]
    fn fit_rejects_landmark_mismatch() {
        let model = toy(21, 10, &[100.0]);
        let stack = ResponseStack::from_maps(vec![ResponseMap::zeros(32, 32); 9]).unwrap();
        assert!(matches!(
            fit(&model, &stack, &FitConfig::default()),
            Err(Error::LandmarkCountMismatch {
                expected: 10,
                found: 9
            })
        ));
    }

    #[test]
    fn all_zero_stack_gives_centered_mean() {
        let model = toy(22, 10, &[100.0]);
        let stack = ResponseStack::from_maps(vec![ResponseMap::zeros(128, 96); 10]).unwrap();
        let res = fit(&model, &stack, &FitConfig::default()).unwrap();
        assert!(res.occlusion_flags.iter().all(|&f| f));
        let c = res.shape.centroid();
        assert!((c[0] - 48.0).abs() < 1e-9 && (c[1] - 64.0).abs() < 1e-9);
        let expected = model.mean_shape().translated(
            48.0 - model.mean_shape().centroid()[0],
            64.0 - model.mean_shape().centroid()[1],
        );
        assert!((res.shape.to_vector() - expected.to_vector()).amax() < 1e-9);
        assert!(res.trace.is_empty());
    }

    #[test]
    fn noiseless_fit_recovers_in_span_shape() {
        let model = model_with_mean(blob(16, 45.0, [0.0, 0.0]), &[3600.0, 2500.0, 1600.0], 23);
        let t = SimilarityTransform::new(1.05, 0.1, [64.0, 64.0]).unwrap();
        let mut p = model.similarity_params(&t).unwrap().into_vector();
        p[4] = 20.0;
        p[5] = -12.0;
        let truth = generate_shape(&model, &PdmParams::new(p).unwrap()).unwrap();
        let stack = render_ideal_stack(&truth, None, 128, 128, 6.0).unwrap();
        let res = fit(&model, &stack, &FitConfig::default()).unwrap();
        let err = res.shape.mean_landmark_error(&truth).unwrap();
        assert!(err < 0.5, "mean error {err}");
        assert!(res.trace.len() <= 5);
        let regenerated = generate_shape(&model, &res.params).unwrap();
        assert!((regenerated.to_vector() - res.shape.to_vector()).amax() < 1e-9);
        assert!(res
            .weights
            .iter()
            .all(|&w| (1e-3..=1.0 - 1e-6).contains(&w)));
    }

    #[test]
    fn fit_document_round_trip() {
        let model = model_with_mean(blob(12, 30.0, [0.0, 0.0]), &[300.0, 100.0], 24);
        let t = SimilarityTransform::new(1.0, 0.0, [50.0, 50.0]).unwrap();
        let truth = generate_shape(&model, &model.similarity_params(&t).unwrap()).unwrap();
        let stack = render_ideal_stack(&truth, None, 100, 100, 6.0).unwrap();
        let res = fit(&model, &stack, &FitConfig::default()).unwrap();
        let text = res.to_json().unwrap();
        assert_eq!(FitResult::from_json(&text).unwrap(), res);
        assert!(
            FitResult::from_json(&text.replacen("\"version\": 1", "\"version\": 9", 1)).is_err()
        );
    }
}
