//! Synthetic training corpora and fitting scenarios with known ground truth.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pdm::{
    generate_shape, similarity_basis, PdmParams, PointDistributionModel, SIMILARITY_DIM,
};
use crate::response::{render_ideal_stack, ResponseStack, DEFAULT_SIGMA};
use crate::shape::{apply_similarity, Shape, SimilarityTransform};

/// Pose placements tried before [`sample_scenario`] gives up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;

pub const FACE68_LEFT_EYE: std::ops::Range<usize> = 36..42;
pub const FACE68_RIGHT_EYE: std::ops::Range<usize> = 42..48;
/// Outer eye corners of the 68-point layout.
pub const FACE68_OUTER_CORNERS: [usize; 2] = [36, 45];

/// A 68-point face in the usual iBUG ordering, about 120 px wide, centered near the origin.
pub fn face68() -> Shape {
    use std::f64::consts::PI;
    let mut pts = Vec::with_capacity(68);
    for k in 0..17 {
        let t = PI * k as f64 / 16.0;
        pts.push([-60.0 * t.cos(), -10.0 + 65.0 * t.sin()]);
    }
    for j in 0..5 {
        let u = j as f64 / 4.0;
        pts.push([-48.0 + 36.0 * u, -38.0 - 6.0 * (PI * u).sin()]);
    }
    for j in 0..5 {
        let u = j as f64 / 4.0;
        pts.push([12.0 + 36.0 * u, -38.0 - 6.0 * (PI * u).sin()]);
    }
    for y in [-25.0, -16.0, -7.0, 2.0] {
        pts.push([0.0, y]);
    }
    for (x, y) in [
        (-12.0, 8.0),
        (-6.0, 10.0),
        (0.0, 12.0),
        (6.0, 10.0),
        (12.0, 8.0),
    ] {
        pts.push([x, y]);
    }
    for cx in [-28.0, 28.0] {
        for (dx, dy) in [
            (-10.0, 0.0),
            (-4.0, -5.0),
            (4.0, -5.0),
            (10.0, 0.0),
            (4.0, 4.0),
            (-4.0, 4.0),
        ] {
            pts.push([cx + dx, -22.0 + dy]);
        }
    }
    for (count, rx, ry) in [(12, 24.0, 10.0), (8, 14.0, 5.0)] {
        for k in 0..count {
            let t = PI + 2.0 * PI * k as f64 / count as f64;
            pts.push([rx * t.cos(), 30.0 + ry * t.sin()]);
        }
    }
    Shape::from_points(&pts).expect("static layout")
}

/// Ranges for a random similarity pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseJitter {
    /// Inclusive scale range.
    pub scale: [f64; 2],
    /// Maximum absolute rotation in radians.
    pub rotation: f64,
    /// Maximum absolute translation per axis in pixels.
    pub translation: f64,
}

impl Default for PoseJitter {
    fn default() -> Self {
        PoseJitter {
            scale: [0.95, 1.05],
            rotation: 0.1,
            translation: 8.0,
        }
    }
}

impl PoseJitter {
    fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "bad scale range [{lo}, {hi}]"
            )));
        }
        if !(self.rotation >= 0.0 && self.rotation.is_finite()) {
            return Err(Error::InvalidConfig(
                "rotation jitter must be non-negative".into(),
            ));
        }
        if !(self.translation >= 0.0 && self.translation.is_finite()) {
            return Err(Error::InvalidConfig(
                "translation jitter must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Scale, angle and translation offset drawn uniformly from the ranges.
    fn draw<R: Rng>(&self, rng: &mut R) -> (f64, f64, [f64; 2]) {
        let uniform = |rng: &mut R, a: f64| {
            if a > 0.0 {
                rng.random_range(-a..=a)
            } else {
                0.0
            }
        };
        let [lo, hi] = self.scale;
        let scale = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        let angle = uniform(rng, self.rotation);
        let tx = uniform(rng, self.translation);
        let ty = uniform(rng, self.translation);
        (scale, angle, [tx, ty])
    }
}

/// Linear shape generator for PDM training corpora.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub base: Shape,
    /// Standard deviation of each mode coefficient, in pixels.
    pub mode_std: Vec<f64>,
    pub pose: PoseJitter,
    /// Rescale the drawn coefficients so their sample covariance equals the target
    /// spectrum exactly. Needs more shapes than active modes; ignored otherwise.
    pub whiten: bool,
    pub seed: u64,
}

impl GeneratorSpec {
    /// [`face68`] with ten modes of variance `3600 (1 - 0.05 j)` px², `j = 0..9`.
    ///
    /// The spectrum is flat enough that all ten modes are needed to retain 95% of the
    /// variance, and large against the default fitting bandwidth.
    pub fn face68_reference(seed: u64) -> Self {
        let std = (0..10)
            .map(|j| (3600.0 * (1.0 - 0.05 * j as f64)).sqrt())
            .collect();
        Self::face68(std, seed)
    }

    /// [`face68`] with the given mode deviations and a moderate training pose range.
    pub fn face68(mode_std: Vec<f64>, seed: u64) -> Self {
        GeneratorSpec {
            base: face68(),
            mode_std,
            pose: PoseJitter {
                scale: [0.9, 1.1],
                rotation: 0.2,
                translation: 20.0,
            },
            whiten: true,
            seed,
        }
    }
}

/// Output of [`make_training_shapes`].
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub shapes: Vec<Shape>,
    /// Generator modes as orthonormal columns, orthogonal to the base's similarity span.
    pub modes: DMatrix<f64>,
    /// Variance of each mode coefficient (`mode_std` squared).
    pub spectrum: Vec<f64>,
}

/// Draws `count` shapes `pose(base + modes c)` with independent mode coefficients.
pub fn make_training_shapes(spec: &GeneratorSpec, count: usize) -> Result<TrainingSet> {
    spec.pose.validate()?;
    if count < 2 {
        return Err(Error::InsufficientData(format!(
            "{count} shapes requested, need at least 2"
        )));
    }
    if spec.mode_std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::InvalidConfig(
            "mode deviations must be finite and non-negative".into(),
        ));
    }
    let n = spec.base.n();
    let k = spec.mode_std.len();
    if k > 2 * n - SIMILARITY_DIM {
        return Err(Error::InvalidConfig(format!(
            "{k} modes exceed the {} free directions",
            2 * n - SIMILARITY_DIM
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.base.centroid();
    let base = spec.base.translated(-c[0], -c[1]).to_vector();
    let modes = random_modes(&base, k, &mut rng);

    let mut coeffs = DMatrix::from_fn(count, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let active: Vec<usize> = (0..k).filter(|&j| spec.mode_std[j] > 0.0).collect();
    if spec.whiten && count > active.len() && !active.is_empty() {
        let mut block = DMatrix::from_fn(count, active.len(), |r, a| coeffs[(r, active[a])]);
        for mut col in block.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        let q = block.qr().q();
        let factor = ((count - 1) as f64).sqrt();
        for (a, &j) in active.iter().enumerate() {
            coeffs.set_column(j, &(q.column(a) * factor));
        }
    }
    for j in 0..k {
        let mut col = coeffs.column_mut(j);
        col *= spec.mode_std[j];
    }

    let shapes = (0..count)
        .map(|r| {
            let local = Shape::from_vector(&(&base + &modes * coeffs.row(r).transpose()))?;
            let (scale, angle, t) = spec.pose.draw(&mut rng);
            apply_similarity(&SimilarityTransform::new(scale, angle, t)?, &local)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingSet {
        shapes,
        modes,
        spectrum: spec.mode_std.iter().map(|s| s * s).collect(),
    })
}

fn random_modes<R: Rng>(base: &DVector<f64>, k: usize, rng: &mut R) -> DMatrix<f64> {
    let sim = similarity_basis(base);
    let dim = base.len();
    let mut modes = DMatrix::zeros(dim, k);
    for j in 0..k {
        let mut v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        for _ in 0..2 {
            v -= &sim * (sim.transpose() * &v);
            for i in 0..j {
                let c = modes.column(i);
                v -= c * c.dot(&v);
            }
        }
        v /= v.norm();
        modes.set_column(j, &v);
    }
    modes
}

/// Everything that determines a scenario besides the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    /// Uniform noise half-width as a fraction of the ideal peak value.
    pub noise_amplitude: f64,
    pub occluded_fraction: f64,
    pub pose: PoseJitter,
    /// Mode coefficients are drawn from `U(-mode_scale sqrt(l), mode_scale sqrt(l))`.
    pub mode_scale: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            height: 256,
            width: 256,
            sigma: DEFAULT_SIGMA,
            noise_amplitude: 0.0,
            occluded_fraction: 0.0,
            pose: PoseJitter::default(),
            mode_scale: 2.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.height == 0 || self.width == 0 {
            return bad("canvas must be non-empty");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        if !(0.0..=1.0).contains(&self.noise_amplitude) {
            return bad("noise_amplitude must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.occluded_fraction) {
            return bad("occluded_fraction must lie in [0, 1]");
        }
        if !(self.mode_scale >= 0.0 && self.mode_scale.is_finite()) {
            return bad("mode_scale must be non-negative");
        }
        self.pose.validate()
    }
}

/// A rendered stack with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub truth: Shape,
    pub truth_params: PdmParams,
    /// Pose applied to the model mean; deformation is added in the model frame.
    pub pose: SimilarityTransform,
    pub stack: ResponseStack,
    pub occluded: Vec<bool>,
}

/// Samples a truth shape from the model, places it on the canvas and renders its maps.
///
/// The truth is `pose(mean) + Phi q`, so it lies in the model span. Visible maps get
/// uniform noise in `[-A, A]` with `A = noise_amplitude * peak`, clipped at zero.
pub fn sample_scenario(model: &PointDistributionModel, cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = model.n();
    let mean_c = model.mean_shape().centroid();
    let center = [cfg.width as f64 / 2.0, cfg.height as f64 / 2.0];

    let mut placed = None;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let mut p = DVector::zeros(model.param_len());
        for (j, &l) in model.eigenvalues().iter().enumerate() {
            let a = cfg.mode_scale * l.sqrt();
            if a > 0.0 {
                p[SIMILARITY_DIM + j] = rng.random_range(-a..=a);
            }
        }
        let (scale, angle, offset) = cfg.pose.draw(&mut rng);
        // Rotate and scale about the mean's centroid, then move it to the canvas center.
        let (s, c) = angle.sin_cos();
        let rotated = [
            scale * (c * mean_c[0] - s * mean_c[1]),
            scale * (s * mean_c[0] + c * mean_c[1]),
        ];
        let pose = SimilarityTransform::new(
            scale,
            angle,
            [
                center[0] + offset[0] - rotated[0],
                center[1] + offset[1] - rotated[1],
            ],
        )?;
        let rigid = model.similarity_params(&pose)?;
        p.rows_mut(0, SIMILARITY_DIM)
            .copy_from(&rigid.as_vector().rows(0, SIMILARITY_DIM));
        let params = PdmParams::new(p)?;
        let truth = generate_shape(model, &params)?;
        let inside = truth.points().all(|[x, y]| {
            x >= 0.0 && y >= 0.0 && x <= (cfg.width - 1) as f64 && y <= (cfg.height - 1) as f64
        });
        if inside {
            placed = Some((truth, params, pose));
            break;
        }
    }
    let (truth, truth_params, pose) =
        placed.ok_or(Error::ScenarioPlacement(MAX_PLACEMENT_ATTEMPTS))?;

    let k = (cfg.occluded_fraction * n as f64).round() as usize;
    let mut occluded = vec![false; n];
    for i in sample(&mut rng, n, k.min(n)) {
        occluded[i] = true;
    }
    let visible: Vec<bool> = occluded.iter().map(|o| !o).collect();
    let rendered = render_ideal_stack(&truth, Some(&visible), cfg.height, cfg.width, cfg.sigma)?;

    let stack = if cfg.noise_amplitude > 0.0 {
        let peak = 1.0 / (2.0 * std::f64::consts::PI * cfg.sigma * cfg.sigma);
        let a = (cfg.noise_amplitude * peak) as f32;
        let plane = cfg.height * cfg.width;
        let mut data = rendered.data().to_vec();
        for (i, map) in data.chunks_mut(plane).enumerate() {
            if occluded[i] {
                continue;
            }
            for v in map {
                *v = (*v + rng.random_range(-a..=a)).max(0.0);
            }
        }
        ResponseStack::new(n, cfg.height, cfg.width, data)?
    } else {
        rendered
    };

    Ok(Scenario {
        truth,
        truth_params,
        pose,
        stack,
        occluded,
    })
}

/// Text sidecar describing how a scenario was drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioMeta {
    pub seed: u64,
    pub n: usize,
    pub pose: SimilarityTransform,
    /// Sorted indices of occluded landmarks.
    pub occluded: Vec<usize>,
}

impl ScenarioMeta {
    pub fn new(seed: u64, scenario: &Scenario) -> Self {
        ScenarioMeta {
            seed,
            n: scenario.truth.n(),
            pose: scenario.pose,
            occluded: (0..scenario.occluded.len())
                .filter(|&i| scenario.occluded[i])
                .collect(),
        }
    }

    pub fn occlusion_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n];
        for &i in &self.occluded {
            mask[i] = true;
        }
        mask
    }
}

/// `key: value` lines; numbers use the shortest round-trip representation.
pub fn format_meta(meta: &ScenarioMeta) -> String {
    let t = &meta.pose;
    let occluded: Vec<String> = meta.occluded.iter().map(usize::to_string).collect();
    format!(
        "seed: {}\nn: {}\npose: {} {} {} {}\noccluded: {}\n",
        meta.seed,
        meta.n,
        t.scale(),
        t.angle(),
        t.translation()[0],
        t.translation()[1],
        occluded.join(" ")
    )
}

pub fn parse_meta(text: &str) -> Result<ScenarioMeta> {
    let err = |m: String| Error::format("meta", m);
    let mut seed = None;
    let mut n = None;
    let mut pose = None;
    let mut occluded = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| err(format!("no key in `{line}`")))?;
        let value = value.trim();
        match key.trim() {
            "seed" => seed = Some(value.parse::<u64>().map_err(|e| err(e.to_string()))?),
            "n" => n = Some(value.parse::<usize>().map_err(|e| err(e.to_string()))?),
            "pose" => {
                let v = value
                    .split_whitespace()
                    .map(str::parse::<f64>)
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| err(e.to_string()))?;
                if v.len() != 4 {
                    return Err(err(format!("pose needs 4 numbers, got {}", v.len())));
                }
                pose = Some(SimilarityTransform::new(v[0], v[1], [v[2], v[3]])?);
            }
            "occluded" => {
                occluded = Some(
                    value
                        .split_whitespace()
                        .map(str::parse::<usize>)
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| err(e.to_string()))?,
                )
            }
            other => return Err(err(format!("unknown key `{other}`"))),
        }
    }
    let n = n.ok_or_else(|| err("missing n".into()))?;
    let mut occluded = occluded.ok_or_else(|| err("missing occluded".into()))?;
    occluded.sort_unstable();
    occluded.dedup();
    if occluded.last().is_some_and(|&i| i >= n) {
        return Err(err("occluded index out of range".into()));
    }
    Ok(ScenarioMeta {
        seed: seed.ok_or_else(|| err("missing seed".into()))?,
        n,
        pose: pose.ok_or_else(|| err("missing pose".into()))?,
        occluded,
    })
}
