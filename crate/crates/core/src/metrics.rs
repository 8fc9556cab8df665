//! Landmark accuracy metrics: NME, MAPE, CED/AUC, failure rate and occlusion precision/recall.

use serde::{Deserialize, Serialize};

use crate::doc::to_precise_json;
use crate::error::{Error, Result};
use crate::shape::{check_same_n, Shape};
use crate::synth::{FACE68_LEFT_EYE, FACE68_OUTER_CORNERS, FACE68_RIGHT_EYE};

pub const DEFAULT_CUTOFF: f64 = 0.08;
pub const DEFAULT_CED_SAMPLES: usize = 1000;

/// Mean Euclidean error over the masked landmarks, divided by `d`.
pub fn nme(pred: &Shape, truth: &Shape, d: f64, mask: &[bool]) -> Result<f64> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "normalizer must be positive, got {d}"
        )));
    }
    Ok(masked_mean_error(pred, truth, mask)? / d)
}

/// Mean absolute point error in pixels over the masked landmarks.
pub fn mape(pred: &Shape, truth: &Shape, mask: &[bool]) -> Result<f64> {
    masked_mean_error(pred, truth, mask)
}

fn masked_mean_error(pred: &Shape, truth: &Shape, mask: &[bool]) -> Result<f64> {
    check_same_n(pred, truth)?;
    if mask.len() != truth.n() {
        return Err(Error::LandmarkCountMismatch {
            expected: truth.n(),
            found: mask.len(),
        });
    }
    let errors = pred.landmark_errors(truth)?;
    let (sum, count) = errors
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, c), (e, _)| (s + e, c + 1));
    if count == 0 {
        return Err(Error::EmptyInput("landmark mask"));
    }
    Ok(sum / count as f64)
}

/// Landmark indices that define the face-scale normalizers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkGroups {
    pub left_eye: Vec<usize>,
    pub right_eye: Vec<usize>,
    pub outer_corners: [usize; 2],
}

impl LandmarkGroups {
    pub fn face68() -> Self {
        LandmarkGroups {
            left_eye: FACE68_LEFT_EYE.collect(),
            right_eye: FACE68_RIGHT_EYE.collect(),
            outer_corners: FACE68_OUTER_CORNERS,
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        let all = self
            .left_eye
            .iter()
            .chain(&self.right_eye)
            .chain(&self.outer_corners);
        if let Some(&i) = all.clone().find(|&&i| i >= n) {
            return Err(Error::InvalidConfig(format!(
                "landmark group index {i} out of range for n = {n}"
            )));
        }
        if self.left_eye.is_empty() || self.right_eye.is_empty() {
            return Err(Error::InvalidConfig("eye groups must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalizer {
    /// Distance between the outer eye corners.
    #[default]
    InterOcular,
    /// Distance between the eye-landmark centroids.
    InterPupil,
    /// Square root of the truth bounding-box area.
    BboxArea,
}

/// Normalizing distance of `truth` in pixels.
pub fn normalizer(truth: &Shape, kind: Normalizer, groups: &LandmarkGroups) -> Result<f64> {
    groups.check(truth.n())?;
    let centroid = |idx: &[usize]| {
        let k = idx.len() as f64;
        idx.iter().fold([0.0, 0.0], |a, &i| {
            let p = truth.point(i);
            [a[0] + p[0] / k, a[1] + p[1] / k]
        })
    };
    let dist = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]);
    let d = match kind {
        Normalizer::InterOcular => dist(
            truth.point(groups.outer_corners[0]),
            truth.point(groups.outer_corners[1]),
        ),
        Normalizer::InterPupil => dist(centroid(&groups.left_eye), centroid(&groups.right_eye)),
        Normalizer::BboxArea => {
            let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for p in truth.points() {
                for a in 0..2 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
            ((hi[0] - lo[0]) * (hi[1] - lo[1])).sqrt()
        }
    };
    if d > 0.0 {
        Ok(d)
    } else {
        Err(Error::InvalidConfig(format!(
            "{kind:?} normalizer is zero for this shape"
        )))
    }
}

/// Cumulative error distribution with its area and failure rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ced {
    /// Uniform grid on `[0, cutoff]`, both ends included.
    pub thresholds: Vec<f64>,
    /// Fraction of errors `<= threshold`.
    pub fractions: Vec<f64>,
    /// Area under the CED on `[0, cutoff]` divided by `cutoff`.
    pub auc: f64,
    /// Fraction of errors `> cutoff`.
    pub failure_rate: f64,
}

/// CED sampled on `samples` thresholds, plus AUC and failure rate at `cutoff`.
///
/// The AUC integrates the exact step-function CED: each error `e` contributes
/// `max(0, cutoff - e) / cutoff`, so the result does not depend on the sample grid.
pub fn ced_auc(errors: &[f64], cutoff: f64, samples: usize) -> Result<Ced> {
    if errors.is_empty() {
        return Err(Error::EmptyInput("error list"));
    }
    if errors.iter().any(|e| !(*e >= 0.0) || e.is_infinite()) {
        return Err(Error::InvalidConfig(
            "errors must be finite and non-negative".into(),
        ));
    }
    if !(cutoff > 0.0 && cutoff.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "cutoff must be positive, got {cutoff}"
        )));
    }
    if samples < 2 {
        return Err(Error::InvalidConfig("CED needs at least 2 samples".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let count = sorted.len() as f64;
    let thresholds: Vec<f64> = (0..samples)
        .map(|k| {
            if k + 1 == samples {
                cutoff
            } else {
                cutoff * k as f64 / (samples - 1) as f64
            }
        })
        .collect();
    let fractions = thresholds
        .iter()
        .map(|&t| sorted.partition_point(|&e| e <= t) as f64 / count)
        .collect();
    let auc = sorted
        .iter()
        .map(|&e| (cutoff - e).max(0.0) / cutoff)
        .sum::<f64>()
        / count;
    let failure_rate = sorted.iter().filter(|&&e| e > cutoff).count() as f64 / count;
    Ok(Ced {
        thresholds,
        fractions,
        auc,
        failure_rate,
    })
}

/// Precision and recall of `w < threshold` as an occlusion detector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    /// Absent when nothing is predicted occluded.
    pub precision: Option<f64>,
    /// Absent when nothing is truly occluded.
    pub recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionPr {
    pub points: Vec<PrPoint>,
    /// Point with the smallest precision that is still `>= 0.8`.
    pub at_precision_80: Option<PrPoint>,
}

pub fn occlusion_pr_point(
    weights: &[f64],
    truth_occluded: &[bool],
    threshold: f64,
) -> Result<PrPoint> {
    if weights.len() != truth_occluded.len() {
        return Err(Error::DimensionMismatch {
            expected: truth_occluded.len(),
            found: weights.len(),
        });
    }
    if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(Error::InvalidConfig("weights must lie in [0, 1]".into()));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&w, &occ) in weights.iter().zip(truth_occluded) {
        match (w < threshold, occ) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(PrPoint {
        threshold,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
    })
}

/// Sweeps `thresholds` and picks the point closest to 80% precision from above.
pub fn occlusion_pr(
    weights: &[f64],
    truth_occluded: &[bool],
    thresholds: &[f64],
) -> Result<OcclusionPr> {
    let points = thresholds
        .iter()
        .map(|&t| occlusion_pr_point(weights, truth_occluded, t))
        .collect::<Result<Vec<_>>>()?;
    let at_precision_80 = points
        .iter()
        .filter(|p| p.precision.is_some_and(|v| v >= 0.8) && p.recall.is_some())
        .min_by(|a, b| {
            a.precision
                .unwrap()
                .total_cmp(&b.precision.unwrap())
                .then(b.recall.unwrap().total_cmp(&a.recall.unwrap()))
        })
        .copied();
    Ok(OcclusionPr {
        points,
        at_precision_80,
    })
}

/// One prediction and its ground truth.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub pred: Shape,
    pub truth: Shape,
    /// Ground-truth occlusion; occluded landmarks are left out of NME and MAPE.
    pub occluded: Option<Vec<bool>>,
    /// Predicted confidences, needed for occlusion precision/recall.
    pub weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub normalizer: Normalizer,
    pub groups: LandmarkGroups,
    pub cutoff: f64,
    pub ced_samples: usize,
    pub occlusion_threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            normalizer: Normalizer::default(),
            groups: LandmarkGroups::face68(),
            cutoff: DEFAULT_CUTOFF,
            ced_samples: DEFAULT_CED_SAMPLES,
            occlusion_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image_nme: Vec<f64>,
    pub mean_nme: f64,
    /// Mean over images of the per-image mean pixel error.
    pub mape: f64,
    pub cutoff: f64,
    pub auc: f64,
    pub failure_rate: f64,
    pub ced: Vec<[f64; 2]>,
    pub occlusion_threshold: f64,
    /// Pooled over every landmark of every image that carries both occlusion truth and weights.
    pub occlusion_precision: Option<f64>,
    pub occlusion_recall: Option<f64>,
}

impl EvalReport {
    pub fn build(items: &[EvalItem], opts: &EvalOptions) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyInput("evaluation set"));
        }
        let mut per_image_nme = Vec::with_capacity(items.len());
        let mut mapes = Vec::with_capacity(items.len());
        let (mut weights, mut occluded) = (Vec::new(), Vec::new());
        for item in items {
            let mask: Vec<bool> = match &item.occluded {
                Some(o) => o.iter().map(|x| !x).collect(),
                None => vec![true; item.truth.n()],
            };
            let d = normalizer(&item.truth, opts.normalizer, &opts.groups)?;
            per_image_nme.push(nme(&item.pred, &item.truth, d, &mask)?);
            mapes.push(mape(&item.pred, &item.truth, &mask)?);
            if let (Some(w), Some(o)) = (&item.weights, &item.occluded) {
                if w.len() != o.len() {
                    return Err(Error::DimensionMismatch {
                        expected: o.len(),
                        found: w.len(),
                    });
                }
                weights.extend_from_slice(w);
                occluded.extend_from_slice(o);
            }
        }
        let ced = ced_auc(&per_image_nme, opts.cutoff, opts.ced_samples)?;
        let pr = if weights.is_empty() {
            None
        } else {
            Some(occlusion_pr_point(
                &weights,
                &occluded,
                opts.occlusion_threshold,
            )?)
        };
        let count = items.len() as f64;
        Ok(EvalReport {
            mean_nme: per_image_nme.iter().sum::<f64>() / count,
            per_image_nme,
            mape: mapes.iter().sum::<f64>() / count,
            cutoff: opts.cutoff,
            auc: ced.auc,
            failure_rate: ced.failure_rate,
            ced: ced
                .thresholds
                .iter()
                .zip(&ced.fractions)
                .map(|(&t, &f)| [t, f])
                .collect(),
            occlusion_threshold: opts.occlusion_threshold,
            occlusion_precision: pr.and_then(|p| p.precision),
            occlusion_recall: pr.and_then(|p| p.recall),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(to_precise_json(self)?)
    }

    /// Two whitespace-separated columns: threshold and cumulative fraction.
    pub fn ced_table(&self) -> String {
        let mut out = String::from("# threshold fraction\n");
        for [t, f] in &self.ced {
            out.push_str(&format!("{t:.17e} {f:.17e}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::{apply_similarity, SimilarityTransform};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_shape(rng: &mut ChaCha8Rng, n: usize) -> Shape {
        Shape::new((0..2 * n).map(|_| rng.random_range(0.0..100.0)).collect()).unwrap()
    }

    #[test]
    fn nme_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_shape(&mut rng, 10);
        assert_eq!(nme(&t, &t, 5.0, &[true; 10]).unwrap(), 0.0);

        let d = 7.5;
        let moved = Shape::new(
            t.coords()
                .chunks(2)
                .enumerate()
                .flat_map(|(i, p)| {
                    let a = i as f64;
                    [p[0] + d * a.cos(), p[1] + d * a.sin()]
                })
                .collect(),
        )
        .unwrap();
        assert!((nme(&moved, &t, d, &[true; 10]).unwrap() - 1.0).abs() < 1e-12);

        let p = random_shape(&mut rng, 10);
        let mask: Vec<bool> = (0..10).map(|i| i % 3 != 0).collect();
        let mut sum = 0.0;
        let mut k = 0.0;
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            sum += ((p.coords()[2 * i] - t.coords()[2 * i]).powi(2)
                + (p.coords()[2 * i + 1] - t.coords()[2 * i + 1]).powi(2))
            .sqrt();
            k += 1.0;
        }
        assert!((nme(&p, &t, 3.0, &mask).unwrap() - sum / k / 3.0).abs() < 1e-12);

        assert!(nme(&p, &t, 0.0, &mask).is_err());
        assert!(matches!(
            nme(&p, &t, 1.0, &[false; 10]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn normalizers() {
        let f = crate::synth::face68();
        let g = LandmarkGroups::face68();
        assert!((normalizer(&f, Normalizer::InterOcular, &g).unwrap() - 76.0).abs() < 1e-12);
        assert!((normalizer(&f, Normalizer::InterPupil, &g).unwrap() - 56.0).abs() < 1e-12);
        let bb = normalizer(&f, Normalizer::BboxArea, &g).unwrap();
        let (xs, ys): (Vec<f64>, Vec<f64>) = f.points().map(|p| (p[0], p[1])).unzip();
        let w = xs.iter().cloned().fold(f64::MIN, f64::max)
            - xs.iter().cloned().fold(f64::MAX, f64::min);
        let h = ys.iter().cloned().fold(f64::MIN, f64::max)
            - ys.iter().cloned().fold(f64::MAX, f64::min);
        assert!((bb - (w * h).sqrt()).abs() < 1e-12);
        let small = Shape::from_points(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(normalizer(&small, Normalizer::InterOcular, &g).is_err());
    }

    #[test]
    fn ced_cases() {
        let c = ced_auc(&[0.0; 5], 0.08, 1000).unwrap();
        assert!(c.fractions.iter().all(|&f| f == 1.0));
        assert_eq!((c.auc, c.failure_rate), (1.0, 0.0));

        let c = ced_auc(&[0.5, 0.2, 0.09], 0.08, 1000).unwrap();
        assert_eq!((c.auc, c.failure_rate), (0.0, 1.0));

        let c = ced_auc(&[0.02, 0.04, 0.10], 0.08, 1000).unwrap();
        assert!((c.failure_rate - 1.0 / 3.0).abs() < 1e-15);
        // step CED: 0 on [0,0.02), 1/3 on [0.02,0.04), 2/3 on [0.04,0.08]
        let expected = (1.0 / 3.0 * 0.02 + 2.0 / 3.0 * 0.04) / 0.08;
        assert!((c.auc - expected).abs() < 1e-12);
        assert_eq!(c.thresholds.len(), 1000);
        assert_eq!(*c.thresholds.last().unwrap(), 0.08);

        assert!(ced_auc(&[], 0.08, 10).is_err());
        assert!(ced_auc(&[0.1], 0.0, 10).is_err());
        assert!(ced_auc(&[-0.1], 0.08, 10).is_err());
    }

    #[test]
    fn occlusion_cases() {
        let truth = [true, false, false, true, false];
        let w = [0.0, 1.0, 1.0, 0.0, 1.0];
        let p = occlusion_pr_point(&w, &truth, 0.5).unwrap();
        assert_eq!((p.precision, p.recall), (Some(1.0), Some(1.0)));

        let p = occlusion_pr_point(&[0.3; 5], &truth, 0.5).unwrap();
        assert_eq!(p.precision, Some(0.4));
        assert_eq!(p.recall, Some(1.0));
        let p = occlusion_pr_point(&[0.3; 5], &truth, 0.1).unwrap();
        assert_eq!(p.precision, None);

        let p = occlusion_pr_point(&w, &[false; 5], 0.5).unwrap();
        assert_eq!(p.recall, None);
        assert!(occlusion_pr_point(&[1.5; 5], &truth, 0.5).is_err());
    }

    #[test]
    fn occlusion_sweep_matches_confusion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let truth: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
        let thresholds: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
        let pr = occlusion_pr(&w, &truth, &thresholds).unwrap();
        for p in &pr.points {
            let mut m = [[0usize; 2]; 2];
            for i in 0..n {
                m[(w[i] < p.threshold) as usize][truth[i] as usize] += 1;
            }
            let (tp, fp, fneg) = (m[1][1], m[1][0], m[0][1]);
            if tp + fp > 0 {
                assert!((p.precision.unwrap() - tp as f64 / (tp + fp) as f64).abs() < 1e-12);
            }
            assert!((p.recall.unwrap() - tp as f64 / (tp + fneg) as f64).abs() < 1e-12);
        }
        // random weights cannot reach 80% precision against a 20% base rate
        assert!(pr.at_precision_80.is_none());
    }

    #[test]
    fn precision_80_pick() {
        let truth = [
            true, true, true, true, false, false, false, false, false, false,
        ];
        let w = [0.1, 0.2, 0.3, 0.45, 0.4, 0.6, 0.7, 0.8, 0.9, 0.95];
        let pr = occlusion_pr(&w, &truth, &[0.25, 0.35, 0.42, 0.5, 0.65]).unwrap();
        let best = pr.at_precision_80.unwrap();
        assert_eq!(best.threshold, 0.5);
        assert_eq!(best.precision, Some(0.8));
        assert_eq!(best.recall, Some(1.0));
    }

    #[test]
    fn report_aggregates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = crate::synth::face68();
        let items: Vec<EvalItem> = (0..10)
            .map(|_| {
                let pred = Shape::new(
                    f.coords()
                        .iter()
                        .map(|c| c + rng.random_range(-2.0..2.0))
                        .collect(),
                )
                .unwrap();
                EvalItem {
                    pred,
                    truth: f.clone(),
                    occluded: None,
                    weights: None,
                }
            })
            .collect();
        let r = EvalReport::build(&items, &EvalOptions::default()).unwrap();
        let oracle: f64 = items
            .iter()
            .map(|it| it.pred.mean_landmark_error(&it.truth).unwrap() / 76.0)
            .sum::<f64>()
            / 10.0;
        assert!((r.mean_nme - oracle).abs() < 1e-12);
        assert!(r.occlusion_precision.is_none());
        let table = r.ced_table();
        assert_eq!(table.lines().count(), 1001);
    }

    proptest! {
        #[test]
        fn nme_is_similarity_covariant(seed in 0u64..1000, scale in 0.1f64..10.0, angle in -3.0f64..3.0,
                                        tx in -50.0f64..50.0, ty in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_shape(&mut rng, 12);
            let t = random_shape(&mut rng, 12);
            let s = SimilarityTransform::new(scale, angle, [tx, ty]).unwrap();
            let mask = vec![true; 12];
            let a = nme(&p, &t, 4.0, &mask).unwrap();
            let b = nme(&apply_similarity(&s, &p).unwrap(), &apply_similarity(&s, &t).unwrap(), 4.0 * scale, &mask).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn auc_does_not_increase_with_an_error(errors in prop::collection::vec(0.0f64..0.2, 1..40),
                                               idx in 0usize..40, bump in 0.0f64..0.1) {
            let before = ced_auc(&errors, 0.08, 100).unwrap();
            let mut worse = errors.clone();
            let i = idx % worse.len();
            worse[i] += bump;
            let after = ced_auc(&worse, 0.08, 100).unwrap();
            prop_assert!(after.auc <= before.auc + 1e-15);
        }

        #[test]
        fn ced_invariants(errors in prop::collection::vec(0.0f64..0.2, 1..60), samples in 2usize..200) {
            let c = ced_auc(&errors, 0.08, samples).unwrap();
            prop_assert!(c.fractions.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(c.fractions.iter().all(|f| (0.0..=1.0).contains(f)));
            prop_assert!((0.0..=1.0).contains(&c.auc));
            prop_assert!((c.failure_rate - (1.0 - c.fractions.last().unwrap())).abs() < 1e-12);
        }
    }
}
