//! Trajectory metrics, per-timestamp curves and hardness stratification.
//!
//! Conventions:
//! - RMSE is the root of the mean squared error over all `T * N * 2`
//!   coordinates (squared error taken per coordinate).
//! - ADE and FDE measure the Euclidean norm of the whole flattened `2N`
//!   frame difference.
//! - PCK counts joint instances whose 2D error is strictly below `delta`.
//!   Coordinates are already image-normalized, so no further rescaling is
//!   applied before thresholding.
//!
//! Dataset-level values are means of the per-sample values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::PoseSequence;

/// Fraction of test samples that forms the "hardest" subset.
pub const HARDEST_FRACTION: f64 = 0.10;

fn check(pred: &PoseSequence, gt: &PoseSequence) -> Result<()> {
    if pred.matrix().dim() != gt.matrix().dim() {
        return Err(Error::shape(
            format!("{:?}", gt.matrix().dim()),
            format!("{:?}", pred.matrix().dim()),
        ));
    }
    Ok(())
}

fn frame_distance(pred: &PoseSequence, gt: &PoseSequence, t: usize) -> f64 {
    pred.frame(t)
        .iter()
        .zip(gt.frame(t).iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn joint_distance(pred: &PoseSequence, gt: &PoseSequence, t: usize, k: usize) -> f64 {
    let (px, py) = pred.joint(t, k);
    let (gx, gy) = gt.joint(t, k);
    ((px - gx).powi(2) + (py - gy).powi(2)).sqrt()
}

pub fn rmse(pred: &PoseSequence, gt: &PoseSequence) -> Result<f64> {
    check(pred, gt)?;
    let sq: f64 = pred
        .matrix()
        .iter()
        .zip(gt.matrix().iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok((sq / pred.matrix().len() as f64).sqrt())
}

pub fn pck(pred: &PoseSequence, gt: &PoseSequence, delta: f64) -> Result<f64> {
    check(pred, gt)?;
    if !(delta > 0.0) {
        return Err(Error::Config(format!("PCK threshold must be positive, got {delta}")));
    }
    let (horizon, joints) = (gt.horizon(), gt.num_joints());
    let mut hits = 0usize;
    for t in 0..horizon {
        for k in 0..joints {
            if joint_distance(pred, gt, t, k) < delta {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (horizon * joints) as f64)
}

pub fn ade(pred: &PoseSequence, gt: &PoseSequence) -> Result<f64> {
    check(pred, gt)?;
    let total: f64 = (0..gt.horizon()).map(|t| frame_distance(pred, gt, t)).sum();
    Ok(total / gt.horizon() as f64)
}

pub fn fde(pred: &PoseSequence, gt: &PoseSequence) -> Result<f64> {
    check(pred, gt)?;
    Ok(frame_distance(pred, gt, gt.horizon() - 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSet {
    pub rmse: f64,
    pub pck: f64,
    pub ade: f64,
    pub fde: f64,
}

impl MetricSet {
    pub fn of(pred: &PoseSequence, gt: &PoseSequence, delta: f64) -> Result<Self> {
        Ok(Self {
            rmse: rmse(pred, gt)?,
            pck: pck(pred, gt, delta)?,
            ade: ade(pred, gt)?,
            fde: fde(pred, gt)?,
        })
    }

    /// Mean over per-sample metric sets.
    pub fn mean(sets: &[MetricSet]) -> MetricSet {
        let n = sets.len().max(1) as f64;
        let sum = sets.iter().fold(MetricSet::default(), |acc, m| MetricSet {
            rmse: acc.rmse + m.rmse,
            pck: acc.pck + m.pck,
            ade: acc.ade + m.ade,
            fde: acc.fde + m.fde,
        });
        MetricSet {
            rmse: sum.rmse / n,
            pck: sum.pck / n,
            ade: sum.ade / n,
            fde: sum.fde / n,
        }
    }
}

/// Metric curves indexed by timestamp `t = 1..=T` (stored from index 0).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PerTimestamp {
    /// Mean frame displacement error at each timestamp.
    pub ade: Vec<f64>,
    pub pck: Vec<f64>,
}

pub fn per_timestamp_report(
    preds: &[PoseSequence],
    gts: &[PoseSequence],
    delta: f64,
) -> Result<PerTimestamp> {
    check_sets(preds, gts)?;
    let horizon = gts[0].horizon();
    let n = gts.len() as f64;
    let joints = gts[0].num_joints();
    let mut curve = PerTimestamp {
        ade: vec![0.0; horizon],
        pck: vec![0.0; horizon],
    };
    for (pred, gt) in preds.iter().zip(gts) {
        if gt.horizon() != horizon {
            return Err(Error::Contract("all sequences must share one horizon".into()));
        }
        for t in 0..horizon {
            curve.ade[t] += frame_distance(pred, gt, t);
            let hits = (0..joints)
                .filter(|&k| joint_distance(pred, gt, t, k) < delta)
                .count();
            curve.pck[t] += hits as f64;
        }
    }
    curve.ade.iter_mut().for_each(|v| *v /= n);
    curve.pck.iter_mut().for_each(|v| *v /= joints as f64 * n);
    Ok(curve)
}

fn check_sets(preds: &[PoseSequence], gts: &[PoseSequence]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::shape(
            format!("{} predictions", gts.len()),
            format!("{} predictions", preds.len()),
        ));
    }
    if gts.is_empty() {
        return Err(Error::Contract("no samples to evaluate".into()));
    }
    for (p, g) in preds.iter().zip(gts) {
        check(p, g)?;
    }
    Ok(())
}

/// Per-sample difficulty: for each joint, the variance across frames of its
/// displacement magnitude from the first ground-truth frame, averaged over
/// joints. A static sequence scores zero.
pub fn hardness_score(gt: &PoseSequence) -> f64 {
    let horizon = gt.horizon();
    let joints = gt.num_joints();
    let mut total = 0.0;
    for k in 0..joints {
        let (x0, y0) = gt.joint(0, k);
        let mags: Vec<f64> = (0..horizon)
            .map(|t| {
                let (x, y) = gt.joint(t, k);
                ((x - x0).powi(2) + (y - y0).powi(2)).sqrt()
            })
            .collect();
        let mean = mags.iter().sum::<f64>() / horizon as f64;
        total += mags.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / horizon as f64;
    }
    total / joints as f64
}

pub fn hardness_scores(gts: &[PoseSequence]) -> Vec<f64> {
    gts.iter().map(hardness_score).collect()
}

/// Number of samples in the top `fraction` of `n`.
pub fn hardest_count(n: usize, fraction: f64) -> usize {
    if n == 0 {
        return 0;
    }
    let k = (fraction * n as f64 - 1e-9).ceil().max(1.0) as usize;
    k.min(n)
}

/// Indices of the top `fraction` of samples by score, hardest first; equal
/// scores keep the lower index first.
pub fn select_hardest(scores: &[f64], fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let k = hardest_count(scores.len(), fraction);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardnessReport {
    pub fraction: f64,
    pub count: usize,
    pub indices: Vec<usize>,
    pub metrics: MetricSet,
}

/// Everything the harness reports for one method on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub num_samples: usize,
    pub horizon: usize,
    /// PCK threshold.
    pub delta: f64,
    pub rmse: f64,
    pub pck: f64,
    pub ade: f64,
    pub fde: f64,
    pub per_timestamp: PerTimestamp,
    pub hardest: HardnessReport,
    /// Codebook reconstruction RMSE on the same ground truth, for two-stage
    /// methods.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reconstruction_rmse: Option<f64>,
}

impl EvalReport {
    pub fn metrics(&self) -> MetricSet {
        MetricSet {
            rmse: self.rmse,
            pck: self.pck,
            ade: self.ade,
            fde: self.fde,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `t,ade,pck` rows with `t` starting at 1.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("t,ade,pck\n");
        for (t, (a, p)) in self
            .per_timestamp
            .ade
            .iter()
            .zip(&self.per_timestamp.pck)
            .enumerate()
        {
            out.push_str(&format!("{},{},{}\n", t + 1, a, p));
        }
        out
    }
}

pub fn evaluate(
    method: &str,
    preds: &[PoseSequence],
    gts: &[PoseSequence],
    delta: f64,
) -> Result<EvalReport> {
    check_sets(preds, gts)?;
    let per_sample = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| MetricSet::of(p, g, delta))
        .collect::<Result<Vec<_>>>()?;
    let overall = MetricSet::mean(&per_sample);
    let per_timestamp = per_timestamp_report(preds, gts, delta)?;
    let indices = select_hardest(&hardness_scores(gts), HARDEST_FRACTION)?;
    let hard: Vec<MetricSet> = indices.iter().map(|&i| per_sample[i]).collect();
    Ok(EvalReport {
        method: method.to_string(),
        num_samples: gts.len(),
        horizon: gts[0].horizon(),
        delta,
        rmse: overall.rmse,
        pck: overall.pck,
        ade: overall.ade,
        fde: overall.fde,
        per_timestamp,
        hardest: HardnessReport {
            fraction: HARDEST_FRACTION,
            count: indices.len(),
            metrics: MetricSet::mean(&hard),
            indices,
        },
        reconstruction_rmse: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::Pose;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(rng: &mut ChaCha8Rng, t: usize, joints: usize) -> PoseSequence {
        PoseSequence::from_matrix(Array2::from_shape_fn((t, 2 * joints), |_| rng.random_range(0.0..1.0)))
            .unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = seq(&mut rng, 5, 13);
        let m = MetricSet::of(&g, &g, 0.05).unwrap();
        assert_eq!(m, MetricSet { rmse: 0.0, pck: 1.0, ade: 0.0, fde: 0.0 });
    }

    #[test]
    fn constant_offset_is_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = seq(&mut rng, 6, 13);
        let p = g.translated(0.3, 0.4);
        // every joint is 0.5 away; squared error per coordinate averages
        // (0.09 + 0.16) / 2
        let expected = ((0.09f64 + 0.16) / 2.0).sqrt();
        assert!((rmse(&p, &g).unwrap() - expected).abs() < 1e-12);
        assert_eq!(pck(&p, &g, 0.5 - 1e-9).unwrap(), 0.0);
        assert_eq!(pck(&p, &g, 0.5 + 1e-9).unwrap(), 1.0);
    }

    #[test]
    fn single_frame_ade_is_fde() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (g, p) = (seq(&mut rng, 1, 21), seq(&mut rng, 1, 21));
        assert_eq!(ade(&p, &g).unwrap(), fde(&p, &g).unwrap());
    }

    #[test]
    fn pck_rejects_non_positive_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = seq(&mut rng, 2, 2);
        assert!(pck(&g, &g, 0.0).is_err());
    }

    #[test]
    fn static_sequence_is_easy() {
        let p = Pose::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(hardness_score(&PoseSequence::repeat(&p, 10).unwrap()), 0.0);
    }

    #[test]
    fn full_fraction_selects_everything() {
        let scores = vec![0.3, 0.1, 0.3, 0.9];
        assert_eq!(select_hardest(&scores, 1.0).unwrap(), vec![3, 0, 2, 1]);
        assert_eq!(select_hardest(&scores, 0.25).unwrap(), vec![3]);
        assert_eq!(hardest_count(200, 0.10), 20);
        assert_eq!(hardest_count(80, 0.10), 8);
    }

    #[test]
    fn flat_curve_for_constant_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gts: Vec<_> = (0..4).map(|_| seq(&mut rng, 8, 3)).collect();
        let preds: Vec<_> = gts.iter().map(|g| g.translated(0.01, 0.0)).collect();
        let curve = per_timestamp_report(&preds, &gts, 0.05).unwrap();
        let expected = (3.0f64 * 0.0001).sqrt();
        for v in &curve.ade {
            assert!((v - expected).abs() < 1e-12);
        }
        assert!(curve.pck.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn report_json_and_csv() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let gts: Vec<_> = (0..10).map(|_| seq(&mut rng, 4, 2)).collect();
        let preds: Vec<_> = (0..10).map(|_| seq(&mut rng, 4, 2)).collect();
        let report = evaluate("x", &preds, &gts, 0.1).unwrap();
        assert_eq!(report.hardest.count, 1);
        let back: EvalReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
        assert_eq!(report.curve_csv().lines().count(), 5);
    }
}
