//! Relative pose representation and the training objective.
//!
//! Each pose is summarized by a distance matrix `D` and a direction matrix
//! `Θ`, both supported only on skeleton edges. Entries off the adjacency
//! mask are exactly zero, so the full `N x N` double sums in the distance and
//! direction losses visit every undirected edge twice, once as `(i, j)` and
//! once as `(j, i)`.
//!
//! The final objective adds `θ` times the mean squared coordinate error,
//! averaged over all `B * T * 2N` elements, to the batch-mean relative loss.

use ndarray::{Array2, Array3, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{Pose, PoseSequence, SkeletonTopology};

/// Below this bone length the direction is the zero vector.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Symmetric, zero-diagonal matrix of bone lengths on the adjacency support.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    values: Array2<f64>,
}

impl DistanceMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn num_joints(&self) -> usize {
        self.values.nrows()
    }
}

/// Antisymmetric matrix of unit bone directions, shape `(N, N, 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionMatrix {
    values: Array3<f64>,
}

impl DirectionMatrix {
    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> (f64, f64) {
        (self.values[[i, j, 0]], self.values[[i, j, 1]])
    }

    pub fn num_joints(&self) -> usize {
        self.values.shape()[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Distance term weight.
    pub alpha: f64,
    /// Direction term weight.
    pub beta: f64,
    /// Mean-squared-error term weight.
    pub theta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            theta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, theta: f64) -> Result<Self> {
        let w = Self { alpha, beta, theta };
        w.validate()?;
        Ok(w)
    }

    /// Plain coordinate regression: `(0, 0, 1)`.
    pub fn mse_only() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            theta: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("theta", self.theta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

pub fn distance_matrix(p: &Pose, topo: &SkeletonTopology) -> Result<DistanceMatrix> {
    p.check_topology(topo)?;
    let n = topo.num_joints();
    let mut values = Array2::zeros((n, n));
    for &(i, j) in topo.edges() {
        let (xi, yi) = p.joint(i);
        let (xj, yj) = p.joint(j);
        let d = ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt();
        values[[i, j]] = d;
        values[[j, i]] = d;
    }
    Ok(DistanceMatrix { values })
}

pub fn direction_matrix(p: &Pose, topo: &SkeletonTopology, epsilon: f64) -> Result<DirectionMatrix> {
    if !(epsilon > 0.0) {
        return Err(Error::Contract(format!("epsilon must be positive, got {epsilon}")));
    }
    p.check_topology(topo)?;
    let n = topo.num_joints();
    let mut values = Array3::zeros((n, n, 2));
    for &(i, j) in topo.edges() {
        let (xi, yi) = p.joint(i);
        let (xj, yj) = p.joint(j);
        let (dx, dy) = (xj - xi, yj - yi);
        let d = (dx * dx + dy * dy).sqrt();
        if d > epsilon {
            values[[i, j, 0]] = dx / d;
            values[[i, j, 1]] = dy / d;
            values[[j, i, 0]] = -dx / d;
            values[[j, i, 1]] = -dy / d;
        }
    }
    Ok(DirectionMatrix { values })
}

/// `Σ_i Σ_j |D_gt[i,j] - D_pred[i,j]|`.
pub fn distance_loss(d_gt: &DistanceMatrix, d_pred: &DistanceMatrix) -> Result<f64> {
    if d_gt.values.dim() != d_pred.values.dim() {
        return Err(Error::shape(
            format!("{:?}", d_gt.values.dim()),
            format!("{:?}", d_pred.values.dim()),
        ));
    }
    Ok(d_gt
        .values
        .iter()
        .zip(d_pred.values.iter())
        .map(|(a, b)| (a - b).abs())
        .sum())
}

/// `Σ_i Σ_j ‖Θ_gt[i,j] - Θ_pred[i,j]‖₂`.
pub fn direction_loss(t_gt: &DirectionMatrix, t_pred: &DirectionMatrix) -> Result<f64> {
    if t_gt.values.dim() != t_pred.values.dim() {
        return Err(Error::shape(
            format!("{:?}", t_gt.values.dim()),
            format!("{:?}", t_pred.values.dim()),
        ));
    }
    let n = t_gt.num_joints();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let dx = t_gt.values[[i, j, 0]] - t_pred.values[[i, j, 0]];
            let dy = t_gt.values[[i, j, 1]] - t_pred.values[[i, j, 1]];
            total += (dx * dx + dy * dy).sqrt();
        }
    }
    Ok(total)
}

/// `α · L_distance + β · L_direction` for one frame.
pub fn pose_loss(
    gt: &Pose,
    pred: &Pose,
    topo: &SkeletonTopology,
    w: &LossWeights,
    epsilon: f64,
) -> Result<f64> {
    let dist = distance_loss(&distance_matrix(gt, topo)?, &distance_matrix(pred, topo)?)?;
    let dir = direction_loss(
        &direction_matrix(gt, topo, epsilon)?,
        &direction_matrix(pred, topo, epsilon)?,
    )?;
    Ok(w.alpha * dist + w.beta * dir)
}

/// Mean of [`pose_loss`] over the frames.
pub fn sequence_loss(
    gt: &PoseSequence,
    pred: &PoseSequence,
    topo: &SkeletonTopology,
    w: &LossWeights,
    epsilon: f64,
) -> Result<f64> {
    check_pair(gt, pred)?;
    let k = gt.horizon();
    let mut total = 0.0;
    for t in 0..k {
        total += pose_loss(&gt.pose(t), &pred.pose(t), topo, w, epsilon)?;
    }
    Ok(total / k as f64)
}

/// Mean of [`sequence_loss`] over `(gt, pred)` pairs.
pub fn batch_loss(
    batch: &[(PoseSequence, PoseSequence)],
    topo: &SkeletonTopology,
    w: &LossWeights,
    epsilon: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut total = 0.0;
    for (gt, pred) in batch {
        total += sequence_loss(gt, pred, topo, w, epsilon)?;
    }
    Ok(total / batch.len() as f64)
}

/// Mean squared error over every coordinate of every frame in the batch.
pub fn batch_mse(batch: &[(PoseSequence, PoseSequence)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (gt, pred) in batch {
        check_pair(gt, pred)?;
        total += gt
            .matrix()
            .iter()
            .zip(pred.matrix().iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
        count += gt.matrix().len();
    }
    Ok(total / count as f64)
}

/// Relative batch loss plus `θ` times [`batch_mse`].
pub fn total_loss(
    batch: &[(PoseSequence, PoseSequence)],
    topo: &SkeletonTopology,
    w: &LossWeights,
    epsilon: f64,
) -> Result<f64> {
    w.validate()?;
    Ok(batch_loss(batch, topo, w, epsilon)? + w.theta * batch_mse(batch)?)
}

/// Analytic gradient of [`total_loss`] with respect to each predicted
/// sequence. Degenerate bones (length ≤ `epsilon`) and exact matches at the
/// `|·|` and `‖·‖` kinks contribute zero.
pub fn total_loss_gradient(
    batch: &[(PoseSequence, PoseSequence)],
    topo: &SkeletonTopology,
    w: &LossWeights,
    epsilon: f64,
) -> Result<Vec<Array2<f64>>> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    w.validate()?;
    let horizon = batch[0].0.horizon();
    for (gt, pred) in batch {
        check_pair(gt, pred)?;
        if gt.horizon() != horizon {
            return Err(Error::Contract(
                "all sequences in a batch must share one horizon".into(),
            ));
        }
        if gt.dim() != topo.dim() {
            return Err(Error::shape(topo.dim(), gt.dim()));
        }
    }
    let objective = RelativeObjective::new(topo.clone(), *w, epsilon)?;
    let rows = batch.len() * horizon;
    let mut gt_all = Array2::zeros((rows, topo.dim()));
    let mut pred_all = Array2::zeros((rows, topo.dim()));
    for (b, (gt, pred)) in batch.iter().enumerate() {
        gt_all
            .slice_mut(ndarray::s![b * horizon..(b + 1) * horizon, ..])
            .assign(gt.matrix());
        pred_all
            .slice_mut(ndarray::s![b * horizon..(b + 1) * horizon, ..])
            .assign(pred.matrix());
    }
    let (_, grad) = objective.loss_and_grad(gt_all.view(), pred_all.view())?;
    Ok((0..batch.len())
        .map(|b| {
            grad.slice(ndarray::s![b * horizon..(b + 1) * horizon, ..])
                .to_owned()
        })
        .collect())
}

fn check_pair(gt: &PoseSequence, pred: &PoseSequence) -> Result<()> {
    if gt.matrix().dim() != pred.matrix().dim() {
        return Err(Error::shape(
            format!("{:?}", gt.matrix().dim()),
            format!("{:?}", pred.matrix().dim()),
        ));
    }
    Ok(())
}

/// The full objective over row-stacked frames, with its gradient.
///
/// Rows are frames of `B` sequences of a common horizon stacked in order.
/// Since every sequence has the same length, the mean over sequences of
/// per-sequence frame means is the plain mean over all rows.
#[derive(Debug, Clone)]
pub struct RelativeObjective {
    topo: SkeletonTopology,
    weights: LossWeights,
    epsilon: f64,
}

impl RelativeObjective {
    pub fn new(topo: SkeletonTopology, weights: LossWeights, epsilon: f64) -> Result<Self> {
        weights.validate()?;
        if !(epsilon > 0.0) {
            return Err(Error::Contract(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self {
            topo,
            weights,
            epsilon,
        })
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn topology(&self) -> &SkeletonTopology {
        &self.topo
    }

    /// Loss value only.
    pub fn loss(&self, gt: ArrayView2<f64>, pred: ArrayView2<f64>) -> Result<f64> {
        self.check(gt, pred)?;
        let rows = gt.nrows() as f64;
        let mut rel = 0.0;
        let mut sq = 0.0;
        for (g, p) in gt.rows().into_iter().zip(pred.rows()) {
            let (gs, ps) = (g.to_vec(), p.to_vec());
            rel += self.frame_terms(&gs, &ps, None);
            sq += gs.iter().zip(&ps).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        Ok(rel / rows + self.weights.theta * sq / gt.len() as f64)
    }

    /// Loss value and its gradient with respect to `pred`.
    pub fn loss_and_grad(
        &self,
        gt: ArrayView2<f64>,
        pred: ArrayView2<f64>,
    ) -> Result<(f64, Array2<f64>)> {
        self.check(gt, pred)?;
        let rows = gt.nrows() as f64;
        let elems = gt.len() as f64;
        let mut grad = Array2::zeros(pred.raw_dim());
        let mut rel = 0.0;
        let mut sq = 0.0;
        let mse_scale = 2.0 * self.weights.theta / elems;
        for ((g, p), mut out) in gt.rows().into_iter().zip(pred.rows()).zip(grad.rows_mut()) {
            let gs = g.to_vec();
            let ps = p.to_vec();
            let mut frame_grad = vec![0.0; ps.len()];
            rel += self.frame_terms(&gs, &ps, Some(&mut frame_grad));
            for (k, (a, b)) in gs.iter().zip(&ps).enumerate() {
                sq += (b - a).powi(2);
                frame_grad[k] = frame_grad[k] / rows + mse_scale * (b - a);
            }
            out.assign(&ArrayView1::from(&frame_grad[..]));
        }
        Ok((rel / rows + self.weights.theta * sq / elems, grad))
    }

    fn check(&self, gt: ArrayView2<f64>, pred: ArrayView2<f64>) -> Result<()> {
        if gt.dim() != pred.dim() {
            return Err(Error::shape(format!("{:?}", gt.dim()), format!("{:?}", pred.dim())));
        }
        if gt.ncols() != self.topo.dim() {
            return Err(Error::shape(self.topo.dim(), gt.ncols()));
        }
        Ok(())
    }

    /// Relative loss of one frame; accumulates its gradient into `grad` when
    /// given. Each undirected edge stands for two equal directed terms.
    fn frame_terms(&self, gt: &[f64], pred: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let LossWeights { alpha, beta, .. } = self.weights;
        if alpha == 0.0 && beta == 0.0 {
            return 0.0;
        }
        let eps = self.epsilon;
        let mut total = 0.0;
        for &(i, j) in self.topo.edges() {
            let (gdx, gdy) = (gt[2 * j] - gt[2 * i], gt[2 * j + 1] - gt[2 * i + 1]);
            let (pdx, pdy) = (pred[2 * j] - pred[2 * i], pred[2 * j + 1] - pred[2 * i + 1]);
            let gd = (gdx * gdx + gdy * gdy).sqrt();
            let pd = (pdx * pdx + pdy * pdy).sqrt();

            let mut gx = 0.0;
            let mut gy = 0.0;
            if alpha != 0.0 {
                let diff = pd - gd;
                total += 2.0 * alpha * diff.abs();
                if diff != 0.0 && pd > 0.0 {
                    let s = 2.0 * alpha * diff.signum() / pd;
                    gx += s * pdx;
                    gy += s * pdy;
                }
            }
            if beta != 0.0 {
                let (gux, guy) = if gd > eps { (gdx / gd, gdy / gd) } else { (0.0, 0.0) };
                let (pux, puy) = if pd > eps { (pdx / pd, pdy / pd) } else { (0.0, 0.0) };
                let (rx, ry) = (pux - gux, puy - guy);
                let r = (rx * rx + ry * ry).sqrt();
                total += 2.0 * beta * r;
                if r > 0.0 && pd > eps {
                    // d‖u - g‖/dv = (I - u uᵀ) r / (‖r‖ · |v|)
                    let dot = pux * rx + puy * ry;
                    let s = 2.0 * beta / (r * pd);
                    gx += s * (rx - pux * dot);
                    gy += s * (ry - puy * dot);
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                // v = p_j - p_i
                g[2 * j] += gx;
                g[2 * j + 1] += gy;
                g[2 * i] -= gx;
                g[2 * i + 1] -= gy;
            }
        }
        total
    }
}
