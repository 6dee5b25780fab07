//! Poses, skeleton topologies and the displacement parameterization.
//!
//! A pose stores `N` keypoints as `2N` interleaved coordinates
//! `(x_1, y_1, ..., x_N, y_N)` in normalized image units. A [`PoseSequence`]
//! stacks `T` such frames as rows of a `T x 2N` matrix, and a
//! [`DisplacementSequence`] holds per-frame offsets measured from the
//! initial pose (never from the previous frame).

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalization divisor applied on top of image-relative coordinates.
pub const DEFAULT_SIGMA: f64 = 0.8;

pub const BODY13_JOINTS: [&str; 13] = [
    "head",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hip",
    "r_hip",
    "l_knee",
    "r_knee",
    "l_ankle",
    "r_ankle",
];

pub const BODY13_EDGES: [(usize, usize); 14] = [
    (0, 1),   // head - l_shoulder
    (0, 2),   // head - r_shoulder
    (1, 2),   // l_shoulder - r_shoulder
    (1, 3),   // l_shoulder - l_elbow
    (3, 5),   // l_elbow - l_wrist
    (2, 4),   // r_shoulder - r_elbow
    (4, 6),   // r_elbow - r_wrist
    (1, 7),   // l_shoulder - l_hip
    (2, 8),   // r_shoulder - r_hip
    (7, 8),   // l_hip - r_hip
    (7, 9),   // l_hip - l_knee
    (9, 11),  // l_knee - l_ankle
    (8, 10),  // r_hip - r_knee
    (10, 12), // r_knee - r_ankle
];

pub const HAND21_JOINTS: [&str; 21] = [
    "wrist",
    "thumb_cmc",
    "thumb_mcp",
    "thumb_ip",
    "thumb_tip",
    "index_mcp",
    "index_pip",
    "index_dip",
    "index_tip",
    "middle_mcp",
    "middle_pip",
    "middle_dip",
    "middle_tip",
    "ring_mcp",
    "ring_pip",
    "ring_dip",
    "ring_tip",
    "pinky_mcp",
    "pinky_pip",
    "pinky_dip",
    "pinky_tip",
];

/// Wrist spokes to each finger base, three chain links per finger, and the
/// thumb-base/index-base link.
pub const HAND21_EDGES: [(usize, usize); 21] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 4),
    (0, 5),
    (5, 6),
    (6, 7),
    (7, 8),
    (0, 9),
    (9, 10),
    (10, 11),
    (11, 12),
    (0, 13),
    (13, 14),
    (14, 15),
    (15, 16),
    (0, 17),
    (17, 18),
    (18, 19),
    (19, 20),
    (1, 5),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    Body13,
    Hand21,
    Custom,
}

impl TopologyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TopologyKind::Body13 => "body13",
            TopologyKind::Hand21 => "hand21",
            TopologyKind::Custom => "custom",
        }
    }

    /// Default PCK threshold: 0.05 for bodies, 0.15 for hands.
    pub fn default_pck_delta(&self) -> f64 {
        match self {
            TopologyKind::Hand21 => 0.15,
            _ => 0.05,
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "body13" => Ok(TopologyKind::Body13),
            "hand21" => Ok(TopologyKind::Hand21),
            "custom" => Ok(TopologyKind::Custom),
            other => Err(Error::Config(format!(
                "unknown topology kind {other:?} (expected body13, hand21 or custom)"
            ))),
        }
    }
}

/// Joint count plus an undirected adjacency list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonTopology {
    kind: TopologyKind,
    num_joints: usize,
    edges: Vec<(usize, usize)>,
}

impl SkeletonTopology {
    /// Canonical topology for `body13` or `hand21`. `custom` has no canonical
    /// edge table and must go through [`SkeletonTopology::custom`].
    pub fn build(kind: TopologyKind) -> Result<Self> {
        match kind {
            TopologyKind::Body13 => Self::new(kind, 13, BODY13_EDGES.to_vec()),
            TopologyKind::Hand21 => Self::new(kind, 21, HAND21_EDGES.to_vec()),
            TopologyKind::Custom => Err(Error::Config(
                "custom topology requires an explicit edge list".into(),
            )),
        }
    }

    pub fn custom(num_joints: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        Self::new(TopologyKind::Custom, num_joints, edges)
    }

    fn new(kind: TopologyKind, num_joints: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if num_joints == 0 {
            return Err(Error::Config("topology needs at least one joint".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut normalized = Vec::with_capacity(edges.len());
        for &(i, j) in &edges {
            if i >= num_joints || j >= num_joints {
                return Err(Error::Config(format!(
                    "edge ({i}, {j}) out of range for {num_joints} joints"
                )));
            }
            if i == j {
                return Err(Error::Config(format!("self-loop on joint {i}")));
            }
            let key = (i.min(j), i.max(j));
            if !seen.insert(key) {
                return Err(Error::Config(format!("duplicate edge ({i}, {j})")));
            }
            normalized.push(key);
        }
        Ok(Self {
            kind,
            num_joints,
            edges: normalized,
        })
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    /// Pose dimensionality `2N`.
    pub fn dim(&self) -> usize {
        2 * self.num_joints
    }

    /// Undirected edges, each stored once as `(min, max)`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degree(&self, joint: usize) -> usize {
        self.edges
            .iter()
            .filter(|&&(i, j)| i == joint || j == joint)
            .count()
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        let key = (i.min(j), i.max(j));
        self.edges.contains(&key)
    }

    pub fn joint_names(&self) -> Option<&'static [&'static str]> {
        match self.kind {
            TopologyKind::Body13 => Some(&BODY13_JOINTS),
            TopologyKind::Hand21 => Some(&HAND21_JOINTS),
            TopologyKind::Custom => None,
        }
    }
}

/// One frame of `N` keypoints, stored interleaved as `2N` coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pose {
    coords: Vec<f64>,
}

impl Pose {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() || !coords.len().is_multiple_of(2) {
            return Err(Error::Contract(format!(
                "pose needs an even, non-zero coordinate count, got {}",
                coords.len()
            )));
        }
        if let Some(i) = coords.iter().position(|c| !c.is_finite()) {
            return Err(Error::Contract(format!("non-finite coordinate at {i}")));
        }
        Ok(Self { coords })
    }

    /// Builds a pose from `(x, y)` joint positions.
    pub fn from_points(points: &[(f64, f64)]) -> Result<Self> {
        Self::new(points.iter().flat_map(|&(x, y)| [x, y]).collect())
    }

    pub fn zeros(num_joints: usize) -> Self {
        Self {
            coords: vec![0.0; 2 * num_joints],
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn num_joints(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn joint(&self, k: usize) -> (f64, f64) {
        (self.coords[2 * k], self.coords[2 * k + 1])
    }

    pub fn check_topology(&self, topo: &SkeletonTopology) -> Result<()> {
        if self.dim() != topo.dim() {
            return Err(Error::shape(
                format!("{} coordinates for {}", topo.dim(), topo.kind()),
                self.dim(),
            ));
        }
        Ok(())
    }

    pub fn centroid(&self) -> (f64, f64) {
        let n = self.num_joints() as f64;
        let (sx, sy) = self
            .coords
            .chunks_exact(2)
            .fold((0.0, 0.0), |(sx, sy), c| (sx + c[0], sy + c[1]));
        (sx / n, sy / n)
    }

    /// Adds `(dx, dy)` to every joint.
    pub fn translated(&self, dx: f64, dy: f64) -> Pose {
        let coords = self
            .coords
            .chunks_exact(2)
            .flat_map(|c| [c[0] + dx, c[1] + dy])
            .collect();
        Pose { coords }
    }

    pub fn scaled(&self, s: f64) -> Pose {
        Pose {
            coords: self.coords.iter().map(|c| c * s).collect(),
        }
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.coords[..])
    }
}

/// `T` frames of one topology, stored as a `T x 2N` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    frames: Array2<f64>,
}

impl PoseSequence {
    pub fn from_matrix(frames: Array2<f64>) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::Contract("pose sequence needs at least one frame".into()));
        }
        if frames.ncols() == 0 || !frames.ncols().is_multiple_of(2) {
            return Err(Error::Contract(format!(
                "frame width must be even and non-zero, got {}",
                frames.ncols()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("pose sequence contains non-finite values".into()));
        }
        Ok(Self { frames })
    }

    pub fn from_poses(poses: &[Pose]) -> Result<Self> {
        let first = poses
            .first()
            .ok_or_else(|| Error::Contract("pose sequence needs at least one frame".into()))?;
        let dim = first.dim();
        let mut frames = Array2::zeros((poses.len(), dim));
        for (t, p) in poses.iter().enumerate() {
            if p.dim() != dim {
                return Err(Error::shape(dim, p.dim()));
            }
            frames.row_mut(t).assign(&p.view());
        }
        Ok(Self { frames })
    }

    /// `horizon` copies of `pose`.
    pub fn repeat(pose: &Pose, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Contract("horizon must be at least 1".into()));
        }
        let mut frames = Array2::zeros((horizon, pose.dim()));
        for mut row in frames.rows_mut() {
            row.assign(&pose.view());
        }
        Ok(Self { frames })
    }

    pub fn horizon(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn num_joints(&self) -> usize {
        self.frames.ncols() / 2
    }

    pub fn frame(&self, t: usize) -> ArrayView1<'_, f64> {
        self.frames.row(t)
    }

    pub fn pose(&self, t: usize) -> Pose {
        Pose {
            coords: self.frames.row(t).to_vec(),
        }
    }

    pub fn poses(&self) -> Vec<Pose> {
        (0..self.horizon()).map(|t| self.pose(t)).collect()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.frames
    }

    /// Position of joint `k` at frame `t`.
    pub fn joint(&self, t: usize, k: usize) -> (f64, f64) {
        (self.frames[[t, 2 * k]], self.frames[[t, 2 * k + 1]])
    }

    pub fn translated(&self, dx: f64, dy: f64) -> PoseSequence {
        let mut frames = self.frames.clone();
        for mut row in frames.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v += if c % 2 == 0 { dx } else { dy };
            }
        }
        PoseSequence { frames }
    }
}

/// Per-frame offsets from the initial pose, `T x 2N`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementSequence {
    deltas: Array2<f64>,
}

impl DisplacementSequence {
    pub fn new(deltas: Array2<f64>) -> Result<Self> {
        if deltas.nrows() == 0 || deltas.ncols() == 0 {
            return Err(Error::Contract("empty displacement sequence".into()));
        }
        if deltas.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("displacements contain non-finite values".into()));
        }
        Ok(Self { deltas })
    }

    pub fn zeros(horizon: usize, dim: usize) -> Self {
        Self {
            deltas: Array2::zeros((horizon, dim)),
        }
    }

    pub fn horizon(&self) -> usize {
        self.deltas.nrows()
    }

    pub fn dim(&self) -> usize {
        self.deltas.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.deltas
    }
}

/// Frame `t` of the result is `p0 + d[t]`.
pub fn apply_displacements(p0: &Pose, d: &DisplacementSequence) -> Result<PoseSequence> {
    if p0.dim() != d.dim() {
        return Err(Error::shape(
            format!("displacements of width {}", p0.dim()),
            d.dim(),
        ));
    }
    let base = Array1::from(p0.coords.clone());
    let frames = &d.deltas + &base.insert_axis(Axis(0));
    Ok(PoseSequence { frames })
}

fn check_normalization(image_width: f64, image_height: f64, sigma: f64) -> Result<()> {
    if !(image_width > 0.0 && image_height > 0.0) {
        return Err(Error::Config(format!(
            "image dimensions must be positive, got {image_width}x{image_height}"
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// Maps pixel coordinates into normalized units: `x / (w * sigma)`,
/// `y / (h * sigma)`.
pub fn normalize_pose(raw: &Pose, image_width: f64, image_height: f64, sigma: f64) -> Result<Pose> {
    check_normalization(image_width, image_height, sigma)?;
    let (sx, sy) = (image_width * sigma, image_height * sigma);
    let coords = raw
        .coords
        .chunks_exact(2)
        .flat_map(|c| [c[0] / sx, c[1] / sy])
        .collect();
    Ok(Pose { coords })
}

pub fn denormalize_pose(
    normalized: &Pose,
    image_width: f64,
    image_height: f64,
    sigma: f64,
) -> Result<Pose> {
    check_normalization(image_width, image_height, sigma)?;
    let (sx, sy) = (image_width * sigma, image_height * sigma);
    let coords = normalized
        .coords
        .chunks_exact(2)
        .flat_map(|c| [c[0] * sx, c[1] * sy])
        .collect();
    Ok(Pose { coords })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn body13_table_is_canonical() {
        let topo = SkeletonTopology::build(TopologyKind::Body13).unwrap();
        assert_eq!(topo.num_joints(), 13);
        assert_eq!(topo.edges().len(), 14);
        let name = |n: &str| BODY13_JOINTS.iter().position(|j| *j == n).unwrap();
        let expected = [
            ("head", "l_shoulder"),
            ("head", "r_shoulder"),
            ("l_shoulder", "r_shoulder"),
            ("l_shoulder", "l_elbow"),
            ("l_elbow", "l_wrist"),
            ("r_shoulder", "r_elbow"),
            ("r_elbow", "r_wrist"),
            ("l_shoulder", "l_hip"),
            ("r_shoulder", "r_hip"),
            ("l_hip", "r_hip"),
            ("l_hip", "l_knee"),
            ("l_knee", "l_ankle"),
            ("r_hip", "r_knee"),
            ("r_knee", "r_ankle"),
        ];
        for (a, b) in expected {
            assert!(topo.is_adjacent(name(a), name(b)), "{a}-{b}");
        }
        assert!(topo.is_adjacent(name("l_hip"), name("r_hip")));
    }

    #[test]
    fn hand21_table() {
        let topo = SkeletonTopology::build(TopologyKind::Hand21).unwrap();
        assert_eq!(topo.num_joints(), 21);
        assert_eq!(topo.edges().len(), 21);
        assert_eq!(topo.degree(0), 5);
        for base in [1, 5, 9, 13, 17] {
            assert!(topo.is_adjacent(0, base));
            assert!(topo.is_adjacent(base, base + 1));
            assert!(topo.is_adjacent(base + 1, base + 2));
            assert!(topo.is_adjacent(base + 2, base + 3));
        }
    }

    #[test]
    fn custom_requires_edges() {
        assert!(matches!(
            SkeletonTopology::build(TopologyKind::Custom),
            Err(Error::Config(_))
        ));
        assert!(SkeletonTopology::custom(3, vec![(0, 1), (1, 2)]).is_ok());
        assert!(SkeletonTopology::custom(3, vec![(0, 3)]).is_err());
        assert!(SkeletonTopology::custom(3, vec![(1, 1)]).is_err());
        assert!(SkeletonTopology::custom(3, vec![(0, 1), (1, 0)]).is_err());
    }

    #[test]
    fn normalize_divides_by_scaled_dims() {
        let raw = Pose::from_points(&[(80.0, 90.0)]).unwrap();
        let n = normalize_pose(&raw, 100.0, 100.0, DEFAULT_SIGMA).unwrap();
        assert!((n.coords()[0] - 1.0).abs() < 1e-15);
        assert!((n.coords()[1] - 1.125).abs() < 1e-15);
        assert_eq!(DEFAULT_SIGMA, 0.8);
    }

    #[test]
    fn normalize_rejects_bad_config() {
        let raw = Pose::from_points(&[(1.0, 1.0)]).unwrap();
        assert!(matches!(normalize_pose(&raw, 0.0, 10.0, 0.8), Err(Error::Config(_))));
        assert!(matches!(normalize_pose(&raw, 10.0, -1.0, 0.8), Err(Error::Config(_))));
        assert!(matches!(normalize_pose(&raw, 10.0, 10.0, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn head_joint_displacement() {
        let p0 = Pose::from_points(&[(0.75, 0.8)]).unwrap();
        let d = DisplacementSequence::new(array![[-0.05, 0.1]]).unwrap();
        let seq = apply_displacements(&p0, &d).unwrap();
        let (x, y) = seq.joint(0, 0);
        assert!((x - 0.7).abs() < 1e-12 && (y - 0.9).abs() < 1e-12);
    }

    #[test]
    fn zero_displacements_repeat_p0() {
        let p0 = Pose::new((0..26).map(|i| i as f64 * 0.01).collect()).unwrap();
        let seq = apply_displacements(&p0, &DisplacementSequence::zeros(45, 26)).unwrap();
        assert_eq!(seq, PoseSequence::repeat(&p0, 45).unwrap());
    }

    #[test]
    fn origin_plus_deltas_is_deltas() {
        let m = array![[0.1, -0.2, 0.3, 0.4], [1.5, 2.5, -3.5, 0.0]];
        let seq = apply_displacements(&Pose::zeros(2), &DisplacementSequence::new(m.clone()).unwrap())
            .unwrap();
        assert_eq!(seq.matrix(), &m);
    }

    #[test]
    fn displacement_shape_mismatch() {
        let err = apply_displacements(&Pose::zeros(2), &DisplacementSequence::zeros(3, 6));
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn pose_rejects_nan() {
        assert!(Pose::new(vec![0.0, f64::NAN]).is_err());
        assert!(Pose::new(vec![0.0]).is_err());
    }

    fn pose_strategy(joints: usize) -> impl Strategy<Value = Pose> {
        prop::collection::vec(-2.0f64..2.0, 2 * joints).prop_map(|c| Pose::new(c).unwrap())
    }

    proptest! {
        #[test]
        fn normalize_round_trip(p in pose_strategy(13), w in 1.0f64..4000.0, h in 1.0f64..4000.0, sigma in 0.1f64..3.0) {
            let raw = p.scaled(1000.0);
            let back = denormalize_pose(&normalize_pose(&raw, w, h, sigma).unwrap(), w, h, sigma).unwrap();
            for (a, b) in raw.coords().iter().zip(back.coords()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }

        #[test]
        fn displacement_translation_equivariance(
            p in pose_strategy(4),
            d in prop::collection::vec(-1.0f64..1.0, 8 * 5),
            cx in -1.0f64..1.0,
            cy in -1.0f64..1.0,
        ) {
            let d = DisplacementSequence::new(Array2::from_shape_vec((5, 8), d).unwrap()).unwrap();
            let shifted = apply_displacements(&p.translated(cx, cy), &d).unwrap();
            let expected = apply_displacements(&p, &d).unwrap().translated(cx, cy);
            for (a, b) in shifted.matrix().iter().zip(expected.matrix()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
