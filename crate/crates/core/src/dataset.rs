//! Samples, the `posecast-data-v1` JSONL format, train/test splitting and
//! the synthetic parametric-motion generator.
//!
//! Each JSONL line is one sample:
//!
//! ```json
//! {"format":"posecast-data-v1","id":"s0","topology":"body13","label":"swing golf",
//!  "p0":[x1,y1,...],"future":[[x1,y1,...],...],"context_ref":null,"image_dims":[640,480]}
//! ```
//!
//! Coordinates are normalized and listed in the canonical joint order of the
//! topology. `format`, `context_ref` and `image_dims` are optional.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationKind};
use crate::pose::{Pose, PoseSequence, SkeletonTopology, TopologyKind};

pub const DATA_FORMAT: &str = "posecast-data-v1";

/// Forecasting horizon used throughout the experiments.
pub const DEFAULT_HORIZON: usize = 45;

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub topology: TopologyKind,
    pub p0: Pose,
    pub future: PoseSequence,
    pub label: String,
    pub context_ref: Option<String>,
    pub image_dims: Option<(f64, f64)>,
}

impl Sample {
    pub fn horizon(&self) -> usize {
        self.future.horizon()
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    format: Option<String>,
    id: Option<String>,
    topology: Option<String>,
    label: Option<String>,
    p0: Option<Vec<Option<f64>>>,
    future: Option<Vec<Vec<Option<f64>>>>,
    #[serde(default)]
    context_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_dims: Option<(f64, f64)>,
}

impl Record {
    fn from_sample(s: &Sample) -> Self {
        Record {
            format: Some(DATA_FORMAT.to_string()),
            id: Some(s.id.clone()),
            topology: Some(s.topology.as_str().to_string()),
            label: Some(s.label.clone()),
            p0: Some(s.p0.coords().iter().map(|&c| Some(c)).collect()),
            future: Some(
                s.future
                    .matrix()
                    .rows()
                    .into_iter()
                    .map(|r| r.iter().map(|&c| Some(c)).collect())
                    .collect(),
            ),
            context_ref: s.context_ref.clone(),
            image_dims: s.image_dims,
        }
    }

    fn into_sample(self) -> std::result::Result<Sample, ValidationKind> {
        if let Some(f) = &self.format {
            if f != DATA_FORMAT {
                return Err(ValidationKind::UnknownFormat(f.clone()));
            }
        }
        let missing = |f: &str| ValidationKind::MissingField(f.to_string());
        let id = self.id.ok_or_else(|| missing("id"))?;
        let topo_name = self.topology.ok_or_else(|| missing("topology"))?;
        let kind = TopologyKind::from_str(&topo_name)
            .map_err(|_| ValidationKind::Malformed(format!("unknown topology {topo_name:?}")))?;
        let topo = SkeletonTopology::build(kind)
            .map_err(|e| ValidationKind::Malformed(e.to_string()))?;
        let label = self.label.ok_or_else(|| missing("label"))?;
        let p0 = self.p0.ok_or_else(|| missing("p0"))?;
        let future = self.future.ok_or_else(|| missing("future"))?;

        let check = |field: String, coords: &[Option<f64>]| -> std::result::Result<Vec<f64>, ValidationKind> {
            if coords.len() != topo.dim() {
                return Err(ValidationKind::JointCount {
                    field,
                    topology: kind.to_string(),
                    expected: topo.num_joints(),
                    found: coords.len() / 2,
                });
            }
            if let Some(index) = coords.iter().position(|c| !c.is_some_and(f64::is_finite)) {
                return Err(ValidationKind::NonFinite { field, index });
            }
            Ok(coords.iter().flatten().copied().collect())
        };
        let p0 = check("p0".into(), &p0)?;
        if future.is_empty() {
            return Err(ValidationKind::Malformed("`future` has no frames".into()));
        }
        let mut frames = Array2::zeros((future.len(), topo.dim()));
        for (t, frame) in future.iter().enumerate() {
            let frame = check(format!("future[{t}]"), frame)?;
            frames.row_mut(t).assign(&ndarray::ArrayView1::from(&frame[..]));
        }
        Ok(Sample {
            id,
            topology: kind,
            p0: Pose::new(p0).map_err(|e| ValidationKind::Malformed(e.to_string()))?,
            future: PoseSequence::from_matrix(frames)
                .map_err(|e| ValidationKind::Malformed(e.to_string()))?,
            label,
            context_ref: self.context_ref,
            image_dims: self.image_dims,
        })
    }
}

/// Reads and validates a JSONL dataset. All samples must share the first
/// sample's horizon; blank lines are skipped. Line numbers are 1-based.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples: Vec<Sample> = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let invalid = |kind| Error::Validation {
            path: path.to_path_buf(),
            line: lineno,
            kind,
        };
        let record: Record = serde_json::from_str(&nonfinite_to_null(&line))
            .map_err(|e| invalid(ValidationKind::Malformed(e.to_string())))?;
        let sample = record.into_sample().map_err(invalid)?;
        if let Some(first) = samples.first() {
            if sample.horizon() != first.horizon() {
                return Err(invalid(ValidationKind::Horizon {
                    expected: first.horizon(),
                    found: sample.horizon(),
                }));
            }
        }
        if !ids.insert(sample.id.clone()) {
            return Err(invalid(ValidationKind::DuplicateId(sample.id)));
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// Rewrites the bare `NaN`, `Infinity` and `-Infinity` tokens some writers
/// emit as `null`, so they surface as non-finite coordinates rather than
/// parse errors.
fn nonfinite_to_null(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut in_string = false;
    let mut escaped = false;
    let mut rest = line;
    while let Some(c) = rest.chars().next() {
        if in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
        } else if c == '"' {
            in_string = true;
        } else if let Some(tok) = ["NaN", "-Infinity", "Infinity"].iter().find(|t| rest.starts_with(**t)) {
            out.push_str("null");
            rest = &rest[tok.len()..];
            continue;
        }
        out.push(c);
        rest = &rest[c.len_utf8()..];
    }
    out
}

pub fn write_dataset(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, &Record::from_sample(s))?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Deterministic shuffled split; each side keeps the original order.
pub fn split(samples: &[Sample], train_fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n = samples.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((
        train_idx.iter().map(|&i| samples[i].clone()).collect(),
        test_idx.iter().map(|&i| samples[i].clone()).collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionFamily {
    LinearDrift,
    SinusoidalSwing,
    CircularArc,
    TwoPhase,
}

impl MotionFamily {
    pub const ALL: [MotionFamily; 4] = [
        MotionFamily::LinearDrift,
        MotionFamily::SinusoidalSwing,
        MotionFamily::CircularArc,
        MotionFamily::TwoPhase,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MotionFamily::LinearDrift => "linear_drift",
            MotionFamily::SinusoidalSwing => "sinusoidal_swing",
            MotionFamily::CircularArc => "circular_arc",
            MotionFamily::TwoPhase => "two_phase",
        }
    }

    pub fn default_label(&self) -> &'static str {
        match self {
            MotionFamily::LinearDrift => "walk forward",
            MotionFamily::SinusoidalSwing => "swing golf",
            MotionFamily::CircularArc => "circle around",
            MotionFamily::TwoPhase => "step and return",
        }
    }
}

impl fmt::Display for MotionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MotionFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MotionFamily::ALL
            .iter()
            .copied()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<_> = MotionFamily::ALL.iter().map(|f| f.as_str()).collect();
                Error::Config(format!("unknown motion family {s:?}; expected one of {known:?}"))
            })
    }
}

/// Closed-form motion parameters for one family.
///
/// Lengths are in units of the subject's size `s` (the initial pose's
/// bounding-box height), so larger subjects move proportionally further.
/// With `dir = +1` when the subject's centroid is left of the frame centre
/// and `-1` otherwise, the offset added to joint `k` at step `t` is:
///
/// - `linear_drift`: `t * v` with `v = A s dir (cos φ, sin φ)`
/// - `sinusoidal_swing`: `(A s w_k (sin(ω t + φ) - sin φ), 0)` where
///   `w_k` is 1 on the distal joints (wrists / fingertips), 0.5 on the
///   joints before them and 0 elsewhere
/// - `circular_arc`: `A s (dir (cos(φ + ω t) - cos φ), sin(φ + ω t) - sin φ)`
/// - `two_phase`: `m(t) * v` with `m(t) = t` for `t <= t_s` and
///   `2 t_s - t` after, `t_s = round(1 / ω)`
///
/// Independent Gaussian noise of standard deviation `noise_std` is added to
/// every future coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMotionSpec {
    pub family: MotionFamily,
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub noise_std: f64,
    pub label: String,
}

impl SyntheticMotionSpec {
    /// Parameters of the standard benchmark for `family`.
    pub fn standard(family: MotionFamily) -> Self {
        let (amplitude, frequency, phase) = match family {
            MotionFamily::LinearDrift => (0.02, 0.0, 0.0),
            MotionFamily::SinusoidalSwing => (0.5, 0.2, 0.0),
            MotionFamily::CircularArc => (0.6, 0.07, -std::f64::consts::FRAC_PI_2),
            MotionFamily::TwoPhase => (0.025, 0.05, 0.3),
        };
        Self {
            family,
            amplitude,
            frequency,
            phase,
            noise_std: 0.003,
            label: family.default_label().to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "noise_std must be non-negative, got {}",
                self.noise_std
            )));
        }
        for (name, v) in [
            ("amplitude", self.amplitude),
            ("frequency", self.frequency),
            ("phase", self.phase),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        if self.family == MotionFamily::TwoPhase && !(self.frequency > 0.0) {
            return Err(Error::Config("two_phase needs a positive frequency".into()));
        }
        Ok(())
    }

    /// Noise-free offset of every joint at step `t` for a subject of size
    /// `size` whose centroid is at `centroid_x`.
    pub fn offsets(&self, topo: &SkeletonTopology, t: f64, size: f64, centroid_x: f64) -> Vec<(f64, f64)> {
        let a = self.amplitude * size;
        let dir = travel_direction(centroid_x);
        let (w, phi) = (self.frequency, self.phase);
        let n = topo.num_joints();
        match self.family {
            MotionFamily::LinearDrift => {
                let v = (a * dir * phi.cos(), a * dir * phi.sin());
                vec![(t * v.0, t * v.1); n]
            }
            MotionFamily::SinusoidalSwing => {
                let base = a * ((w * t + phi).sin() - phi.sin());
                swing_weights(topo).into_iter().map(|wk| (base * wk, 0.0)).collect()
            }
            MotionFamily::CircularArc => {
                let dx = a * dir * ((phi + w * t).cos() - phi.cos());
                let dy = a * ((phi + w * t).sin() - phi.sin());
                vec![(dx, dy); n]
            }
            MotionFamily::TwoPhase => {
                let ts = (1.0 / w).round();
                let m = if t <= ts { t } else { 2.0 * ts - t };
                let v = (a * dir * phi.cos(), a * dir * phi.sin());
                vec![(m * v.0, m * v.1); n]
            }
        }
    }
}

/// Frame-centre test for the direction of travel in normalized units.
pub fn travel_direction(centroid_x: f64) -> f64 {
    if centroid_x < FRAME_CENTER_X {
        1.0
    } else {
        -1.0
    }
}

/// Horizontal centre of the normalized frame (`0.5 / 0.8`).
pub const FRAME_CENTER_X: f64 = 0.625;

fn swing_weights(topo: &SkeletonTopology) -> Vec<f64> {
    let mut w = vec![0.0; topo.num_joints()];
    match topo.kind() {
        TopologyKind::Body13 => {
            w[5] = 1.0;
            w[6] = 1.0;
            w[3] = 0.5;
            w[4] = 0.5;
        }
        TopologyKind::Hand21 => {
            for tip in [4, 8, 12, 16, 20] {
                w[tip] = 1.0;
                w[tip - 1] = 0.5;
            }
        }
        TopologyKind::Custom => {
            if let Some(last) = w.last_mut() {
                *last = 1.0;
            }
        }
    }
    w
}

/// Subject size: height of the pose's bounding box.
pub fn subject_size(p: &Pose) -> f64 {
    let ys = p.coords().iter().skip(1).step_by(2);
    let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| (lo.min(y), hi.max(y)));
    hi - lo
}

fn template(kind: TopologyKind) -> Result<Vec<(f64, f64)>> {
    // unit-height templates, y grows downward, centred on x = 0
    match kind {
        TopologyKind::Body13 => Ok(vec![
            (0.0, 0.0),
            (-0.12, 0.17),
            (0.12, 0.17),
            (-0.17, 0.33),
            (0.17, 0.33),
            (-0.19, 0.48),
            (0.19, 0.48),
            (-0.08, 0.52),
            (0.08, 0.52),
            (-0.09, 0.76),
            (0.09, 0.76),
            (-0.1, 1.0),
            (0.1, 1.0),
        ]),
        TopologyKind::Hand21 => {
            let mut pts = vec![(0.0, 1.0)];
            let bases = [(-0.3, 0.8), (-0.15, 0.55), (0.0, 0.5), (0.14, 0.53), (0.27, 0.6)];
            let dirs: [(f64, f64); 5] = [(-0.45, -0.55), (-0.1, -1.0), (0.0, -1.0), (0.1, -1.0), (0.2, -0.95)];
            let seg = [0.13, 0.12, 0.13, 0.12, 0.1];
            for f in 0..5 {
                let norm = (dirs[f].0 * dirs[f].0 + dirs[f].1 * dirs[f].1).sqrt();
                let (ux, uy) = (dirs[f].0 / norm, dirs[f].1 / norm);
                for s in 0..4 {
                    let d = seg[f] * s as f64;
                    pts.push((bases[f].0 + ux * d, bases[f].1 + uy * d));
                }
            }
            Ok(pts)
        }
        TopologyKind::Custom => Err(Error::Config(
            "synthetic generation needs a canonical topology".into(),
        )),
    }
}

/// Generates `n_samples` samples of one motion family with randomized
/// initial poses.
pub fn generate_synthetic(
    spec: &SyntheticMotionSpec,
    n_samples: usize,
    horizon: usize,
    topology: TopologyKind,
    seed: u64,
) -> Result<Vec<Sample>> {
    if horizon < 1 {
        return Err(Error::Contract("horizon must be at least 1".into()));
    }
    if n_samples < 1 {
        return Err(Error::Contract("need at least one sample".into()));
    }
    spec.validate()?;
    let topo = SkeletonTopology::build(topology)?;
    let tmpl = template(topology)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;

    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let scale = rng.random_range(0.28..0.42);
        let cx = rng.random_range(0.3..0.95);
        let top = rng.random_range(0.2..0.45);
        let jitter = Normal::new(0.0, 0.015 * scale).unwrap();
        let points: Vec<(f64, f64)> = tmpl
            .iter()
            .map(|&(x, y)| {
                (
                    cx + x * scale + jitter.sample(&mut rng),
                    top + y * scale + jitter.sample(&mut rng),
                )
            })
            .collect();
        let p0 = Pose::from_points(&points)?;
        let size = subject_size(&p0);
        let centroid_x = p0.centroid().0;
        let mut frames = Array2::zeros((horizon, topo.dim()));
        for t in 0..horizon {
            let offsets = spec.offsets(&topo, (t + 1) as f64, size, centroid_x);
            for (k, (dx, dy)) in offsets.into_iter().enumerate() {
                let (x, y) = p0.joint(k);
                let (nx, ny) = if spec.noise_std > 0.0 {
                    (noise.sample(&mut rng), noise.sample(&mut rng))
                } else {
                    (0.0, 0.0)
                };
                frames[[t, 2 * k]] = x + dx + nx;
                frames[[t, 2 * k + 1]] = y + dy + ny;
            }
        }
        samples.push(Sample {
            id: format!("{}-{i:05}", spec.family),
            topology,
            p0,
            future: PoseSequence::from_matrix(frames)?,
            label: spec.label.clone(),
            context_ref: None,
            image_dims: None,
        });
    }
    Ok(samples)
}

/// The standard synthetic benchmark: every motion family with its standard
/// parameters, `per_family` samples each, families interleaved by block.
pub fn standard_benchmark(
    per_family: usize,
    horizon: usize,
    topology: TopologyKind,
    seed: u64,
) -> Result<Vec<Sample>> {
    let mut all = Vec::with_capacity(4 * per_family);
    for (f, family) in MotionFamily::ALL.iter().enumerate() {
        let spec = SyntheticMotionSpec::standard(*family);
        let family_seed = seed.wrapping_mul(1_000_003).wrapping_add(f as u64);
        all.extend(generate_synthetic(&spec, per_family, horizon, topology, family_seed)?);
    }
    Ok(all)
}

pub fn standard_vocabulary() -> Vec<String> {
    MotionFamily::ALL
        .iter()
        .map(|f| f.default_label().to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless(family: MotionFamily) -> SyntheticMotionSpec {
        SyntheticMotionSpec {
            noise_std: 0.0,
            ..SyntheticMotionSpec::standard(family)
        }
    }

    #[test]
    fn linear_drift_closed_form() {
        let spec = noiseless(MotionFamily::LinearDrift);
        let samples = generate_synthetic(&spec, 5, 45, TopologyKind::Body13, 7).unwrap();
        for s in &samples {
            let size = subject_size(&s.p0);
            let dir = travel_direction(s.p0.centroid().0);
            let v = spec.amplitude * size * dir;
            for t in 0..45 {
                for k in 0..13 {
                    let (x, y) = s.future.joint(t, k);
                    let (x0, y0) = s.p0.joint(k);
                    assert_eq!(x, x0 + (t + 1) as f64 * v);
                    assert_eq!(y, y0);
                }
            }
        }
    }

    #[test]
    fn sinusoidal_swing_closed_form() {
        let spec = noiseless(MotionFamily::SinusoidalSwing);
        let samples = generate_synthetic(&spec, 3, 45, TopologyKind::Body13, 8).unwrap();
        for s in &samples {
            let a = spec.amplitude * subject_size(&s.p0);
            for t in 1..=45 {
                let expected =
                    a * ((spec.frequency * t as f64 + spec.phase).sin() - spec.phase.sin());
                let (x, _) = s.future.joint(t - 1, 5);
                assert!((x - s.p0.joint(5).0 - expected).abs() < 1e-12);
                let (x, _) = s.future.joint(t - 1, 3);
                assert!((x - s.p0.joint(3).0 - 0.5 * expected).abs() < 1e-12);
                let (x, y) = s.future.joint(t - 1, 0);
                assert!((x - s.p0.joint(0).0).abs() < 1e-12 && (y - s.p0.joint(0).1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        let spec = SyntheticMotionSpec::standard(MotionFamily::CircularArc);
        let a = generate_synthetic(&spec, 4, 10, TopologyKind::Hand21, 3).unwrap();
        let b = generate_synthetic(&spec, 4, 10, TopologyKind::Hand21, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&spec, 4, 10, TopologyKind::Hand21, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generator_rejects_bad_sizes() {
        let spec = SyntheticMotionSpec::standard(MotionFamily::TwoPhase);
        assert!(matches!(
            generate_synthetic(&spec, 1, 0, TopologyKind::Body13, 0),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            generate_synthetic(&spec, 0, 5, TopologyKind::Body13, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn split_is_ninety_ten_and_exhaustive() {
        let samples = standard_benchmark(25, 3, TopologyKind::Body13, 1).unwrap();
        let (train, test) = split(&samples, DEFAULT_TRAIN_FRACTION, 5).unwrap();
        assert_eq!((train.len(), test.len()), (90, 10));
        let (train2, test2) = split(&samples, DEFAULT_TRAIN_FRACTION, 5).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        let mut ids: Vec<_> = train.iter().chain(&test).map(|s| s.id.clone()).collect();
        ids.sort();
        let mut all: Vec<_> = samples.iter().map(|s| s.id.clone()).collect();
        all.sort();
        assert_eq!(ids, all);
    }

    #[test]
    fn family_names_parse() {
        for f in MotionFamily::ALL {
            assert_eq!(f.as_str().parse::<MotionFamily>().unwrap(), f);
        }
        let err = "moonwalk".parse::<MotionFamily>().unwrap_err().to_string();
        assert!(err.contains("linear_drift"));
    }
}
