//! Nearest-neighbour forecasting: return the future of the training sample
//! whose key is closest in Euclidean distance. Ties go to the lower index.

use crate::context::ContextFeatures;
use crate::error::{Error, Result};
use crate::pose::{Pose, PoseSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyKind {
    InitialPose,
    Features,
}

#[derive(Debug, Clone)]
pub struct RetrievalDb {
    kind: KeyKind,
    keys: Vec<Vec<f64>>,
    futures: Vec<PoseSequence>,
}

impl RetrievalDb {
    /// Keys are the initial poses of `entries`.
    pub fn from_poses(entries: Vec<(Pose, PoseSequence)>) -> Self {
        let (keys, futures) = entries.into_iter().map(|(p, f)| (p.into_coords(), f)).unzip();
        Self {
            kind: KeyKind::InitialPose,
            keys,
            futures,
        }
    }

    /// Keys are flattened feature matrices.
    pub fn from_features(entries: Vec<(ContextFeatures, PoseSequence)>) -> Self {
        let (keys, futures) = entries.into_iter().map(|(f, s)| (f.flatten(), s)).unzip();
        Self {
            kind: KeyKind::Features,
            keys,
            futures,
        }
    }

    /// Reassembles a database from stored keys and futures.
    pub fn from_parts(kind: KeyKind, keys: Vec<Vec<f64>>, futures: Vec<PoseSequence>) -> Result<Self> {
        if keys.len() != futures.len() {
            return Err(Error::shape(keys.len(), futures.len()));
        }
        Ok(Self { kind, keys, futures })
    }

    pub fn keys(&self) -> &[Vec<f64>] {
        &self.keys
    }

    pub fn futures(&self) -> &[PoseSequence] {
        &self.futures
    }

    pub fn kind(&self) -> KeyKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Index of the nearest key.
    pub fn nearest(&self, query: &[f64]) -> Result<usize> {
        if self.keys.is_empty() {
            return Err(Error::Config("retrieval database is empty".into()));
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, key) in self.keys.iter().enumerate() {
            if key.len() != query.len() {
                return Err(Error::shape(key.len(), query.len()));
            }
            let d: f64 = key.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        Ok(best)
    }

    pub fn future(&self, index: usize) -> &PoseSequence {
        &self.futures[index]
    }

    fn expect(&self, kind: KeyKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Incompatible(format!("database keyed by {:?}, queried by {kind:?}", self.kind)));
        }
        Ok(())
    }
}

pub fn nn_pose(query_p0: &Pose, db: &RetrievalDb) -> Result<PoseSequence> {
    db.expect(KeyKind::InitialPose)?;
    Ok(db.future(db.nearest(query_p0.coords())?).clone())
}

pub fn nn_feature(query: &ContextFeatures, db: &RetrievalDb) -> Result<PoseSequence> {
    db.expect(KeyKind::Features)?;
    Ok(db.future(db.nearest(&query.flatten())?).clone())
}

/// One-hot feature row for a label, used as the retrieval key when the
/// context is an action label rather than a feature file.
pub fn label_features(label: &str, vocabulary: &[String]) -> Result<ContextFeatures> {
    let idx = vocabulary
        .iter()
        .position(|l| l == label)
        .ok_or_else(|| Error::Vocabulary {
            label: label.to_string(),
            known: vocabulary.to_vec(),
        })?;
    let mut m = ndarray::Array2::zeros((1, vocabulary.len()));
    m[[0, idx]] = 1.0;
    ContextFeatures::new(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose::new((0..26).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn db(n: usize, seed: u64) -> (Vec<Pose>, RetrievalDb) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p0s: Vec<Pose> = (0..n).map(|_| pose(&mut rng)).collect();
        let entries = p0s
            .iter()
            .map(|p| (p.clone(), PoseSequence::repeat(&pose(&mut rng), 3).unwrap()))
            .collect();
        (p0s, RetrievalDb::from_poses(entries))
    }

    #[test]
    fn exact_match_and_ties() {
        let (p0s, db) = db(10, 1);
        assert_eq!(db.nearest(p0s[4].coords()).unwrap(), 4);
        assert_eq!(nn_pose(&p0s[7], &db).unwrap(), *db.future(7));

        let a = Pose::new(vec![1.0, 0.0]).unwrap();
        let b = Pose::new(vec![-1.0, 0.0]).unwrap();
        let fa = PoseSequence::repeat(&a, 1).unwrap();
        let fb = PoseSequence::repeat(&b, 1).unwrap();
        let tie = RetrievalDb::from_poses(vec![(b.clone(), fb), (a.clone(), fa.clone())]);
        assert_eq!(tie.nearest(&[0.0, 0.0]).unwrap(), 0);
        let tie = RetrievalDb::from_poses(vec![(a, fa), (b, PoseSequence::repeat(&Pose::zeros(1), 1).unwrap())]);
        assert_eq!(tie.nearest(&[0.0, 0.0]).unwrap(), 0);
    }

    #[test]
    fn matches_linear_scan() {
        let (p0s, db) = db(50, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q = pose(&mut rng);
            let dists: Vec<f64> = p0s
                .iter()
                .map(|p| {
                    p.coords()
                        .iter()
                        .zip(q.coords())
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            let mut oracle = 0;
            for i in 1..dists.len() {
                if dists[i] < dists[oracle] {
                    oracle = i;
                }
            }
            assert_eq!(nn_pose(&q, &db).unwrap(), *db.future(oracle));
        }
    }

    #[test]
    fn feature_retrieval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats: Vec<ContextFeatures> = (0..30)
            .map(|_| ContextFeatures::new(Array2::from_shape_fn((2, 3), |_| rng.random())).unwrap())
            .collect();
        let futures: Vec<PoseSequence> = (0..30).map(|_| PoseSequence::repeat(&pose(&mut rng), 2).unwrap()).collect();
        let db = RetrievalDb::from_features(feats.iter().cloned().zip(futures.iter().cloned()).collect());
        assert_eq!(nn_feature(&feats[12], &db).unwrap(), futures[12]);
        let q = ContextFeatures::new(Array2::from_shape_fn((2, 3), |_| rng.random())).unwrap();
        let qf = q.flatten();
        let oracle = (0..30)
            .min_by(|&i, &j| {
                let di: f64 = feats[i].flatten().iter().zip(&qf).map(|(a, b)| (a - b).powi(2)).sum();
                let dj: f64 = feats[j].flatten().iter().zip(&qf).map(|(a, b)| (a - b).powi(2)).sum();
                di.partial_cmp(&dj).unwrap()
            })
            .unwrap();
        assert_eq!(nn_feature(&q, &db).unwrap(), futures[oracle]);
        assert!(nn_pose(&pose(&mut rng), &db).is_err());
    }

    #[test]
    fn empty_db_is_a_config_error() {
        let db = RetrievalDb::from_poses(Vec::new());
        assert!(matches!(nn_pose(&Pose::zeros(13), &db), Err(Error::Config(_))));
    }

    #[test]
    fn one_hot_labels() {
        let vocab = vec!["a".to_string(), "b".to_string()];
        assert_eq!(label_features("b", &vocab).unwrap().flatten(), vec![0.0, 1.0]);
        assert!(label_features("c", &vocab).is_err());
    }
}
