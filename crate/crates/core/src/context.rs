//! Conditioning context: learned action-label embeddings, or precomputed
//! fused feature matrices loaded from a `posecast-feat-v1` container.
//!
//! # Container layout
//!
//! A container is two files. `<name>.feat` holds the 16-byte magic
//! `posecast-feat-v1` followed by each matrix as row-major little-endian
//! `f32`. The sidecar `<name>.feat.json` indexes it:
//!
//! ```json
//! {"format":"posecast-feat-v1","d_m":8,
//!  "entries":[{"id":"s0","offset":16,"rows":1,"cols":8}]}
//! ```
//!
//! `offset` is the byte position of the first value in the `.feat` file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{ParamId, ParamStore};

pub const FEATURE_FORMAT: &str = "posecast-feat-v1";
const MAGIC: &[u8; 16] = b"posecast-feat-v1";

/// An `N_M x d_M` context matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextFeatures {
    matrix: Array2<f64>,
}

impl ContextFeatures {
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::Contract("context features must be non-empty".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("context features contain non-finite values".into()));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn width(&self) -> usize {
        self.matrix.ncols()
    }

    /// Row-major flattening, used as the retrieval key of the feature
    /// nearest-neighbour baseline.
    pub fn flatten(&self) -> Vec<f64> {
        self.matrix.iter().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    LabelEmbedding,
    PrecomputedFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextProviderConfig {
    pub kind: ContextKind,
    /// Feature width `d_M`.
    pub d_m: usize,
    /// Known action labels (label embeddings only).
    #[serde(default)]
    pub vocabulary: Vec<String>,
    /// Container path (precomputed features only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl ContextProviderConfig {
    pub fn labels(vocabulary: Vec<String>, d_m: usize) -> Self {
        Self {
            kind: ContextKind::LabelEmbedding,
            d_m,
            vocabulary,
            path: None,
        }
    }

    pub fn precomputed(path: impl Into<PathBuf>, d_m: usize) -> Self {
        Self {
            kind: ContextKind::PrecomputedFile,
            d_m,
            vocabulary: Vec::new(),
            path: Some(path.into()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_m == 0 {
            return Err(Error::Config("context width d_m must be positive".into()));
        }
        match self.kind {
            ContextKind::LabelEmbedding if self.vocabulary.is_empty() => Err(Error::Config(
                "label embedding provider needs a non-empty vocabulary".into(),
            )),
            ContextKind::PrecomputedFile if self.path.is_none() => Err(Error::Config(
                "precomputed provider needs a container path".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// A learned `|vocabulary| x d_M` table; each label maps to one row.
#[derive(Debug, Clone)]
pub struct LabelEmbedding {
    vocabulary: Vec<String>,
    table: ParamId,
}

impl LabelEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, vocabulary: Vec<String>, init: Array2<f64>) -> Result<Self> {
        if vocabulary.is_empty() {
            return Err(Error::Config("empty vocabulary".into()));
        }
        if init.nrows() != vocabulary.len() {
            return Err(Error::shape(vocabulary.len(), init.nrows()));
        }
        let table = store.add(format!("{name}.table"), init);
        Ok(Self { vocabulary, table })
    }

    pub fn table(&self) -> ParamId {
        self.table
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.vocabulary
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Vocabulary {
                label: label.to_string(),
                known: self.vocabulary.clone(),
            })
    }

    /// Current embedding of `label` as a `1 x d_M` feature matrix.
    pub fn encode(&self, store: &ParamStore, label: &str) -> Result<ContextFeatures> {
        let row = self.index_of(label)?;
        let table = store.get(self.table);
        ContextFeatures::new(table.slice(ndarray::s![row..row + 1, ..]).to_owned())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    offset: u64,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ContainerIndex {
    format: String,
    d_m: usize,
    entries: Vec<IndexEntry>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// In-memory view of a feature container.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    d_m: usize,
    entries: BTreeMap<String, ContextFeatures>,
}

impl FeatureStore {
    pub fn new(d_m: usize) -> Self {
        Self {
            d_m,
            entries: BTreeMap::new(),
        }
    }

    pub fn d_m(&self) -> usize {
        self.d_m
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Values are rounded to `f32` on insertion, matching what a round trip
    /// through the container returns.
    pub fn insert(&mut self, id: impl Into<String>, features: &ContextFeatures) -> Result<()> {
        if features.width() != self.d_m {
            return Err(Error::shape(format!("d_m = {}", self.d_m), features.width()));
        }
        let rounded = features.matrix().mapv(|v| v as f32 as f64);
        self.entries.insert(id.into(), ContextFeatures::new(rounded)?);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&ContextFeatures> {
        self.entries.get(id).ok_or_else(|| Error::NotFound(id.to_string()))
    }

    /// Fails unless the container width equals the model's context width.
    pub fn check_width(&self, d_m: usize) -> Result<()> {
        if self.d_m != d_m {
            return Err(Error::shape(format!("context width {d_m}"), format!("container width {}", self.d_m)));
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = MAGIC.to_vec();
        let mut entries = Vec::with_capacity(self.entries.len());
        for (id, f) in &self.entries {
            entries.push(IndexEntry {
                id: id.clone(),
                offset: bytes.len() as u64,
                rows: f.rows(),
                cols: f.width(),
            });
            for v in f.matrix().iter() {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let index = ContainerIndex {
            format: FEATURE_FORMAT.to_string(),
            d_m: self.d_m,
            entries,
        };
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |reason: String| Error::Format {
            format: FEATURE_FORMAT,
            reason,
        };
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad(format!("{} lacks the container magic", path.display())));
        }
        let side = sidecar_path(path);
        let raw = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let index: ContainerIndex = serde_json::from_slice(&raw)?;
        if index.format != FEATURE_FORMAT {
            return Err(bad(format!("unsupported index format {:?}", index.format)));
        }
        let mut store = FeatureStore::new(index.d_m);
        for e in index.entries {
            if e.cols != index.d_m {
                return Err(Error::shape(format!("d_m = {}", index.d_m), format!("{} for {}", e.cols, e.id)));
            }
            let start = e.offset as usize;
            let end = start + 4 * e.rows * e.cols;
            if end > bytes.len() {
                return Err(bad(format!("entry {} runs past the end of the file", e.id)));
            }
            let values: Vec<f64> = bytes[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let m = Array2::from_shape_vec((e.rows, e.cols), values)
                .map_err(|err| bad(err.to_string()))?;
            store.entries.insert(e.id, ContextFeatures::new(m)?);
        }
        Ok(store)
    }
}

/// Loads a single entry from a container on disk.
pub fn load_precomputed(path: impl AsRef<Path>, sample_id: &str) -> Result<ContextFeatures> {
    FeatureStore::load(path)?.get(sample_id).cloned()
}
