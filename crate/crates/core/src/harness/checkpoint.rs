//! Checkpoint files.
//!
//! Layout: the line `posecast-ckpt-v1`, one line of compact JSON metadata,
//! then every tensor listed in the metadata as row-major little-endian
//! `f64`, in listed order. Tensor names are prefixed by role: `param/`,
//! `adam_m/`, `adam_v/`, `best/`, plus `codebook` and `db/keys`,
//! `db/futures` for the two-stage and retrieval methods.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, Forecaster, Method};
use crate::baselines::lstm::LstmForecaster;
use crate::baselines::quantized::{Codebook, QuantizedForecaster, TokenTransformer};
use crate::baselines::retrieval::{KeyKind, RetrievalDb};
use crate::context::ContextProviderConfig;
use crate::error::{Error, Result};
use crate::model::{InputMode, PoseDecoder};
use crate::optim::{AdamW, AdamWConfig};
use crate::pose::{PoseSequence, TopologyKind};

pub const CHECKPOINT_FORMAT: &str = "posecast-ckpt-v1";

/// Loop bookkeeping carried across a resume.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub best_step: Option<usize>,
    pub best_val_ade: Option<f64>,
    pub evals_since_best: usize,
    pub best_params: Option<Vec<(String, Array2<f64>)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerMeta {
    step: u64,
    config: AdamWConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngMeta {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateMeta {
    step: usize,
    best_step: Option<usize>,
    best_val_ade: Option<f64>,
    evals_since_best: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    method: Method,
    config: ExperimentConfig,
    context: ContextProviderConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    retrieval: Option<(KeyKind, usize)>,
    optimizer: Option<OptimizerMeta>,
    rng: Option<RngMeta>,
    state: StateMeta,
    tensors: Vec<TensorMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    header: Header,
    tensors: Vec<(String, Array2<f64>)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Format {
        format: CHECKPOINT_FORMAT,
        reason: format!("bad rng seed {s:?}"),
    };
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

impl Checkpoint {
    /// Snapshot of a forecaster plus optional optimizer and sampler state.
    /// The checkpoint directory is not recorded, so identical runs written
    /// to different places produce identical bytes.
    pub fn capture(
        forecaster: &Forecaster,
        cfg: &ExperimentConfig,
        opt: Option<&AdamW>,
        rng: Option<&ChaCha8Rng>,
        state: &TrainState,
    ) -> Result<Self> {
        let mut tensors: Vec<(String, Array2<f64>)> = Vec::new();
        let mut context = cfg.context.clone();
        let mut retrieval = None;
        if let Some(t) = forecaster.trainable() {
            let params = t.params();
            for (_, name, v) in params.iter() {
                tensors.push((format!("param/{name}"), v.clone()));
            }
            if let Some(opt) = opt {
                for (prefix, moments) in [("adam_m", &opt.m), ("adam_v", &opt.v)] {
                    for ((_, name, _), m) in params.iter().zip(moments) {
                        tensors.push((format!("{prefix}/{name}"), m.clone()));
                    }
                }
            }
            if let Some(best) = &state.best_params {
                for (name, v) in best {
                    tensors.push((format!("best/{name}"), v.clone()));
                }
            }
        }
        match forecaster {
            Forecaster::Decoder(_, m) => context = m.context_config().clone(),
            Forecaster::Lstm(m) => context = m.context_config().clone(),
            Forecaster::Quantized(q) => {
                context = q.tokens.context_config().clone();
                tensors.push(("codebook".into(), q.codebook.vectors().clone()));
            }
            Forecaster::Retrieval(_, db) => {
                let width = db.keys().first().map_or(0, |k| k.len());
                let horizon = db.futures().first().map_or(0, |f| f.horizon());
                let dim = db.futures().first().map_or(0, |f| f.dim());
                let mut keys = Array2::zeros((db.len(), width));
                let mut futures = Array2::zeros((db.len() * horizon, dim));
                for (i, (k, f)) in db.keys().iter().zip(db.futures()).enumerate() {
                    keys.row_mut(i).assign(&ndarray::ArrayView1::from(&k[..]));
                    if f.horizon() != horizon {
                        return Err(Error::Contract("retrieval futures differ in length".into()));
                    }
                    futures.slice_mut(ndarray::s![i * horizon..(i + 1) * horizon, ..]).assign(f.matrix());
                }
                tensors.push(("db/keys".into(), keys));
                tensors.push(("db/futures".into(), futures));
                retrieval = Some((db.kind(), horizon));
            }
        }
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            method: forecaster.method(),
            config: ExperimentConfig {
                train: super::TrainConfig {
                    checkpoint_dir: None,
                    ..cfg.train.clone()
                },
                ..cfg.clone()
            },
            context,
            retrieval,
            optimizer: opt.map(|o| OptimizerMeta {
                step: o.step,
                config: o.config,
            }),
            rng: rng.map(|r| RngMeta {
                seed: hex(&r.get_seed()),
                stream: r.get_stream(),
                word_pos: r.get_word_pos().to_string(),
            }),
            state: StateMeta {
                step: state.step,
                best_step: state.best_step,
                best_val_ade: state.best_val_ade,
                evals_since_best: state.evals_since_best,
            },
            tensors: tensors
                .iter()
                .map(|(n, v)| TensorMeta {
                    name: n.clone(),
                    rows: v.nrows(),
                    cols: v.ncols(),
                })
                .collect(),
        };
        Ok(Self { header, tensors })
    }

    pub fn method(&self) -> Method {
        self.header.method
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.header.config
    }

    pub fn context_config(&self) -> &ContextProviderConfig {
        &self.header.context
    }

    pub fn step(&self) -> usize {
        self.header.state.step
    }

    pub fn topology(&self) -> TopologyKind {
        self.header.config.model.topology
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_FORMAT.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&serde_json::to_vec(&self.header).expect("header serializes"));
        out.push(b'\n');
        for (_, t) in &self.tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            format: CHECKPOINT_FORMAT,
            reason,
        };
        let magic_end = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header".into()))?;
        if &bytes[..magic_end] != CHECKPOINT_FORMAT.as_bytes() {
            return Err(bad("not a posecast checkpoint".into()));
        }
        let rest = &bytes[magic_end + 1..];
        let json_end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&rest[..json_end])?;
        let mut data = &rest[json_end + 1..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for meta in &header.tensors {
            let n = meta.rows * meta.cols;
            if data.len() < 8 * n {
                return Err(bad(format!("tensor {} is truncated", meta.name)));
            }
            let values: Vec<f64> = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[8 * n..];
            let t = Array2::from_shape_vec((meta.rows, meta.cols), values).map_err(|e| bad(e.to_string()))?;
            tensors.push((meta.name.clone(), t));
        }
        if !data.is_empty() {
            return Err(bad(format!("{} trailing bytes", data.len())));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn tensor(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format {
                format: CHECKPOINT_FORMAT,
                reason: format!("missing tensor {name}"),
            })
    }

    fn with_prefix(&self, prefix: &str) -> Vec<(String, Array2<f64>)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
            .collect()
    }

    /// Fails unless this checkpoint was trained for `topology` with context
    /// width `d_m`.
    pub fn check_compatible(&self, topology: TopologyKind, d_m: usize) -> Result<()> {
        if self.topology() != topology {
            return Err(Error::Incompatible(format!(
                "checkpoint topology is {}, data topology is {topology}",
                self.topology()
            )));
        }
        if self.header.context.d_m != d_m {
            return Err(Error::Incompatible(format!(
                "checkpoint context width is {}, configured width is {d_m}",
                self.header.context.d_m
            )));
        }
        Ok(())
    }

    /// Rebuilds the forecaster with the stored parameters.
    pub fn forecaster(&self) -> Result<Forecaster> {
        let cfg = &self.header.config;
        let ctx = self.header.context.clone();
        let seed = cfg.train.seed;
        let mut f = match self.header.method {
            m @ (Method::Ours | Method::TfNtp) => {
                let mut mc = cfg.model.clone();
                if m == Method::TfNtp {
                    mc.input_mode = InputMode::Ntp;
                }
                Forecaster::Decoder(m, PoseDecoder::new(mc, ctx, seed)?)
            }
            Method::Lstm => Forecaster::Lstm(LstmForecaster::new(cfg.lstm.clone(), ctx, seed)?),
            Method::VqTf => {
                let codebook = Codebook::fitted(self.tensor("codebook")?.clone())?;
                let tokens = TokenTransformer::new(cfg.quantized.clone(), codebook.k(), ctx, seed.wrapping_add(1))?;
                Forecaster::Quantized(QuantizedForecaster::new(codebook, tokens)?)
            }
            m @ (Method::NnP | Method::NnVl) => {
                let (kind, horizon) = self.header.retrieval.ok_or_else(|| Error::Format {
                    format: CHECKPOINT_FORMAT,
                    reason: "retrieval checkpoint without database metadata".into(),
                })?;
                let keys = self.tensor("db/keys")?;
                let futures = self.tensor("db/futures")?;
                let seqs = (0..keys.nrows())
                    .map(|i| {
                        PoseSequence::from_matrix(
                            futures.slice(ndarray::s![i * horizon..(i + 1) * horizon, ..]).to_owned(),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let keys = keys.rows().into_iter().map(|r| r.to_vec()).collect();
                Forecaster::Retrieval(m, RetrievalDb::from_parts(kind, keys, seqs)?)
            }
        };
        if let Some(t) = f.trainable_mut() {
            t.params_mut().load_from(&self.with_prefix("param/"))?;
        }
        Ok(f)
    }

    /// Parameters, optimizer, sampler and loop state for continuing a run.
    pub(crate) fn restore_training(
        &self,
        forecaster: &mut Forecaster,
        cfg: &ExperimentConfig,
    ) -> Result<(AdamW, ChaCha8Rng, TrainState)> {
        if forecaster.method() != self.header.method {
            return Err(Error::Incompatible(format!(
                "checkpoint is for {}, resuming {}",
                self.header.method,
                forecaster.method()
            )));
        }
        let t = forecaster
            .trainable_mut()
            .ok_or_else(|| Error::Incompatible("nothing to resume for a retrieval method".into()))?;
        t.params_mut().load_from(&self.with_prefix("param/"))?;
        let params = t.params();
        let meta = self.header.optimizer.as_ref().ok_or_else(|| Error::Format {
            format: CHECKPOINT_FORMAT,
            reason: "checkpoint has no optimizer state".into(),
        })?;
        let mut opt = AdamW::new(cfg.train.optimizer(), params);
        opt.step = meta.step;
        for (prefix, slot) in [("adam_m/", &mut opt.m), ("adam_v/", &mut opt.v)] {
            let stored = self.with_prefix(prefix);
            for ((_, name, _), buf) in params.iter().zip(slot.iter_mut()) {
                let (_, v) = stored.iter().find(|(n, _)| n == name).ok_or_else(|| Error::Format {
                    format: CHECKPOINT_FORMAT,
                    reason: format!("missing optimizer moment {prefix}{name}"),
                })?;
                if v.dim() != buf.dim() {
                    return Err(Error::shape(format!("{:?}", buf.dim()), format!("{:?}", v.dim())));
                }
                buf.assign(v);
            }
        }
        let rng_meta = self.header.rng.as_ref().ok_or_else(|| Error::Format {
            format: CHECKPOINT_FORMAT,
            reason: "checkpoint has no sampler state".into(),
        })?;
        let mut rng = ChaCha8Rng::from_seed(unhex(&rng_meta.seed)?);
        rng.set_stream(rng_meta.stream);
        rng.set_word_pos(rng_meta.word_pos.parse().map_err(|_| Error::Format {
            format: CHECKPOINT_FORMAT,
            reason: "bad rng position".into(),
        })?);
        let best = self.with_prefix("best/");
        let s = &self.header.state;
        let state = TrainState {
            step: s.step,
            best_step: s.best_step,
            best_val_ade: s.best_val_ade,
            evals_since_best: s.evals_since_best,
            best_params: if best.is_empty() { None } else { Some(best) },
        };
        Ok((opt, rng, state))
    }
}
