//! Training loop, experiment configuration, method roster and evaluation.

pub mod checkpoint;
pub mod experiments;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::lstm::{LstmConfig, LstmForecaster};
use crate::baselines::quantized::{QuantizedConfig, QuantizedForecaster};
use crate::baselines::retrieval::{label_features, RetrievalDb};
use crate::context::{ContextKind, ContextProviderConfig, FeatureStore};
use crate::dataset::{self, Sample};
use crate::error::{Error, Result};
use crate::loss::{LossWeights, RelativeObjective, DEFAULT_EPSILON};
use crate::metrics::{self, EvalReport};
use crate::model::{Context, Example, InputMode, ModelConfig, PoseDecoder};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::pose::{Pose, PoseSequence, SkeletonTopology, TopologyKind};
use crate::tape::ParamStore;

pub use checkpoint::{Checkpoint, TrainState, CHECKPOINT_FORMAT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ours")]
    Ours,
    #[serde(rename = "tf-ntp")]
    TfNtp,
    #[serde(rename = "lstm")]
    Lstm,
    #[serde(rename = "vq-tf")]
    VqTf,
    #[serde(rename = "nn-p")]
    NnP,
    #[serde(rename = "nn-vl")]
    NnVl,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Ours,
        Method::TfNtp,
        Method::Lstm,
        Method::VqTf,
        Method::NnP,
        Method::NnVl,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::TfNtp => "tf-ntp",
            Method::Lstm => "lstm",
            Method::VqTf => "vq-tf",
            Method::NnP => "nn-p",
            Method::NnVl => "nn-vl",
        }
    }

    pub fn is_trained(&self) -> bool {
        !matches!(self, Method::NnP | Method::NnVl)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Method::ALL.iter().map(|m| m.as_str()).collect();
                Error::Config(format!("unknown method {s:?}; expected one of {}", known.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub loss: LossWeights,
    /// Steps between validation passes; 0 disables them.
    pub eval_every: usize,
    /// Validation passes without improvement before stopping; 0 disables
    /// early stopping.
    pub patience: usize,
    pub grad_clip: Option<f64>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 64,
            max_steps: 2000,
            seed: 0,
            weight_decay: 0.01,
            loss: LossWeights::default(),
            eval_every: 100,
            patience: 0,
            grad_clip: Some(1.0),
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        self.loss.validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Synthetic benchmark parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub per_family: usize,
    pub horizon: usize,
    pub topology: TopologyKind,
    pub seed: u64,
    pub train_fraction: f64,
    /// Share of the training split held out for early stopping.
    pub validation_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            per_family: 200,
            horizon: dataset::DEFAULT_HORIZON,
            topology: TopologyKind::Body13,
            seed: 0,
            train_fraction: dataset::DEFAULT_TRAIN_FRACTION,
            validation_fraction: 0.1,
        }
    }
}

/// Everything a run needs; read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub lstm: LstmConfig,
    pub quantized: QuantizedConfig,
    pub context: ContextProviderConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            lstm: LstmConfig::default(),
            quantized: QuantizedConfig::default(),
            context: ContextProviderConfig::labels(dataset::standard_vocabulary(), 16),
            data: DataConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        self.context.validate()?;
        if self.lstm.topology != self.model.topology || self.quantized.topology != self.model.topology {
            return Err(Error::Config("model, lstm and quantized topologies must agree".into()));
        }
        Ok(())
    }

    /// Copies the topology into every model section.
    pub fn with_topology(mut self, topology: TopologyKind) -> Self {
        self.model.topology = topology;
        self.lstm.topology = topology;
        self.quantized.topology = topology;
        self.data.topology = topology;
        self
    }

    /// Reduced widths and budgets that run the whole benchmark on a CPU.
    ///
    /// The distance and direction terms are down-weighted: on normalized
    /// coordinates with frame noise their floors sit three orders of
    /// magnitude above the coordinate error and swamp its gradient.
    pub fn desk_scale() -> Self {
        let mut cfg = Self::default();
        cfg.model = ModelConfig::small();
        cfg.lstm = LstmConfig {
            hidden: 48,
            ..LstmConfig::default()
        };
        cfg.train = TrainConfig {
            learning_rate: 3e-4,
            batch_size: 32,
            max_steps: 2000,
            eval_every: 100,
            patience: 0,
            loss: LossWeights {
                alpha: 1e-4,
                beta: 1e-4,
                theta: 1.0,
            },
            ..TrainConfig::default()
        };
        cfg
    }

    /// The same experiment on benchmark draw and training stream `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.data.seed = seed;
        self
    }
}

/// Maps samples to model conditioning.
#[derive(Debug, Clone)]
pub enum ContextProvider {
    Labels(ContextProviderConfig),
    Precomputed(ContextProviderConfig, FeatureStore),
}

impl ContextProvider {
    pub fn from_config(cfg: &ContextProviderConfig) -> Result<Self> {
        cfg.validate()?;
        match cfg.kind {
            ContextKind::LabelEmbedding => Ok(ContextProvider::Labels(cfg.clone())),
            ContextKind::PrecomputedFile => {
                let path = cfg.path.as_ref().expect("validated");
                let store = FeatureStore::load(path)?;
                store.check_width(cfg.d_m)?;
                Ok(ContextProvider::Precomputed(cfg.clone(), store))
            }
        }
    }

    pub fn config(&self) -> &ContextProviderConfig {
        match self {
            ContextProvider::Labels(c) | ContextProvider::Precomputed(c, _) => c,
        }
    }

    pub fn context_for(&self, sample: &Sample) -> Result<Context> {
        match self {
            ContextProvider::Labels(cfg) => {
                if !cfg.vocabulary.contains(&sample.label) {
                    return Err(Error::Vocabulary {
                        label: sample.label.clone(),
                        known: cfg.vocabulary.clone(),
                    });
                }
                Ok(Context::Label(sample.label.clone()))
            }
            ContextProvider::Precomputed(_, store) => {
                let key = sample.context_ref.as_deref().unwrap_or(&sample.id);
                Ok(Context::Features(store.get(key)?.clone()))
            }
        }
    }

    /// Retrieval key for the feature nearest-neighbour baseline.
    pub fn retrieval_features(&self, ctx: &Context) -> Result<crate::context::ContextFeatures> {
        match (self, ctx) {
            (ContextProvider::Labels(cfg), Context::Label(l)) => label_features(l, &cfg.vocabulary),
            (_, Context::Features(f)) => Ok(f.clone()),
            (ContextProvider::Precomputed(..), Context::Label(_)) => {
                Err(Error::Incompatible("label context with a feature-file provider".into()))
            }
        }
    }
}

/// A sample with its resolved conditioning.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub sample: Sample,
    pub context: Context,
}

impl Prepared {
    pub fn example(&self) -> Example<'_> {
        Example {
            p0: &self.sample.p0,
            future: &self.sample.future,
            context: &self.context,
        }
    }
}

pub fn prepare(samples: &[Sample], provider: &ContextProvider) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            Ok(Prepared {
                sample: s.clone(),
                context: provider.context_for(s)?,
            })
        })
        .collect()
}

/// Train / validation / test split of the synthetic benchmark.
#[derive(Debug, Clone)]
pub struct BenchmarkData {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn benchmark_data(data: &DataConfig) -> Result<BenchmarkData> {
    let all = dataset::standard_benchmark(data.per_family, data.horizon, data.topology, data.seed)?;
    split_for_training(&all, data)
}

/// Train / test split by `train_fraction`, then a validation share carved
/// from the training side, both seeded by `data.seed`.
pub fn split_for_training(samples: &[Sample], data: &DataConfig) -> Result<BenchmarkData> {
    let (train, test) = dataset::split(samples, data.train_fraction, data.seed)?;
    let (train, validation) = if data.validation_fraction > 0.0 {
        dataset::split(&train, 1.0 - data.validation_fraction, data.seed.wrapping_add(1))?
    } else {
        (train, Vec::new())
    };
    Ok(BenchmarkData {
        train,
        validation,
        test,
    })
}

/// Models the optimizer can update.
pub trait Trainable {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn batch_loss(
        &self,
        batch: &[Example],
        objective: &RelativeObjective,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<Array2<f64>>)>;
}

impl Trainable for PoseDecoder {
    fn params(&self) -> &ParamStore {
        PoseDecoder::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        PoseDecoder::params_mut(self)
    }

    fn batch_loss(&self, batch: &[Example], objective: &RelativeObjective, rng: &mut ChaCha8Rng) -> Result<(f64, Vec<Array2<f64>>)> {
        self.loss_and_gradients(batch, objective, Some(rng))
    }
}

impl Trainable for LstmForecaster {
    fn params(&self) -> &ParamStore {
        LstmForecaster::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        LstmForecaster::params_mut(self)
    }

    fn batch_loss(&self, batch: &[Example], objective: &RelativeObjective, _: &mut ChaCha8Rng) -> Result<(f64, Vec<Array2<f64>>)> {
        self.loss_and_gradients(batch, objective)
    }
}

impl Trainable for QuantizedForecaster {
    fn params(&self) -> &ParamStore {
        self.tokens.params()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.tokens.params_mut()
    }

    /// The token model's cross-entropy; the pose objective does not apply.
    fn batch_loss(&self, batch: &[Example], _: &RelativeObjective, _: &mut ChaCha8Rng) -> Result<(f64, Vec<Array2<f64>>)> {
        self.tokens.loss_and_gradients(batch, &self.codebook)
    }
}

/// A trained or trainable forecaster of any method.
#[derive(Debug, Clone)]
pub enum Forecaster {
    Decoder(Method, PoseDecoder),
    Lstm(LstmForecaster),
    Quantized(QuantizedForecaster),
    Retrieval(Method, RetrievalDb),
}

impl Forecaster {
    /// Builds an untrained forecaster. The codebook of `vq-tf` and the
    /// databases of the retrieval methods are fitted on `train` here.
    pub fn build(method: Method, cfg: &ExperimentConfig, provider: &ContextProvider, train: &[Prepared]) -> Result<Self> {
        let seed = cfg.train.seed;
        let ctx_cfg = provider.config().clone();
        match method {
            Method::Ours | Method::TfNtp => {
                let mut mc = cfg.model.clone();
                if method == Method::TfNtp {
                    mc.input_mode = InputMode::Ntp;
                }
                Ok(Forecaster::Decoder(method, PoseDecoder::new(mc, ctx_cfg, seed)?))
            }
            Method::Lstm => Ok(Forecaster::Lstm(LstmForecaster::new(cfg.lstm.clone(), ctx_cfg, seed)?)),
            Method::VqTf => {
                let pairs: Vec<(&Pose, &PoseSequence)> =
                    train.iter().map(|p| (&p.sample.p0, &p.sample.future)).collect();
                if pairs.is_empty() {
                    return Err(Error::Config("cannot fit a codebook on an empty training set".into()));
                }
                Ok(Forecaster::Quantized(QuantizedForecaster::fit_codebook(
                    cfg.quantized.clone(),
                    ctx_cfg,
                    &pairs,
                    seed,
                )?))
            }
            Method::NnP => Ok(Forecaster::Retrieval(
                method,
                RetrievalDb::from_poses(
                    train
                        .iter()
                        .map(|p| (p.sample.p0.clone(), p.sample.future.clone()))
                        .collect(),
                ),
            )),
            Method::NnVl => Ok(Forecaster::Retrieval(
                method,
                RetrievalDb::from_features(
                    train
                        .iter()
                        .map(|p| Ok((provider.retrieval_features(&p.context)?, p.sample.future.clone())))
                        .collect::<Result<Vec<_>>>()?,
                ),
            )),
        }
    }

    pub fn method(&self) -> Method {
        match self {
            Forecaster::Decoder(m, _) | Forecaster::Retrieval(m, _) => *m,
            Forecaster::Lstm(_) => Method::Lstm,
            Forecaster::Quantized(_) => Method::VqTf,
        }
    }

    pub fn trainable(&self) -> Option<&dyn Trainable> {
        match self {
            Forecaster::Decoder(_, m) => Some(m),
            Forecaster::Lstm(m) => Some(m),
            Forecaster::Quantized(m) => Some(m),
            Forecaster::Retrieval(..) => None,
        }
    }

    pub fn trainable_mut(&mut self) -> Option<&mut dyn Trainable> {
        match self {
            Forecaster::Decoder(_, m) => Some(m),
            Forecaster::Lstm(m) => Some(m),
            Forecaster::Quantized(m) => Some(m),
            Forecaster::Retrieval(..) => None,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.trainable().map_or(0, |t| t.params().num_scalars())
    }

    pub fn topology(&self) -> Option<TopologyKind> {
        match self {
            Forecaster::Decoder(_, m) => Some(m.config().topology),
            Forecaster::Lstm(m) => Some(m.config().topology),
            Forecaster::Quantized(m) => Some(m.topology().kind()),
            Forecaster::Retrieval(..) => None,
        }
    }

    /// Forecasts for a batch of samples sharing a horizon.
    pub fn predict(&self, items: &[(&Pose, &Context)], horizon: usize, provider: &ContextProvider) -> Result<Vec<PoseSequence>> {
        match self {
            Forecaster::Decoder(_, m) => m.predict_batch(items, horizon),
            Forecaster::Lstm(m) => m.generate_batch(items, horizon),
            Forecaster::Quantized(m) => m.generate_batch(items, horizon),
            Forecaster::Retrieval(method, db) => items
                .iter()
                .map(|(p0, ctx)| {
                    let idx = match method {
                        Method::NnP => db.nearest(p0.coords())?,
                        _ => db.nearest(&provider.retrieval_features(ctx)?.flatten())?,
                    };
                    let seq = db.future(idx);
                    if seq.horizon() < horizon {
                        return Err(Error::Contract(format!(
                            "retrieved sequence has {} frames, {horizon} requested",
                            seq.horizon()
                        )));
                    }
                    PoseSequence::from_matrix(seq.matrix().slice(ndarray::s![..horizon, ..]).to_owned())
                })
                .collect(),
        }
    }

    /// Predictions for every prepared sample, in chunks of `chunk`.
    pub fn predict_all(&self, data: &[Prepared], provider: &ContextProvider, chunk: usize) -> Result<Vec<PoseSequence>> {
        let mut out = Vec::with_capacity(data.len());
        for part in data.chunks(chunk.max(1)) {
            let horizon = part[0].sample.horizon();
            if part.iter().any(|p| p.sample.horizon() != horizon) {
                return Err(Error::Contract("horizons differ within an evaluation set".into()));
            }
            let items: Vec<(&Pose, &Context)> = part.iter().map(|p| (&p.sample.p0, &p.context)).collect();
            out.extend(self.predict(&items, horizon, provider)?);
        }
        Ok(out)
    }
}

pub const EVAL_CHUNK: usize = 64;

/// Evaluates `forecaster` on `data`. The two-stage baseline also reports
/// its codebook's reconstruction error on the same ground truth.
pub fn evaluate(forecaster: &Forecaster, data: &[Prepared], provider: &ContextProvider, delta: Option<f64>) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    let preds = forecaster.predict_all(data, provider, EVAL_CHUNK)?;
    let gts: Vec<PoseSequence> = data.iter().map(|p| p.sample.future.clone()).collect();
    let delta = delta.unwrap_or_else(|| data[0].sample.topology.default_pck_delta());
    let mut report = metrics::evaluate(forecaster.method().as_str(), &preds, &gts, delta)?;
    if let Forecaster::Quantized(q) = forecaster {
        let refs: Vec<&PoseSequence> = gts.iter().collect();
        report.reconstruction_rmse = Some(q.codebook.reconstruction_rmse(&refs)?);
    }
    Ok(report)
}

fn mean_ade(forecaster: &Forecaster, data: &[Prepared], provider: &ContextProvider) -> Result<f64> {
    let preds = forecaster.predict_all(data, provider, EVAL_CHUNK)?;
    let mut total = 0.0;
    for (p, d) in preds.iter().zip(data) {
        total += metrics::ade(p, &d.sample.future)?;
    }
    Ok(total / data.len() as f64)
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grad_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_ade: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<LogEntry>,
    pub steps: usize,
    pub best_step: Option<usize>,
    pub best_val_ade: Option<f64>,
    pub stopped_early: bool,
    /// Final checkpoint (best parameters restored) when a directory was set.
    pub checkpoint: Option<PathBuf>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|e| e.loss).collect()
    }
}

/// Optional extras for [`train`].
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub resume: Option<Checkpoint>,
    pub log: Option<&'a mut dyn Write>,
}

/// AdamW on mini-batches drawn without replacement from `train` by a
/// ChaCha8 stream seeded with `cfg.train.seed`. Every `eval_every` steps
/// the mean ADE on `validation` is measured; the best parameters are kept
/// and restored at the end. A non-finite loss aborts with
/// [`Error::Divergence`].
pub fn train(
    forecaster: &mut Forecaster,
    train: &[Prepared],
    validation: &[Prepared],
    cfg: &ExperimentConfig,
    provider: &ContextProvider,
    mut options: TrainOptions,
) -> Result<TrainOutcome> {
    cfg.train.validate()?;
    let tc = &cfg.train;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let method = forecaster.method();
    if !method.is_trained() {
        return Ok(TrainOutcome {
            log: Vec::new(),
            steps: 0,
            best_step: None,
            best_val_ade: None,
            stopped_early: false,
            checkpoint: save_final(forecaster, cfg, None, &TrainState::default(), None)?,
        });
    }
    let topo = SkeletonTopology::build(cfg.model.topology)?;
    let objective = RelativeObjective::new(topo, tc.loss, DEFAULT_EPSILON)?;

    let (mut opt, mut rng, mut state) = match options.resume.take() {
        Some(ckpt) => ckpt.restore_training(forecaster, cfg)?,
        None => {
            let params = forecaster.trainable().expect("trained method").params();
            (
                AdamW::new(tc.optimizer(), params),
                ChaCha8Rng::seed_from_u64(tc.seed),
                TrainState::default(),
            )
        }
    };
    let mut log = Vec::new();
    let mut last_good: Option<PathBuf> = None;
    let mut stopped_early = false;
    let batch = tc.batch_size.min(train.len());

    while state.step < tc.max_steps {
        let idx = index::sample(&mut rng, train.len(), batch).into_vec();
        let examples: Vec<Example> = idx.iter().map(|&i| train[i].example()).collect();
        let model = forecaster.trainable_mut().expect("trained method");
        let (loss, mut grads) = model.batch_loss(&examples, &objective, &mut rng)?;
        let mut grad_norm = None;
        if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence {
                step: state.step + 1,
                last_good,
            });
        }
        if let Some(c) = tc.grad_clip {
            grad_norm = Some(clip_global_norm(&mut grads, c));
        }
        opt.update(model.params_mut(), &grads);
        state.step += 1;

        let mut entry = LogEntry {
            step: state.step,
            loss,
            grad_norm,
            val_ade: None,
        };
        let eval_now = tc.eval_every > 0 && (state.step % tc.eval_every == 0 || state.step == tc.max_steps);
        if eval_now && !validation.is_empty() {
            // Validation data passed the same checks as training data, so a
            // failed or non-finite forecast here means the weights blew up.
            let ade = match mean_ade(forecaster, validation, provider) {
                Ok(a) if a.is_finite() => a,
                Ok(_) | Err(Error::Contract(_)) => {
                    return Err(Error::Divergence {
                        step: state.step,
                        last_good,
                    })
                }
                Err(e) => return Err(e),
            };
            entry.val_ade = Some(ade);
            log::info!("{method} step {}: loss {loss:.5}, validation ADE {ade:.4}", state.step);
            if state.best_val_ade.is_none_or(|b| ade < b) {
                state.best_val_ade = Some(ade);
                state.best_step = Some(state.step);
                state.best_params = Some(forecaster.trainable().unwrap().params().iter().map(|(_, n, v)| (n.to_string(), v.clone())).collect());
                state.evals_since_best = 0;
            } else {
                state.evals_since_best += 1;
            }
        }
        if let Some(w) = options.log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &entry)?;
            writeln!(w).map_err(|e| Error::io("<log>", e))?;
        }
        log.push(entry);
        if eval_now {
            if let Some(dir) = &tc.checkpoint_dir {
                let path = dir.join("last.ckpt");
                Checkpoint::capture(forecaster, cfg, Some(&opt), Some(&rng), &state)?.save(&path)?;
                last_good = Some(path);
            }
            if tc.patience > 0 && state.evals_since_best >= tc.patience {
                stopped_early = true;
                break;
            }
        }
    }

    if let Some(best) = &state.best_params {
        forecaster.trainable_mut().unwrap().params_mut().load_from(best)?;
    }
    let checkpoint = save_final(forecaster, cfg, Some(&opt), &state, Some(&rng))?;
    Ok(TrainOutcome {
        log,
        steps: state.step,
        best_step: state.best_step,
        best_val_ade: state.best_val_ade,
        stopped_early,
        checkpoint,
    })
}

fn save_final(
    forecaster: &Forecaster,
    cfg: &ExperimentConfig,
    opt: Option<&AdamW>,
    state: &TrainState,
    rng: Option<&ChaCha8Rng>,
) -> Result<Option<PathBuf>> {
    match &cfg.train.checkpoint_dir {
        Some(dir) => {
            let path = dir.join("final.ckpt");
            Checkpoint::capture(forecaster, cfg, opt, rng, state)?.save(&path)?;
            Ok(Some(path))
        }
        None => Ok(None),
    }
}
