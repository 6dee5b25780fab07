//! The one-stage forecaster: a transformer decoder whose input is the
//! initial pose followed by copies of a learned placeholder row, read out
//! as displacements from the initial pose in a single forward pass.
//!
//! The same network run on teacher-forced inputs with a causal mask is the
//! next-token comparator used in the drift and ablation experiments.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::{ContextFeatures, ContextKind, ContextProviderConfig, LabelEmbedding};
use crate::error::{Error, Result};
use crate::loss::RelativeObjective;
use crate::nn::{self, DecoderStack, DropoutCtx, Linear, StackShape};
use crate::pose::{apply_displacements, DisplacementSequence, Pose, PoseSequence, SkeletonTopology, TopologyKind};
use crate::tape::{ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Full,
    Causal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// Teacher-forced ground truth in training, own predictions at inference.
    Ntp,
    /// `P0` followed by placeholder rows, identical in training and inference.
    Placeholder,
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::Ntp => "ntp",
            InputMode::Placeholder => "placeholder",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AttentionMode::Full),
            "causal" => Ok(AttentionMode::Causal),
            other => Err(Error::Config(format!("unknown attention mode {other:?} (full, causal)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub feedforward_width: usize,
    /// Self-attention mask. Next-token inputs are always masked causally.
    pub attention_mode: AttentionMode,
    pub input_mode: InputMode,
    pub horizon: usize,
    pub topology: TopologyKind,
    pub dropout: f64,
    pub positional_encoding: bool,
    /// Subtract the centroid of `P0` from every pose row before projection.
    pub center_on_p0: bool,
    /// Keep the placeholder row fixed at zero instead of learning it.
    pub zero_prd: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            feedforward_width: 512,
            attention_mode: AttentionMode::Causal,
            input_mode: InputMode::Placeholder,
            horizon: crate::dataset::DEFAULT_HORIZON,
            topology: TopologyKind::Body13,
            dropout: 0.0,
            positional_encoding: true,
            center_on_p0: false,
            zero_prd: false,
        }
    }
}

impl ModelConfig {
    /// A narrow configuration that trains in minutes on a CPU.
    pub fn small() -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            feedforward_width: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("feedforward_width", self.feedforward_width),
            ("horizon", self.horizon),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.topology == TopologyKind::Custom {
            return Err(Error::Config("models need a canonical topology".into()));
        }
        Ok(())
    }

    pub fn causal(&self) -> bool {
        self.input_mode == InputMode::Ntp || self.attention_mode == AttentionMode::Causal
    }
}

/// The `T x 2N` decoder input of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderInput {
    pub rows: Array2<f64>,
    pub mode: InputMode,
    /// Placeholder row used for rows `1..T` (placeholder mode).
    pub prd_token: Option<Vec<f64>>,
}

impl DecoderInput {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }
}

/// Conditioning for one sample: an action label resolved through the
/// model's embedding table, or a precomputed feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Context {
    Label(String),
    Features(ContextFeatures),
}

/// One training example.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub p0: &'a Pose,
    pub future: &'a PoseSequence,
    pub context: &'a Context,
}

#[derive(Debug, Clone)]
enum ContextSource {
    Labels(LabelEmbedding),
    Precomputed,
}

#[derive(Debug)]
pub struct PoseDecoder {
    config: ModelConfig,
    context_config: ContextProviderConfig,
    topo: SkeletonTopology,
    params: ParamStore,
    context: ContextSource,
    prd: crate::tape::ParamId,
    input_proj: Linear,
    context_proj: Linear,
    stack: DecoderStack,
    head: Linear,
    forwards: AtomicU64,
}

impl Clone for PoseDecoder {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            context_config: self.context_config.clone(),
            topo: self.topo.clone(),
            params: self.params.clone(),
            context: self.context.clone(),
            prd: self.prd,
            input_proj: self.input_proj.clone(),
            context_proj: self.context_proj.clone(),
            stack: self.stack.clone(),
            head: self.head.clone(),
            forwards: AtomicU64::new(self.forward_count()),
        }
    }
}

impl PoseDecoder {
    /// Parameters are drawn from a ChaCha8 stream seeded with `seed`; the
    /// output head starts at zero, so an untrained model predicts no motion.
    pub fn new(config: ModelConfig, context_config: ContextProviderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        context_config.validate()?;
        let topo = SkeletonTopology::build(config.topology)?;
        let dim = topo.dim();
        let d = config.d_model;
        let d_m = context_config.d_m;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();

        let context = match context_config.kind {
            ContextKind::LabelEmbedding => {
                let init = nn::normal(&mut rng, context_config.vocabulary.len(), d_m, 1.0);
                ContextSource::Labels(LabelEmbedding::new(
                    &mut params,
                    "context.embedding",
                    context_config.vocabulary.clone(),
                    init,
                )?)
            }
            ContextKind::PrecomputedFile => ContextSource::Precomputed,
        };
        let prd_init = if config.zero_prd {
            Array2::zeros((1, dim))
        } else {
            nn::normal(&mut rng, 1, dim, 0.02)
        };
        let prd = params.add("decoder.prd", prd_init);
        let input_proj = Linear::new(&mut params, "decoder.input_proj", dim, d, &mut rng);
        let context_proj = Linear::new(&mut params, "decoder.context_proj", d_m, d, &mut rng);
        let stack = DecoderStack::new(
            &mut params,
            "decoder.stack",
            d,
            config.n_heads,
            config.n_layers,
            config.feedforward_width,
            &mut rng,
        );
        let head = Linear::zeros(&mut params, "decoder.head", d, dim);
        Ok(Self {
            config,
            context_config,
            topo,
            params,
            context,
            prd,
            input_proj,
            context_proj,
            stack,
            head,
            forwards: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn context_config(&self) -> &ContextProviderConfig {
        &self.context_config
    }

    pub fn topology(&self) -> &SkeletonTopology {
        &self.topo
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Per-sample decoder passes since construction or the last reset.
    pub fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }

    pub fn prd_token(&self) -> Vec<f64> {
        self.params.get(self.prd).row(0).to_vec()
    }

    /// Gradients of parameters that must stay fixed are zeroed here.
    pub fn frozen_mask(&self) -> Vec<bool> {
        self.params
            .iter()
            .map(|(id, _, _)| self.config.zero_prd && id == self.prd)
            .collect()
    }

    fn check_pose(&self, p: &Pose) -> Result<()> {
        p.check_topology(&self.topo)
    }

    /// `P0` followed by `horizon - 1` copies of the placeholder row. The
    /// training and inference paths both call this.
    pub fn build_input_placeholder(&self, p0: &Pose, horizon: usize) -> Result<DecoderInput> {
        if horizon < 1 {
            return Err(Error::Contract("horizon must be at least 1".into()));
        }
        self.check_pose(p0)?;
        let prd = self.prd_token();
        let mut rows = Array2::zeros((horizon, self.topo.dim()));
        rows.row_mut(0).assign(&p0.view());
        for mut r in rows.rows_mut().into_iter().skip(1) {
            r.assign(&ndarray::ArrayView1::from(&prd[..]));
        }
        Ok(DecoderInput {
            rows,
            mode: InputMode::Placeholder,
            prd_token: Some(prd),
        })
    }

    /// Teacher-forced rows `P0, P1, ..., P_{T-1}` for a ground-truth future
    /// `P1..P_T`.
    pub fn build_input_ntp(&self, p0: &Pose, future: &PoseSequence) -> Result<DecoderInput> {
        self.check_pose(p0)?;
        if future.dim() != self.topo.dim() {
            return Err(Error::shape(self.topo.dim(), future.dim()));
        }
        let t = future.horizon();
        let mut rows = Array2::zeros((t, self.topo.dim()));
        rows.row_mut(0).assign(&p0.view());
        if t > 1 {
            rows.slice_mut(s![1.., ..]).assign(&future.matrix().slice(s![..t - 1, ..]));
        }
        Ok(DecoderInput {
            rows,
            mode: InputMode::Ntp,
            prd_token: None,
        })
    }

    /// Feature matrix for one context, as the model currently sees it.
    pub fn encode_context(&self, ctx: &Context) -> Result<ContextFeatures> {
        match (&self.context, ctx) {
            (ContextSource::Labels(emb), Context::Label(l)) => emb.encode(&self.params, l),
            (ContextSource::Precomputed, Context::Features(f)) => {
                if f.width() != self.context_config.d_m {
                    return Err(Error::shape(
                        format!("context width {}", self.context_config.d_m),
                        f.width(),
                    ));
                }
                Ok(f.clone())
            }
            (ContextSource::Labels(_), Context::Features(_)) => Err(Error::Incompatible(
                "model expects action labels but got precomputed features".into(),
            )),
            (ContextSource::Precomputed, Context::Label(_)) => Err(Error::Incompatible(
                "model expects precomputed features but got an action label".into(),
            )),
        }
    }

    /// Builds the memory node: context rows of all samples stacked, each
    /// sample's rows projected and tagged with their own positions.
    fn memory(&self, tape: &mut Tape, contexts: &[&Context]) -> Result<(Var, usize)> {
        let d = self.config.d_model;
        let raw = match &self.context {
            ContextSource::Labels(emb) => {
                let idx = contexts
                    .iter()
                    .map(|c| match c {
                        Context::Label(l) => emb.index_of(l),
                        Context::Features(_) => Err(Error::Incompatible(
                            "model expects action labels but got precomputed features".into(),
                        )),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let table = tape.param(emb.table());
                (tape.gather_rows(table, &idx), 1)
            }
            ContextSource::Precomputed => {
                let feats = contexts
                    .iter()
                    .map(|c| self.encode_context(c))
                    .collect::<Result<Vec<_>>>()?;
                let rows = feats[0].rows();
                if feats.iter().any(|f| f.rows() != rows) {
                    return Err(Error::Contract("context row counts differ within a batch".into()));
                }
                let views: Vec<_> = feats.iter().map(|f| f.matrix().view()).collect();
                let stacked = ndarray::concatenate(Axis(0), &views)
                    .map_err(|e| Error::Contract(e.to_string()))?;
                (tape.constant(stacked), rows)
            }
        };
        let (raw, mem_len) = raw;
        let m = self.context_proj.forward(tape, raw);
        let pe = tile(&nn::sinusoidal_encoding(mem_len, d), contexts.len());
        Ok((tape.add_const(m, &pe), mem_len))
    }

    /// Records one batched pass on `tape`; returns the `(B*T) x 2N`
    /// displacement node.
    fn forward_on_tape(
        &self,
        tape: &mut Tape,
        inputs: &[DecoderInput],
        contexts: &[&Context],
        dropout: &mut DropoutCtx,
    ) -> Result<Var> {
        let batch = inputs.len();
        if batch == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        if contexts.len() != batch {
            return Err(Error::shape(batch, contexts.len()));
        }
        let t = inputs[0].len();
        let dim = self.topo.dim();
        for inp in inputs {
            if inp.len() != t || inp.rows.ncols() != dim || t == 0 {
                return Err(Error::shape(
                    format!("{t} x {dim}"),
                    format!("{} x {}", inp.len(), inp.rows.ncols()),
                ));
            }
        }

        let mut base = Array2::zeros((batch * t, dim));
        let mut prd_rows = Vec::new();
        for (b, inp) in inputs.iter().enumerate() {
            let mut block = base.slice_mut(s![b * t..(b + 1) * t, ..]);
            block.assign(&inp.rows);
            if self.config.center_on_p0 {
                let (cx, cy) = centroid_of(&inp.rows.row(0).to_vec());
                for mut r in block.rows_mut() {
                    for k in 0..dim / 2 {
                        r[2 * k] -= cx;
                        r[2 * k + 1] -= cy;
                    }
                }
            }
            if inp.mode == InputMode::Placeholder {
                prd_rows.extend((1..t).map(|r| b * t + r));
            }
        }
        let x = if prd_rows.is_empty() {
            tape.constant(base)
        } else {
            let prd = tape.param(self.prd);
            tape.fill_rows(base, prd, &prd_rows)
        };

        let mut h = self.input_proj.forward(tape, x);
        if self.config.positional_encoding {
            let pe = tile(&nn::sinusoidal_encoding(t, self.config.d_model), batch);
            h = tape.add_const(h, &pe);
        }
        h = dropout.apply(tape, h);
        let (memory, mem_len) = self.memory(tape, contexts)?;
        let shape = StackShape {
            batch,
            seq_len: t,
            mem_len,
            causal: self.config.causal(),
        };
        let h = self.stack.forward(tape, h, memory, shape, dropout)?;
        self.forwards.fetch_add(batch as u64, Ordering::Relaxed);
        Ok(self.head.forward(tape, h))
    }

    /// Displacements from `P0` for each input, one batched pass.
    pub fn forward(&self, inputs: &[DecoderInput], contexts: &[&Context]) -> Result<Vec<DisplacementSequence>> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward_on_tape(&mut tape, inputs, contexts, &mut DropoutCtx::inference())?;
        let t = inputs[0].len();
        let values = tape.value(out);
        (0..inputs.len())
            .map(|b| DisplacementSequence::new(values.slice(s![b * t..(b + 1) * t, ..]).to_owned()))
            .collect()
    }

    /// All `horizon` frames from one decoder pass.
    pub fn generate(&self, p0: &Pose, ctx: &Context, horizon: usize) -> Result<PoseSequence> {
        Ok(self
            .generate_batch(&[(p0, ctx)], horizon)?
            .pop()
            .expect("one sample in, one out"))
    }

    pub fn generate_batch(&self, items: &[(&Pose, &Context)], horizon: usize) -> Result<Vec<PoseSequence>> {
        let inputs = items
            .iter()
            .map(|(p0, _)| self.build_input_placeholder(p0, horizon))
            .collect::<Result<Vec<_>>>()?;
        let contexts: Vec<&Context> = items.iter().map(|(_, c)| *c).collect();
        let disp = self.forward(&inputs, &contexts)?;
        items
            .iter()
            .zip(&disp)
            .map(|((p0, _), d)| apply_displacements(p0, d))
            .collect()
    }

    /// Next-token rollout: step `s` feeds `P0` and the `s - 1` frames
    /// predicted so far and keeps the last output row, `horizon` passes in
    /// total.
    pub fn generate_autoregressive(&self, p0: &Pose, ctx: &Context, horizon: usize) -> Result<PoseSequence> {
        Ok(self
            .generate_autoregressive_batch(&[(p0, ctx)], horizon)?
            .pop()
            .expect("one sample in, one out"))
    }

    pub fn generate_autoregressive_batch(
        &self,
        items: &[(&Pose, &Context)],
        horizon: usize,
    ) -> Result<Vec<PoseSequence>> {
        if horizon < 1 {
            return Err(Error::Contract("horizon must be at least 1".into()));
        }
        let dim = self.topo.dim();
        let contexts: Vec<&Context> = items.iter().map(|(_, c)| *c).collect();
        let mut rows: Vec<Array2<f64>> = Vec::with_capacity(items.len());
        for (p0, _) in items {
            self.check_pose(p0)?;
            let mut r = Array2::zeros((horizon + 1, dim));
            r.row_mut(0).assign(&p0.view());
            rows.push(r);
        }
        for step in 1..=horizon {
            let inputs: Vec<DecoderInput> = rows
                .iter()
                .map(|r| DecoderInput {
                    rows: r.slice(s![..step, ..]).to_owned(),
                    mode: InputMode::Ntp,
                    prd_token: None,
                })
                .collect();
            let disp = self.forward(&inputs, &contexts)?;
            for ((r, d), (p0, _)) in rows.iter_mut().zip(&disp).zip(items) {
                let last = d.matrix().row(step - 1);
                let next = &p0.view() + &last;
                r.row_mut(step).assign(&next);
            }
        }
        rows.into_iter()
            .map(|r| PoseSequence::from_matrix(r.slice(s![1.., ..]).to_owned()))
            .collect()
    }

    /// Inference according to the configured input mode.
    pub fn predict_batch(&self, items: &[(&Pose, &Context)], horizon: usize) -> Result<Vec<PoseSequence>> {
        match self.config.input_mode {
            InputMode::Placeholder => self.generate_batch(items, horizon),
            InputMode::Ntp => self.generate_autoregressive_batch(items, horizon),
        }
    }

    /// Training input for one example under the configured mode.
    pub fn training_input(&self, ex: &Example) -> Result<DecoderInput> {
        match self.config.input_mode {
            InputMode::Placeholder => self.build_input_placeholder(ex.p0, ex.future.horizon()),
            InputMode::Ntp => self.build_input_ntp(ex.p0, ex.future),
        }
    }

    /// Batch objective value and parameter gradients, aligned with
    /// [`ParamStore::iter`] order. Passing an rng enables dropout.
    pub fn loss_and_gradients(
        &self,
        batch: &[Example],
        objective: &RelativeObjective,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let t = batch[0].future.horizon();
        if batch.iter().any(|e| e.future.horizon() != t) {
            return Err(Error::Contract("horizons differ within a batch".into()));
        }
        let inputs = batch
            .iter()
            .map(|e| self.training_input(e))
            .collect::<Result<Vec<_>>>()?;
        let contexts: Vec<&Context> = batch.iter().map(|e| e.context).collect();
        let mut tape = Tape::new(&self.params);
        let mut dropout = DropoutCtx {
            rate: self.config.dropout,
            rng,
        };
        let out = self.forward_on_tape(&mut tape, &inputs, &contexts, &mut dropout)?;

        let dim = self.topo.dim();
        let mut gt = Array2::zeros((batch.len() * t, dim));
        let mut pred = tape.value(out).clone();
        for (b, e) in batch.iter().enumerate() {
            gt.slice_mut(s![b * t..(b + 1) * t, ..]).assign(e.future.matrix());
            let mut block = pred.slice_mut(s![b * t..(b + 1) * t, ..]);
            block += &e.p0.view();
        }
        let (loss, seed) = objective.loss_and_grad(gt.view(), pred.view())?;
        let grads = tape.backward(out, seed)?;
        let mut buffers = self.params.zeros_like();
        grads.accumulate_into(&mut buffers);
        for (g, frozen) in buffers.iter_mut().zip(self.frozen_mask()) {
            if frozen {
                g.fill(0.0);
            }
        }
        Ok((loss, buffers))
    }
}

fn tile(block: &Array2<f64>, times: usize) -> Array2<f64> {
    let views = vec![block.view(); times];
    ndarray::concatenate(Axis(0), &views).expect("identical blocks")
}

fn centroid_of(coords: &[f64]) -> (f64, f64) {
    let n = (coords.len() / 2) as f64;
    let (mut x, mut y) = (0.0, 0.0);
    for k in 0..coords.len() / 2 {
        x += coords[2 * k];
        y += coords[2 * k + 1];
    }
    (x / n, y / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{LossWeights, DEFAULT_EPSILON};
    use rand::Rng;

    fn labels() -> ContextProviderConfig {
        ContextProviderConfig::labels(vec!["swing golf".into(), "walk forward".into()], 8)
    }

    fn tiny(mode: InputMode, attention: AttentionMode) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            feedforward_width: 24,
            attention_mode: attention,
            input_mode: mode,
            horizon: 6,
            ..ModelConfig::default()
        }
    }

    fn random_pose(rng: &mut ChaCha8Rng, n: usize) -> Pose {
        Pose::new((0..2 * n).map(|_| rng.random_range(0.2..0.8)).collect()).unwrap()
    }

    /// Gives the output head random weights so outputs depend on the input.
    fn perturb_head(m: &mut PoseDecoder, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = m.params().iter().map(|(id, n, _)| (id, n.to_string())).collect();
        for (id, name) in ids {
            if name.starts_with("decoder.head") {
                let p = m.params_mut().get_mut(id);
                p.mapv_inplace(|_| rng.random_range(-0.3..0.3));
            }
        }
    }

    #[test]
    fn config_checks() {
        let mut c = ModelConfig::default();
        assert_eq!((c.d_model, c.n_heads, c.n_layers), (128, 4, 4));
        assert_eq!(c.attention_mode, AttentionMode::Causal);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c = ModelConfig {
            dropout: 1.0,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn placeholder_rows() {
        let m = PoseDecoder::new(tiny(InputMode::Placeholder, AttentionMode::Causal), labels(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p0 = random_pose(&mut rng, 13);
        let one = m.build_input_placeholder(&p0, 1).unwrap();
        assert_eq!(one.rows.nrows(), 1);
        assert_eq!(one.rows.row(0), p0.view());
        let inp = m.build_input_placeholder(&p0, 45).unwrap();
        assert_eq!(inp.rows.nrows(), 45);
        for t in 2..45 {
            assert_eq!(inp.rows.row(t), inp.rows.row(1));
        }
        assert_eq!(inp.rows.row(1).to_vec(), m.prd_token());
        assert!(m.build_input_placeholder(&p0, 0).is_err());
    }

    #[test]
    fn ntp_rows_shift_ground_truth() {
        let m = PoseDecoder::new(tiny(InputMode::Ntp, AttentionMode::Causal), labels(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p0 = random_pose(&mut rng, 13);
        let frames: Vec<Pose> = (0..5).map(|_| random_pose(&mut rng, 13)).collect();
        let future = PoseSequence::from_poses(&frames).unwrap();
        let inp = m.build_input_ntp(&p0, &future).unwrap();
        for t in 0..5 {
            for c in 0..26 {
                let expected = if t == 0 { p0.coords()[c] } else { frames[t - 1].coords()[c] };
                assert_eq!(inp.rows[[t, c]], expected);
            }
        }
        let single = m.build_input_ntp(&p0, &PoseSequence::from_poses(&frames[..1]).unwrap()).unwrap();
        assert_eq!(single.rows, m.build_input_placeholder(&p0, 1).unwrap().rows);
    }

    #[test]
    fn untrained_model_repeats_p0_in_one_pass() {
        let m = PoseDecoder::new(tiny(InputMode::Placeholder, AttentionMode::Causal), labels(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p0 = random_pose(&mut rng, 13);
        let ctx = Context::Label("swing golf".into());
        for t in [1, 10, 45] {
            m.reset_forward_count();
            let seq = m.generate(&p0, &ctx, t).unwrap();
            assert_eq!(m.forward_count(), 1);
            assert_eq!(seq, PoseSequence::repeat(&p0, t).unwrap());
        }
        m.reset_forward_count();
        let ar = m.generate_autoregressive(&p0, &ctx, 7).unwrap();
        assert_eq!(m.forward_count(), 7);
        assert_eq!(ar, PoseSequence::repeat(&p0, 7).unwrap());
    }

    #[test]
    fn unknown_label_is_rejected() {
        let m = PoseDecoder::new(tiny(InputMode::Placeholder, AttentionMode::Causal), labels(), 4).unwrap();
        let p0 = Pose::zeros(13);
        assert!(matches!(
            m.generate(&p0, &Context::Label("juggle".into()), 3),
            Err(Error::Vocabulary { .. })
        ));
    }

    #[test]
    fn batch_elements_are_independent() {
        let mut m = PoseDecoder::new(tiny(InputMode::Placeholder, AttentionMode::Causal), labels(), 6).unwrap();
        perturb_head(&mut m, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_pose(&mut rng, 13);
        let b = random_pose(&mut rng, 13);
        let golf = Context::Label("swing golf".into());
        let walk = Context::Label("walk forward".into());
        let solo = m.generate(&a, &golf, 6).unwrap();
        let batch = m.generate_batch(&[(&a, &golf), (&b, &walk), (&a, &golf)], 6).unwrap();
        assert_eq!(batch[0], solo);
        assert_eq!(batch[2], solo);
        assert_ne!(batch[1], solo);
    }

    #[test]
    fn context_row_order_matters() {
        let ctx_cfg = ContextProviderConfig::precomputed("unused.feat", 4);
        let mut m = PoseDecoder::new(tiny(InputMode::Placeholder, AttentionMode::Full), ctx_cfg, 9).unwrap();
        perturb_head(&mut m, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p0 = random_pose(&mut rng, 13);
        let f = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let mut permuted = f.clone();
        permuted.row_mut(0).assign(&f.row(2));
        permuted.row_mut(2).assign(&f.row(0));
        let a = m
            .generate(&p0, &Context::Features(ContextFeatures::new(f).unwrap()), 4)
            .unwrap();
        let b = m
            .generate(&p0, &Context::Features(ContextFeatures::new(permuted).unwrap()), 4)
            .unwrap();
        let diff = (a.matrix() - b.matrix()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff > 1e-6, "{diff}");

        let wrong = ContextFeatures::new(Array2::zeros((1, 5))).unwrap();
        assert!(matches!(m.generate(&p0, &Context::Features(wrong), 4), Err(Error::Shape { .. })));
    }

    #[test]
    fn positional_encoding_separates_placeholder_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p0 = random_pose(&mut rng, 13);
        let ctx = Context::Label("walk forward".into());
        for pe in [false, true] {
            let cfg = ModelConfig {
                positional_encoding: pe,
                ..tiny(InputMode::Placeholder, AttentionMode::Full)
            };
            let mut m = PoseDecoder::new(cfg, labels(), 13).unwrap();
            perturb_head(&mut m, 14);
            let out = m.generate(&p0, &ctx, 10).unwrap();
            let spread = (2..10)
                .flat_map(|t| (0..26).map(move |c| (t, c)))
                .map(|(t, c)| (out.matrix()[[t, c]] - out.matrix()[[1, c]]).abs())
                .fold(0.0f64, f64::max);
            if pe {
                assert!(spread > 1e-6);
            } else {
                assert!(spread < 1e-9);
            }
        }
    }

    #[test]
    fn centering_makes_generation_translation_equivariant() {
        let cfg = ModelConfig {
            center_on_p0: true,
            ..tiny(InputMode::Placeholder, AttentionMode::Causal)
        };
        let mut m = PoseDecoder::new(cfg, labels(), 15).unwrap();
        perturb_head(&mut m, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p0 = random_pose(&mut rng, 13);
        let ctx = Context::Label("swing golf".into());
        let base = m.generate(&p0, &ctx, 5).unwrap();
        let moved = m.generate(&p0.translated(0.13, -0.07), &ctx, 5).unwrap();
        let expected = base.translated(0.13, -0.07);
        for (a, b) in moved.matrix().iter().zip(expected.matrix()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn first_autoregressive_step_matches_teacher_forced_row() {
        let mut m = PoseDecoder::new(tiny(InputMode::Ntp, AttentionMode::Causal), labels(), 18).unwrap();
        perturb_head(&mut m, 19);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let p0 = random_pose(&mut rng, 13);
        let frames: Vec<Pose> = (0..4).map(|_| random_pose(&mut rng, 13)).collect();
        let future = PoseSequence::from_poses(&frames).unwrap();
        let ctx = Context::Label("walk forward".into());
        let tf = m.forward(&[m.build_input_ntp(&p0, &future).unwrap()], &[&ctx]).unwrap();
        let ar = m.generate_autoregressive(&p0, &ctx, 4).unwrap();
        for c in 0..26 {
            assert_eq!(ar.matrix()[[0, c]], p0.coords()[c] + tf[0].matrix()[[0, c]]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            feedforward_width: 8,
            attention_mode: AttentionMode::Causal,
            ..ModelConfig::default()
        };
        let mut m = PoseDecoder::new(cfg, labels(), 21).unwrap();
        perturb_head(&mut m, 22);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let p0s: Vec<Pose> = (0..2).map(|_| random_pose(&mut rng, 13)).collect();
        let futures: Vec<PoseSequence> = (0..2)
            .map(|_| PoseSequence::from_poses(&(0..3).map(|_| random_pose(&mut rng, 13)).collect::<Vec<_>>()).unwrap())
            .collect();
        let ctxs = [Context::Label("swing golf".into()), Context::Label("walk forward".into())];
        let batch: Vec<Example> = (0..2)
            .map(|i| Example {
                p0: &p0s[i],
                future: &futures[i],
                context: &ctxs[i],
            })
            .collect();
        let obj = RelativeObjective::new(m.topology().clone(), LossWeights::default(), DEFAULT_EPSILON).unwrap();
        let (_, grads) = m.loss_and_gradients(&batch, &obj, None).unwrap();
        let ids: Vec<_> = m.params().iter().map(|(id, _, _)| id).collect();
        let h = 1e-6;
        let mut checked = 0;
        for id in ids {
            let shape = m.params().get(id).dim();
            for flat in [0, shape.0 * shape.1 / 2, shape.0 * shape.1 - 1] {
                let (r, c) = (flat / shape.1, flat % shape.1);
                let orig = m.params().get(id)[[r, c]];
                m.params_mut().get_mut(id)[[r, c]] = orig + h;
                let up = m.loss_and_gradients(&batch, &obj, None).unwrap().0;
                m.params_mut().get_mut(id)[[r, c]] = orig - h;
                let down = m.loss_and_gradients(&batch, &obj, None).unwrap().0;
                m.params_mut().get_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads[id.index()][[r, c]];
                let err = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-6);
                assert!(err < 1e-4, "{} [{r},{c}]: {numeric} vs {analytic}", m.params().name(id));
                checked += 1;
            }
        }
        assert!(checked > 50);
    }
}
