//! Recurrent next-pose regressor. Each cell update reads the previous frame
//! and the pooled context and emits an offset added to that frame; training
//! feeds ground-truth frames, generation feeds its own outputs.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PooledContext;
use crate::context::ContextProviderConfig;
use crate::error::{Error, Result};
use crate::loss::RelativeObjective;
use crate::model::{Context, Example};
use crate::nn::Linear;
use crate::pose::{Pose, PoseSequence, SkeletonTopology, TopologyKind};
use crate::tape::{ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmConfig {
    pub hidden: usize,
    pub topology: TopologyKind,
    /// Subtract the centroid of `P0` from every input frame.
    pub center_on_p0: bool,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            topology: TopologyKind::Body13,
            center_on_p0: false,
        }
    }
}

#[derive(Debug)]
pub struct LstmForecaster {
    config: LstmConfig,
    context_config: ContextProviderConfig,
    topo: SkeletonTopology,
    params: ParamStore,
    context: PooledContext,
    gates: Linear,
    out: Linear,
    steps: AtomicU64,
}

impl Clone for LstmForecaster {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            context_config: self.context_config.clone(),
            topo: self.topo.clone(),
            params: self.params.clone(),
            context: self.context.clone(),
            gates: self.gates.clone(),
            out: self.out.clone(),
            steps: AtomicU64::new(self.step_count()),
        }
    }
}

impl LstmForecaster {
    pub fn new(config: LstmConfig, context_config: ContextProviderConfig, seed: u64) -> Result<Self> {
        if config.hidden == 0 {
            return Err(Error::Config("hidden size must be positive".into()));
        }
        let topo = SkeletonTopology::build(config.topology)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let context = PooledContext::new(&mut params, "lstm.context", &context_config, &mut rng)?;
        let h = config.hidden;
        let gates = Linear::new(&mut params, "lstm.gates", topo.dim() + context.d_m() + h, 4 * h, &mut rng);
        // forget-gate bias starts at 1
        if let Some(b) = gates.bias {
            params.get_mut(b).slice_mut(s![.., h..2 * h]).fill(1.0);
        }
        let out = Linear::zeros(&mut params, "lstm.out", h, topo.dim());
        Ok(Self {
            config,
            context_config,
            topo,
            params,
            context,
            gates,
            out,
            steps: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &LstmConfig {
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

    /// Per-sample cell updates performed by generation.
    pub fn step_count(&self) -> u64 {
        self.steps.load(Ordering::Relaxed)
    }

    pub fn reset_step_count(&self) {
        self.steps.store(0, Ordering::Relaxed);
    }

    fn shift(&self, p0s: &[&Pose]) -> Array2<f64> {
        let dim = self.topo.dim();
        let mut m = Array2::zeros((p0s.len(), dim));
        if self.config.center_on_p0 {
            for (b, p) in p0s.iter().enumerate() {
                let (cx, cy) = p.centroid();
                for k in 0..dim / 2 {
                    m[[b, 2 * k]] = -cx;
                    m[[b, 2 * k + 1]] = -cy;
                }
            }
        }
        m
    }

    /// One cell update on frames `x` (a `B x 2N` node); returns the next
    /// frame and the new state.
    fn cell(&self, tape: &mut Tape, x: Var, shift: &Array2<f64>, ctx: Var, h: Var, c: Var) -> (Var, Var, Var) {
        let hs = self.config.hidden;
        let xin = tape.add_const(x, shift);
        let z = tape.concat_cols(&[xin, ctx, h]);
        let z = self.gates.forward(tape, z);
        let i = tape.slice_cols(z, 0, hs);
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(z, hs, hs);
        let f = tape.sigmoid(f);
        let g = tape.slice_cols(z, 2 * hs, hs);
        let g = tape.tanh(g);
        let o = tape.slice_cols(z, 3 * hs, hs);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c = tape.add(fc, ig);
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc);
        let delta = self.out.forward(tape, h);
        (tape.add(x, delta), h, c)
    }

    fn zero_state(&self, tape: &mut Tape, batch: usize) -> (Var, Var) {
        let h = tape.constant(Array2::zeros((batch, self.config.hidden)));
        let c = tape.constant(Array2::zeros((batch, self.config.hidden)));
        (h, c)
    }

    pub fn generate(&self, p0: &Pose, ctx: &Context, horizon: usize) -> Result<PoseSequence> {
        Ok(self.generate_batch(&[(p0, ctx)], horizon)?.pop().expect("one in, one out"))
    }

    /// `horizon` cell updates, each consuming the previous prediction.
    pub fn generate_batch(&self, items: &[(&Pose, &Context)], horizon: usize) -> Result<Vec<PoseSequence>> {
        if horizon < 1 {
            return Err(Error::Contract("horizon must be at least 1".into()));
        }
        let batch = items.len();
        let dim = self.topo.dim();
        let p0s: Vec<&Pose> = items.iter().map(|(p, _)| *p).collect();
        let contexts: Vec<&Context> = items.iter().map(|(_, c)| *c).collect();
        let mut x0 = Array2::zeros((batch, dim));
        for (b, p) in p0s.iter().enumerate() {
            p.check_topology(&self.topo)?;
            x0.row_mut(b).assign(&p.view());
        }
        let shift = self.shift(&p0s);
        let mut tape = Tape::new(&self.params);
        let ctx = self.context.rows(&mut tape, &contexts)?;
        let (mut h, mut c) = self.zero_state(&mut tape, batch);
        let mut x = tape.constant(x0);
        let mut out = vec![Array2::zeros((horizon, dim)); batch];
        for t in 0..horizon {
            (x, h, c) = self.cell(&mut tape, x, &shift, ctx, h, c);
            self.steps.fetch_add(batch as u64, Ordering::Relaxed);
            for (b, o) in out.iter_mut().enumerate() {
                o.row_mut(t).assign(&tape.value(x).row(b));
            }
        }
        out.into_iter().map(PoseSequence::from_matrix).collect()
    }

    /// Teacher-forced batch objective and gradients.
    pub fn loss_and_gradients(&self, batch: &[Example], objective: &RelativeObjective) -> Result<(f64, Vec<Array2<f64>>)> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let horizon = batch[0].future.horizon();
        if batch.iter().any(|e| e.future.horizon() != horizon) {
            return Err(Error::Contract("horizons differ within a batch".into()));
        }
        let n = batch.len();
        let dim = self.topo.dim();
        let p0s: Vec<&Pose> = batch.iter().map(|e| e.p0).collect();
        let contexts: Vec<&Context> = batch.iter().map(|e| e.context).collect();
        let shift = self.shift(&p0s);
        let mut tape = Tape::new(&self.params);
        let ctx = self.context.rows(&mut tape, &contexts)?;
        let (mut h, mut c) = self.zero_state(&mut tape, n);
        let mut outputs = Vec::with_capacity(horizon);
        let mut gt = Array2::zeros((n * horizon, dim));
        for t in 0..horizon {
            let mut frame = Array2::zeros((n, dim));
            for (b, e) in batch.iter().enumerate() {
                e.p0.check_topology(&self.topo)?;
                if t == 0 {
                    frame.row_mut(b).assign(&e.p0.view());
                } else {
                    frame.row_mut(b).assign(&e.future.frame(t - 1));
                }
                gt.row_mut(b * horizon + t).assign(&e.future.frame(t));
            }
            let x = tape.constant(frame);
            let (pred, nh, nc) = self.cell(&mut tape, x, &shift, ctx, h, c);
            (h, c) = (nh, nc);
            outputs.push(pred);
        }
        // B x (T * 2N) has the same row-major layout as (B * T) x 2N
        let all = tape.concat_cols(&outputs);
        let pred = Array2::from_shape_vec((n * horizon, dim), tape.value(all).iter().copied().collect())
            .expect("same element count");
        let (loss, grad) = objective.loss_and_grad(gt.view(), pred.view())?;
        let seed = grad.into_shape_with_order((n, horizon * dim)).expect("contiguous");
        let grads = tape.backward(all, seed)?;
        let mut buffers = self.params.zeros_like();
        grads.accumulate_into(&mut buffers);
        Ok((loss, buffers))
    }
}
