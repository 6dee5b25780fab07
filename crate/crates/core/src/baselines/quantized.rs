//! Two-stage forecasting: quantize each frame to the nearest entry of a
//! pose codebook, predict code indices with a causal token transformer,
//! then decode indices back to poses. Decoded poses can never be closer to
//! the truth than the codebook allows, which [`Codebook::reconstruction_rmse`]
//! measures.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PooledContext;
use crate::context::ContextProviderConfig;
use crate::error::{Error, Result};
use crate::model::{Context, Example};
use crate::nn::{self, DecoderStack, DropoutCtx, Linear, StackShape};
use crate::pose::{Pose, PoseSequence, SkeletonTopology, TopologyKind};
use crate::tape::{ParamId, ParamStore, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    vectors: Array2<f64>,
    trained: bool,
    degenerate: bool,
}

impl Codebook {
    pub fn from_vectors(vectors: Array2<f64>) -> Result<Self> {
        if vectors.nrows() == 0 || vectors.ncols() == 0 {
            return Err(Error::Config("codebook must be non-empty".into()));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("codebook contains non-finite values".into()));
        }
        Ok(Self {
            vectors,
            trained: false,
            degenerate: false,
        })
    }

    /// A previously fitted codebook, e.g. read back from a checkpoint.
    pub fn fitted(vectors: Array2<f64>) -> Result<Self> {
        Ok(Self {
            trained: true,
            ..Self::from_vectors(vectors)?
        })
    }

    pub fn k(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Set when fewer distinct training poses than requested codes existed.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Nearest code; ties go to the lower index.
    pub fn encode(&self, pose: &[f64]) -> usize {
        nearest(self.vectors.view(), pose).0
    }

    pub fn encode_pose(&self, pose: &Pose) -> Result<usize> {
        if pose.dim() != self.dim() {
            return Err(Error::shape(self.dim(), pose.dim()));
        }
        Ok(self.encode(pose.coords()))
    }

    pub fn decode(&self, code: usize) -> Result<Pose> {
        if code >= self.k() {
            return Err(Error::Contract(format!("code {code} outside codebook of size {}", self.k())));
        }
        Pose::new(self.vectors.row(code).to_vec())
    }

    pub fn encode_sequence(&self, seq: &PoseSequence) -> Result<Vec<usize>> {
        if seq.dim() != self.dim() {
            return Err(Error::shape(self.dim(), seq.dim()));
        }
        Ok(seq
            .matrix()
            .rows()
            .into_iter()
            .map(|r| self.encode(r.as_slice().expect("standard layout")))
            .collect())
    }

    pub fn decode_sequence(&self, codes: &[usize]) -> Result<PoseSequence> {
        let poses = codes.iter().map(|&c| self.decode(c)).collect::<Result<Vec<_>>>()?;
        PoseSequence::from_poses(&poses)
    }

    /// Each frame replaced by its nearest code.
    pub fn reconstruct(&self, seq: &PoseSequence) -> Result<PoseSequence> {
        self.decode_sequence(&self.encode_sequence(seq)?)
    }

    /// Root mean squared coordinate error of quantizing every frame of
    /// `seqs`; the same convention as [`crate::metrics::rmse`], averaged
    /// per sequence.
    pub fn reconstruction_rmse(&self, seqs: &[&PoseSequence]) -> Result<f64> {
        if seqs.is_empty() {
            return Err(Error::Contract("no sequences".into()));
        }
        let mut total = 0.0;
        for s in seqs {
            total += crate::metrics::rmse(&self.reconstruct(s)?, s)?;
        }
        Ok(total / seqs.len() as f64)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(codes: ArrayView2<f64>, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in codes.rows().into_iter().enumerate() {
        let d = sq_dist(c.as_slice().expect("standard layout"), x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations on the rows of `poses`.
/// Asking for more codes than there are distinct poses logs a warning and
/// shrinks the codebook to the number of distinct poses.
pub fn vq_fit(poses: ArrayView2<f64>, k: usize, max_iters: usize, seed: u64) -> Result<Codebook> {
    let n = poses.nrows();
    if n == 0 {
        return Err(Error::Config("no poses to fit a codebook on".into()));
    }
    if k == 0 {
        return Err(Error::Config("codebook size must be positive".into()));
    }
    let poses = poses.as_standard_layout().to_owned();
    let rows: Vec<&[f64]> = poses.rows().into_iter().map(|r| r.to_slice().expect("standard layout")).collect();
    let distinct = rows
        .iter()
        .map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len();
    let mut degenerate = false;
    let k = if k > distinct {
        log::warn!("codebook size {k} exceeds the {distinct} distinct training poses; using {distinct} codes");
        degenerate = true;
        distinct
    } else {
        k
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = poses.ncols();
    let mut centers = Array2::zeros((k, dim));
    centers.row_mut(0).assign(&poses.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, centers.row(0).as_slice().unwrap())).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 && target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        // rounding can leave `pick` on an already chosen point
        if d2[pick] == 0.0 {
            pick = d2
                .iter()
                .enumerate()
                .fold((0, -1.0), |best, (i, &w)| if w > best.1 { (i, w) } else { best })
                .0;
        }
        centers.row_mut(c).assign(&poses.row(pick));
        for (i, r) in rows.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, centers.row(c).as_slice().unwrap()));
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let (c, _) = nearest(centers.view(), r);
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            let mut row = sums.row_mut(c);
            row += &poses.row(i);
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                centers.row_mut(c).assign(&mean);
            }
        }
        if !changed {
            break;
        }
    }
    Ok(Codebook {
        vectors: centers,
        trained: true,
        degenerate,
    })
}

/// Predicts the next code of every prefix in a batch. All prefixes share a
/// length and start with the code of `P0`.
pub trait TokenPredictor {
    fn next_tokens(&self, prefixes: &[Vec<usize>], contexts: &[&Context]) -> Result<Vec<usize>>;
}

/// Greedy rollout: `horizon` predictor calls, decoded through `codebook`.
pub fn quantized_generate_batch<P: TokenPredictor + ?Sized>(
    predictor: &P,
    codebook: &Codebook,
    items: &[(&Pose, &Context)],
    horizon: usize,
) -> Result<Vec<PoseSequence>> {
    if horizon < 1 {
        return Err(Error::Contract("horizon must be at least 1".into()));
    }
    let mut prefixes = items
        .iter()
        .map(|(p0, _)| Ok(vec![codebook.encode_pose(p0)?]))
        .collect::<Result<Vec<_>>>()?;
    let contexts: Vec<&Context> = items.iter().map(|(_, c)| *c).collect();
    for _ in 0..horizon {
        let next = predictor.next_tokens(&prefixes, &contexts)?;
        for (p, n) in prefixes.iter_mut().zip(next) {
            p.push(n);
        }
    }
    prefixes.iter().map(|p| codebook.decode_sequence(&p[1..])).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizedConfig {
    pub codebook_size: usize,
    pub lloyd_iters: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub feedforward_width: usize,
    pub topology: TopologyKind,
}

impl Default for QuantizedConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            lloyd_iters: 50,
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            feedforward_width: 64,
            topology: TopologyKind::Body13,
        }
    }
}

/// Causal transformer over code indices.
#[derive(Debug)]
pub struct TokenTransformer {
    config: QuantizedConfig,
    context_config: ContextProviderConfig,
    params: ParamStore,
    embed: ParamId,
    context: PooledContext,
    context_proj: Linear,
    stack: DecoderStack,
    head: Linear,
    forwards: AtomicU64,
}

impl Clone for TokenTransformer {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            context_config: self.context_config.clone(),
            params: self.params.clone(),
            embed: self.embed,
            context: self.context.clone(),
            context_proj: self.context_proj.clone(),
            stack: self.stack.clone(),
            head: self.head.clone(),
            forwards: AtomicU64::new(self.forward_count()),
        }
    }
}

impl TokenTransformer {
    /// `vocab` is the codebook size.
    pub fn new(config: QuantizedConfig, vocab: usize, context_config: ContextProviderConfig, seed: u64) -> Result<Self> {
        if config.d_model == 0 || config.n_heads == 0 || !config.d_model.is_multiple_of(config.n_heads) {
            return Err(Error::Config("d_model must be a positive multiple of n_heads".into()));
        }
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let context = PooledContext::new(&mut params, "tokens.context", &context_config, &mut rng)?;
        let embed = params.add("tokens.embed", nn::normal(&mut rng, vocab, d, 0.1));
        let context_proj = Linear::new(&mut params, "tokens.context_proj", context.d_m(), d, &mut rng);
        let stack = DecoderStack::new(
            &mut params,
            "tokens.stack",
            d,
            config.n_heads,
            config.n_layers,
            config.feedforward_width,
            &mut rng,
        );
        let head = Linear::new(&mut params, "tokens.head", d, vocab, &mut rng);
        Ok(Self {
            config,
            context_config,
            params,
            embed,
            context,
            context_proj,
            stack,
            head,
            forwards: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &QuantizedConfig {
        &self.config
    }

    pub fn context_config(&self) -> &ContextProviderConfig {
        &self.context_config
    }

    pub fn vocab(&self) -> usize {
        self.params.get(self.embed).nrows()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }

    /// Logits node of shape `(B * L) x K`.
    fn logits(&self, tape: &mut Tape, tokens: &[Vec<usize>], contexts: &[&Context]) -> Result<crate::tape::Var> {
        let batch = tokens.len();
        if batch == 0 || contexts.len() != batch {
            return Err(Error::Contract("token and context batches must be non-empty and aligned".into()));
        }
        let len = tokens[0].len();
        if len == 0 || tokens.iter().any(|t| t.len() != len) {
            return Err(Error::Contract("token sequences must share a positive length".into()));
        }
        let vocab = self.vocab();
        let flat: Vec<usize> = tokens.iter().flatten().copied().collect();
        if let Some(bad) = flat.iter().find(|&&t| t >= vocab) {
            return Err(Error::Contract(format!("token {bad} outside vocabulary of {vocab}")));
        }
        let table = tape.param(self.embed);
        let x = tape.gather_rows(table, &flat);
        let pe = nn::sinusoidal_encoding(len, self.config.d_model);
        let pe = ndarray::concatenate(Axis(0), &vec![pe.view(); batch]).expect("same shape");
        let x = tape.add_const(x, &pe);
        let ctx = self.context.rows(tape, contexts)?;
        let memory = self.context_proj.forward(tape, ctx);
        let shape = StackShape {
            batch,
            seq_len: len,
            mem_len: 1,
            causal: true,
        };
        let h = self.stack.forward(tape, x, memory, shape, &mut DropoutCtx::inference())?;
        self.forwards.fetch_add(batch as u64, Ordering::Relaxed);
        Ok(self.head.forward(tape, h))
    }

    /// Teacher-forced cross-entropy of predicting the codes of `P1..P_T`
    /// from the codes of `P0..P_{T-1}`.
    pub fn loss_and_gradients(&self, batch: &[Example], codebook: &Codebook) -> Result<(f64, Vec<Array2<f64>>)> {
        let mut inputs = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for e in batch {
            let codes = codebook.encode_sequence(e.future)?;
            let mut inp = vec![codebook.encode_pose(e.p0)?];
            inp.extend_from_slice(&codes[..codes.len() - 1]);
            inputs.push(inp);
            targets.extend(codes);
        }
        let contexts: Vec<&Context> = batch.iter().map(|e| e.context).collect();
        let mut tape = Tape::new(&self.params);
        let logits = self.logits(&mut tape, &inputs, &contexts)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        let value = tape.value(loss)[[0, 0]];
        let grads = tape.backward(loss, Array2::ones((1, 1)))?;
        let mut buffers = self.params.zeros_like();
        grads.accumulate_into(&mut buffers);
        Ok((value, buffers))
    }
}

impl TokenPredictor for TokenTransformer {
    /// Greedy: the highest logit at the last position, lowest index on ties.
    fn next_tokens(&self, prefixes: &[Vec<usize>], contexts: &[&Context]) -> Result<Vec<usize>> {
        let mut tape = Tape::new(&self.params);
        let logits = self.logits(&mut tape, prefixes, contexts)?;
        let len = prefixes[0].len();
        let values = tape.value(logits);
        Ok((0..prefixes.len())
            .map(|b| {
                let row = values.slice(s![(b + 1) * len - 1, ..]);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }
}

/// Codebook plus token model.
#[derive(Debug, Clone)]
pub struct QuantizedForecaster {
    pub codebook: Codebook,
    pub tokens: TokenTransformer,
    topo: SkeletonTopology,
}

impl QuantizedForecaster {
    pub fn new(codebook: Codebook, tokens: TokenTransformer) -> Result<Self> {
        let topo = SkeletonTopology::build(tokens.config().topology)?;
        if codebook.dim() != topo.dim() {
            return Err(Error::shape(topo.dim(), codebook.dim()));
        }
        if codebook.k() != tokens.vocab() {
            return Err(Error::Incompatible(format!(
                "codebook has {} codes but the token model expects {}",
                codebook.k(),
                tokens.vocab()
            )));
        }
        Ok(Self { codebook, tokens, topo })
    }

    /// Fits the codebook on every frame (initial and future) of the training
    /// samples and builds an untrained token model of matching size.
    pub fn fit_codebook(
        config: QuantizedConfig,
        context_config: ContextProviderConfig,
        train: &[(&Pose, &PoseSequence)],
        seed: u64,
    ) -> Result<Self> {
        let topo = SkeletonTopology::build(config.topology)?;
        let frames: usize = train.iter().map(|(_, f)| f.horizon() + 1).sum();
        let mut poses = Array2::zeros((frames, topo.dim()));
        let mut r = 0;
        for (p0, future) in train {
            poses.row_mut(r).assign(&p0.view());
            r += 1;
            for row in future.matrix().rows() {
                poses.row_mut(r).assign(&row);
                r += 1;
            }
        }
        let codebook = vq_fit(poses.view(), config.codebook_size, config.lloyd_iters, seed)?;
        let tokens = TokenTransformer::new(config, codebook.k(), context_config, seed.wrapping_add(1))?;
        Self::new(codebook, tokens)
    }

    pub fn topology(&self) -> &SkeletonTopology {
        &self.topo
    }

    pub fn generate_batch(&self, items: &[(&Pose, &Context)], horizon: usize) -> Result<Vec<PoseSequence>> {
        quantized_generate_batch(&self.tokens, &self.codebook, items, horizon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn random_poses(n: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, dim), |_| rng.random())
    }

    #[test]
    fn code_vectors_round_trip() {
        let poses = random_poses(200, 26, 1);
        let cb = vq_fit(poses.view(), 8, 30, 2).unwrap();
        assert!(cb.is_trained() && !cb.is_degenerate());
        for k in 0..cb.k() {
            let p = cb.decode(k).unwrap();
            assert_eq!(cb.encode_pose(&p).unwrap(), k);
            assert_eq!(cb.decode(cb.encode_pose(&p).unwrap()).unwrap(), p);
        }
    }

    #[test]
    fn single_code_is_the_mean_pose() {
        let poses = random_poses(100, 26, 3);
        let cb = vq_fit(poses.view(), 1, 10, 4).unwrap();
        let mean = poses.mean_axis(Axis(0)).unwrap();
        for (a, b) in cb.vectors().row(0).iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // population std pooled over coordinates
        let var: f64 = poses
            .rows()
            .into_iter()
            .map(|r| r.iter().zip(mean.iter()).map(|(x, m)| (x - m).powi(2)).sum::<f64>())
            .sum::<f64>()
            / (100.0 * 26.0);
        let seq = PoseSequence::from_matrix(poses.clone()).unwrap();
        let rec = cb.reconstruction_rmse(&[&seq]).unwrap();
        assert!((rec - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn encoding_matches_brute_force() {
        let poses = random_poses(300, 26, 5);
        let cb = vq_fit(poses.view(), 16, 20, 6).unwrap();
        let queries = random_poses(50, 26, 7);
        for q in queries.rows() {
            let q = q.to_vec();
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for k in 0..16 {
                let d: f64 = (0..26).map(|c| (cb.vectors()[[k, c]] - q[c]).powi(2)).sum::<f64>().sqrt();
                if d < best_d {
                    best = k;
                    best_d = d;
                }
            }
            assert_eq!(cb.encode(&q), best);
        }
    }

    #[test]
    fn too_many_codes_degenerates() {
        let mut poses = random_poses(3, 4, 8);
        let dup = poses.row(0).to_owned();
        poses.row_mut(2).assign(&dup);
        let cb = vq_fit(poses.view(), 5, 10, 9).unwrap();
        assert!(cb.is_degenerate());
        assert_eq!(cb.k(), 2);
        assert!(vq_fit(poses.view(), 0, 10, 9).is_err());
    }

    #[test]
    fn fitting_is_deterministic() {
        let poses = random_poses(120, 26, 10);
        assert_eq!(vq_fit(poses.view(), 6, 20, 11).unwrap(), vq_fit(poses.view(), 6, 20, 11).unwrap());
    }

    /// Replays the true code sequence.
    struct Oracle<'a> {
        truth: &'a [Vec<usize>],
        calls: Cell<usize>,
    }

    impl TokenPredictor for Oracle<'_> {
        fn next_tokens(&self, prefixes: &[Vec<usize>], _: &[&Context]) -> Result<Vec<usize>> {
            self.calls.set(self.calls.get() + 1);
            Ok(prefixes
                .iter()
                .zip(self.truth)
                .map(|(p, t)| t[p.len() - 1])
                .collect())
        }
    }

    #[test]
    fn perfect_predictor_on_exact_poses_has_zero_error() {
        let cb = Codebook::from_vectors(random_poses(10, 26, 12)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let truth: Vec<Vec<usize>> = (0..3).map(|_| (0..6).map(|_| rng.random_range(0..10)).collect()).collect();
        let p0s: Vec<Pose> = (0..3).map(|i| cb.decode(i).unwrap()).collect();
        let ctx = Context::Label("x".into());
        let items: Vec<(&Pose, &Context)> = p0s.iter().map(|p| (p, &ctx)).collect();
        let oracle = Oracle {
            truth: &truth,
            calls: Cell::new(0),
        };
        let out = quantized_generate_batch(&oracle, &cb, &items, 6).unwrap();
        assert_eq!(oracle.calls.get(), 6);
        for (seq, codes) in out.iter().zip(&truth) {
            let gt = cb.decode_sequence(codes).unwrap();
            assert_eq!(crate::metrics::rmse(seq, &gt).unwrap(), 0.0);
            // end-to-end error can't beat the reconstruction floor
            assert!(crate::metrics::rmse(seq, &gt).unwrap() >= cb.reconstruction_rmse(&[&gt]).unwrap());
        }
    }

    #[test]
    fn token_transformer_rolls_out_horizon_passes() {
        let labels = ContextProviderConfig::labels(vec!["a".into()], 4);
        let cfg = QuantizedConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            feedforward_width: 8,
            ..QuantizedConfig::default()
        };
        let cb = Codebook::from_vectors(random_poses(5, 26, 14)).unwrap();
        let tokens = TokenTransformer::new(cfg, 5, labels, 15).unwrap();
        let f = QuantizedForecaster::new(cb.clone(), tokens).unwrap();
        let p0 = cb.decode(2).unwrap();
        let ctx = Context::Label("a".into());
        f.tokens.reset_forward_count();
        let out = f.generate_batch(&[(&p0, &ctx)], 7).unwrap();
        assert_eq!(f.tokens.forward_count(), 7);
        assert_eq!(out[0].horizon(), 7);
        for t in 0..7 {
            let code = cb.encode(out[0].frame(t).as_slice().unwrap());
            assert_eq!(cb.decode(code).unwrap(), out[0].pose(t));
        }
    }
}
