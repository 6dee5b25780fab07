//! Layers built on the [`Tape`]: linear maps, layer norm, multi-head
//! attention, and the pre-norm transformer decoder stack shared by the
//! one-stage forecaster and the token-level baseline.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{AttnSpec, ParamId, ParamStore, Tape, Var};

/// Xavier-uniform weight matrix.
pub fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit))
}

pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Fixed sinusoidal position table, `len x width`.
pub fn sinusoidal_encoding(len: usize, width: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, width), |(pos, i)| {
        let pair = (i / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / width as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out));
        let bias = Some(store.add(format!("{name}.bias"), Array2::zeros((1, fan_out))));
        Self { weight, bias }
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Array2::zeros((fan_in, fan_out)));
        let bias = Some(store.add(format!("{name}.bias"), Array2::zeros((1, fan_out))));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Array2::ones((1, width))),
            beta: store.add(format!("{name}.beta"), Array2::zeros((1, width))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, rng),
            heads,
        }
    }

    /// `queries` holds `batch * q_len` rows, `memory` `batch * k_len`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        queries: Var,
        memory: Var,
        batch: usize,
        q_len: usize,
        k_len: usize,
        causal: bool,
    ) -> Result<Var> {
        let q = self.q.forward(tape, queries);
        let k = self.k.forward(tape, memory);
        let v = self.v.forward(tape, memory);
        let spec = AttnSpec {
            batch,
            q_len,
            k_len,
            heads: self.heads,
            causal,
        };
        let o = tape.attention(q, k, v, spec)?;
        Ok(self.out.forward(tape, o))
    }
}

/// Dropout settings for one forward pass; `None` rng means inference.
pub struct DropoutCtx<'r> {
    pub rate: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl DropoutCtx<'_> {
    pub fn inference() -> DropoutCtx<'static> {
        DropoutCtx { rate: 0.0, rng: None }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => {
                let keep = 1.0 - self.rate;
                let dim = tape.value(x).raw_dim();
                let mask = Array2::from_shape_fn(dim, |_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                tape.dropout(x, mask)
            }
            _ => x,
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Pre-norm transformer decoder: masked or full self-attention, cross
/// attention to a context memory, and a ReLU feed-forward block per layer,
/// followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct DecoderStack {
    layers: Vec<DecoderLayer>,
    ln_final: LayerNorm,
}

/// Shapes of one batched decoder call.
#[derive(Debug, Clone, Copy)]
pub struct StackShape {
    pub batch: usize,
    pub seq_len: usize,
    pub mem_len: usize,
    pub causal: bool,
}

impl DecoderStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        layers: usize,
        ff_width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let p = format!("{name}.layers.{l}");
                DecoderLayer {
                    ln_self: LayerNorm::new(store, &format!("{p}.ln_self"), width),
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), width, heads, rng),
                    ln_cross: LayerNorm::new(store, &format!("{p}.ln_cross"), width),
                    cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), width, heads, rng),
                    ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), width),
                    ff_in: Linear::new(store, &format!("{p}.ff_in"), width, ff_width, rng),
                    ff_out: Linear::new(store, &format!("{p}.ff_out"), ff_width, width, rng),
                }
            })
            .collect();
        Self {
            layers,
            ln_final: LayerNorm::new(store, &format!("{name}.ln_final"), width),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        mut h: Var,
        memory: Var,
        shape: StackShape,
        dropout: &mut DropoutCtx,
    ) -> Result<Var> {
        let StackShape {
            batch,
            seq_len,
            mem_len,
            causal,
        } = shape;
        for layer in &self.layers {
            let a = layer.ln_self.forward(tape, h);
            let a = layer.self_attn.forward(tape, a, a, batch, seq_len, seq_len, causal)?;
            let a = dropout.apply(tape, a);
            h = tape.add(h, a);

            let a = layer.ln_cross.forward(tape, h);
            let a = layer.cross_attn.forward(tape, a, memory, batch, seq_len, mem_len, false)?;
            let a = dropout.apply(tape, a);
            h = tape.add(h, a);

            let a = layer.ln_ff.forward(tape, h);
            let a = layer.ff_in.forward(tape, a);
            let a = tape.relu(a);
            let a = layer.ff_out.forward(tape, a);
            let a = dropout.apply(tape, a);
            h = tape.add(h, a);
        }
        Ok(self.ln_final.forward(tape, h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_rows_are_distinct() {
        let pe = sinusoidal_encoding(45, 16);
        for i in 0..45 {
            for j in (i + 1)..45 {
                let diff: f64 = (&pe.row(i) - &pe.row(j)).mapv(f64::abs).sum();
                assert!(diff > 1e-3);
            }
        }
        assert_eq!(pe[[0, 0]], 0.0);
        assert_eq!(pe[[0, 1]], 1.0);
    }
}
