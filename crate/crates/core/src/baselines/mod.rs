//! Comparison systems: nearest-neighbour retrieval on initial poses or on
//! context features, a recurrent next-pose regressor, and a two-stage
//! pipeline of a pose codebook plus a token-level transformer.
//!
//! The transformer next-token comparator is [`crate::model::PoseDecoder`]
//! with [`crate::model::InputMode::Ntp`].

pub mod lstm;
pub mod quantized;
pub mod retrieval;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::context::{ContextKind, ContextProviderConfig, LabelEmbedding};
use crate::error::{Error, Result};
use crate::model::Context;
use crate::nn;
use crate::tape::{ParamStore, Tape, Var};

/// One context vector per sample: the label embedding, or the mean over
/// rows of a precomputed feature matrix.
#[derive(Debug, Clone)]
pub(crate) struct PooledContext {
    labels: Option<LabelEmbedding>,
    d_m: usize,
}

impl PooledContext {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ContextProviderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let labels = match cfg.kind {
            ContextKind::LabelEmbedding => Some(LabelEmbedding::new(
                store,
                name,
                cfg.vocabulary.clone(),
                nn::normal(rng, cfg.vocabulary.len(), cfg.d_m, 1.0),
            )?),
            ContextKind::PrecomputedFile => None,
        };
        Ok(Self { labels, d_m: cfg.d_m })
    }

    pub(crate) fn d_m(&self) -> usize {
        self.d_m
    }

    /// A `B x d_M` node.
    pub(crate) fn rows(&self, tape: &mut Tape, contexts: &[&Context]) -> Result<Var> {
        match &self.labels {
            Some(emb) => {
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
                Ok(tape.gather_rows(table, &idx))
            }
            None => {
                let mut m = Array2::zeros((contexts.len(), self.d_m));
                for (b, c) in contexts.iter().enumerate() {
                    let Context::Features(f) = c else {
                        return Err(Error::Incompatible(
                            "model expects precomputed features but got an action label".into(),
                        ));
                    };
                    if f.width() != self.d_m {
                        return Err(Error::shape(format!("context width {}", self.d_m), f.width()));
                    }
                    let mean = f.matrix().mean_axis(ndarray::Axis(0)).expect("non-empty");
                    m.row_mut(b).assign(&mean);
                }
                Ok(tape.constant(m))
            }
        }
    }
}
