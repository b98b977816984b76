//! Desk-scale neural models sharing one embedding table.

pub mod checkpoint;
mod classifier;
mod conditional;
pub mod corpus;
mod generate;
mod lexicon;
mod lm;
mod params;
mod table;
pub mod train;

pub use classifier::{AttributeClassifier, BoundClassifier};
pub use conditional::ConditionalLM;
pub use generate::{ar_sample, nucleus_pick, DEFAULT_NUCLEUS_P};
pub use lexicon::{Lexicon, BOS, BOS_ID, EOS, EOS_ID};
pub use lm::{context_for, BoundLm, CausalLM, LmConfig};
pub use params::ParamStore;
pub use table::EmbeddingTable;

#[cfg(test)]
pub(crate) use params::gaussian;

use crate::autodiff::{Graph, Var};
use crate::error::Result;

/// How the output positions are presented to a model on a graph.
///
/// Embedding-space sampling supplies the vectors and their projected ids;
/// the vocabulary-simplex ablation additionally supplies the per-position
/// mixture weights `[L,V]` from which the vectors were formed.
#[derive(Clone, Copy, Debug)]
pub struct OutputView<'a> {
    pub vectors: Var,
    pub ids: &'a [usize],
    pub mix: Option<Var>,
}

impl<'a> OutputView<'a> {
    pub fn embeds(vectors: Var, ids: &'a [usize]) -> Self {
        Self {
            vectors,
            ids,
            mix: None,
        }
    }

    /// Output-bias term for each target: `b[id]`, or `weights · b` for mixtures.
    pub fn target_bias(&self, g: &mut Graph, bias: Var) -> Result<Var> {
        match self.mix {
            None => g.gather(bias, self.ids),
            Some(mix) => {
                let v = g.value(bias).len();
                let col = g.reshape(bias, &[v, 1])?;
                let b = g.matmul(mix, col)?;
                g.reshape(b, &[self.ids.len()])
            }
        }
    }
}
