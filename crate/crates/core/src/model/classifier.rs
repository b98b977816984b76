//! Mean-pooled attribute classifier reading embedding vectors directly.

use std::sync::Arc;

use rand::Rng;

use super::lm::context_for;
use super::params::{gaussian, ParamStore};
use super::table::EmbeddingTable;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::SoftSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeClassifier {
    table: Arc<EmbeddingTable>,
    labels: Vec<String>,
    hidden: usize,
    params: ParamStore,
}

pub struct BoundClassifier {
    pub table: Var,
    params: Vec<Var>,
}

impl BoundClassifier {
    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }
}

fn layout(d: usize, hidden: usize, labels: usize) -> ParamStore {
    let mut p = ParamStore::default();
    p.push("enc.w", Tensor::zeros(&[d, hidden]));
    p.push("enc.b", Tensor::zeros(&[hidden]));
    p.push("head.w", Tensor::zeros(&[hidden, labels]));
    p.push("head.b", Tensor::zeros(&[labels]));
    p
}

impl AttributeClassifier {
    pub fn new_random<R: Rng + ?Sized>(
        table: Arc<EmbeddingTable>,
        labels: Vec<String>,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut c = Self::zeros(table, labels, hidden)?;
        let d = c.table.dim();
        let t = c.params.tensors_mut();
        t[0] = gaussian(rng, &[d, hidden], 1.0 / (d as f64).sqrt());
        t[2] = gaussian(rng, &[hidden, t[2].shape()[1]], 1.0 / (hidden as f64).sqrt());
        Ok(c)
    }

    pub fn zeros(table: Arc<EmbeddingTable>, labels: Vec<String>, hidden: usize) -> Result<Self> {
        if labels.len() < 2 || hidden == 0 {
            return Err(Error::invalid("classifier needs >= 2 labels and hidden >= 1"));
        }
        let params = layout(table.dim(), hidden, labels.len());
        Ok(Self {
            table,
            labels,
            hidden,
            params,
        })
    }

    pub fn from_parts(table: Arc<EmbeddingTable>, labels: Vec<String>, hidden: usize, params: ParamStore) -> Result<Self> {
        let expected = layout(table.dim(), hidden, labels.len());
        if expected.names() != params.names()
            || expected.tensors().iter().zip(params.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Checkpoint("classifier parameter layout mismatch".into()));
        }
        Ok(Self {
            table,
            labels,
            hidden,
            params,
        })
    }

    pub fn table(&self) -> &Arc<EmbeddingTable> {
        &self.table
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label_count(&self) -> usize {
        self.labels.len()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// The table is always bound as a constant: it is frozen for classifiers.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundClassifier> {
        let table = g.constant(self.table.weights().clone())?;
        let params = self.params.bind(g, trainable)?;
        Ok(BoundClassifier { table, params })
    }

    /// Log class probabilities `[1, C]` for `<bos> prompt` followed by the
    /// output vectors `out: [L,d]`.
    pub fn log_probs_graph(&self, g: &mut Graph, b: &BoundClassifier, prompt: &[usize], out: Var) -> Result<Var> {
        let ctx = g.embed_rows(b.table, &context_for(prompt))?;
        let x = g.concat_rows(&[ctx, out])?;
        self.log_probs_from_inputs(g, b, x)
    }

    pub fn log_probs_from_inputs(&self, g: &mut Graph, b: &BoundClassifier, x: Var) -> Result<Var> {
        let h = g.matmul(x, b.params[0])?;
        let h = g.add_rows(h, b.params[1])?;
        let h = g.tanh(h)?;
        let pooled = g.mean_rows(h)?;
        let pooled = g.reshape(pooled, &[1, self.hidden])?;
        let z = g.matmul(pooled, b.params[2])?;
        let z = g.add_rows(z, b.params[3])?;
        g.log_softmax_rows(z)
    }

    pub fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.labels.len() {
            return Err(Error::LabelRange {
                label,
                count: self.labels.len(),
            });
        }
        Ok(())
    }

    /// `log p(label | prompt, ẽ)`.
    pub fn logprob(&self, prompt: &[usize], seq: &SoftSequence, label: usize) -> Result<f64> {
        self.logprob_and_grad(prompt, seq, label, false).map(|(v, _)| v)
    }

    pub fn logprob_and_grad(
        &self,
        prompt: &[usize],
        seq: &SoftSequence,
        label: usize,
        with_grad: bool,
    ) -> Result<(f64, Option<Tensor>)> {
        self.check_label(label)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let out = if with_grad {
            g.leaf(seq.vectors().clone())?
        } else {
            g.constant(seq.vectors().clone())?
        };
        let lp = self.log_probs_graph(&mut g, &b, prompt, out)?;
        let picked = g.gather(lp, &[label])?;
        let grad = if with_grad {
            Some(g.backward(picked)?.wrt(out))
        } else {
            None
        };
        Ok((g.scalar(picked), grad))
    }

    /// Class probabilities for a discrete token sequence (no `<bos>` added).
    pub fn probs_for_tokens(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let x = g.embed_rows(b.table, tokens)?;
        let lp = self.log_probs_from_inputs(&mut g, &b, x)?;
        Ok(g.value(lp).data().iter().map(|v| v.exp()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table() -> Arc<EmbeddingTable> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        Arc::new(EmbeddingTable::from_weights(gaussian(&mut rng, &[9, 6], 0.7)).unwrap())
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let c = AttributeClassifier::zeros(table(), vec!["a".into(), "b".into()], 4).unwrap();
        let seq = SoftSequence::from_ids(c.table(), &[1, 2, 3]).unwrap();
        assert!((c.logprob(&[], &seq, 0).unwrap() - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn probabilities_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = vec!["a".into(), "b".into(), "c".into()];
        let c = AttributeClassifier::new_random(table(), labels, 5, &mut rng).unwrap();
        let seq = SoftSequence::from_ids(c.table(), &[4, 2]).unwrap();
        let total: f64 = (0..3).map(|l| c.logprob(&[7], &seq, l).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn label_out_of_range() {
        let c = AttributeClassifier::zeros(table(), vec!["a".into(), "b".into()], 4).unwrap();
        let seq = SoftSequence::from_ids(c.table(), &[1]).unwrap();
        assert!(matches!(c.logprob(&[], &seq, 2), Err(Error::LabelRange { .. })));
    }
}
