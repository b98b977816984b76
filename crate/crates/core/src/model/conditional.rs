//! Class-conditional language models used as generative classifiers.

use std::sync::Arc;

use super::lexicon::BOS_ID;
use super::lm::CausalLM;
use super::table::EmbeddingTable;
use super::OutputView;
use crate::autodiff::{log_sum_exp, Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::SoftSequence;

#[derive(Clone, Debug, PartialEq)]
pub enum ConditionalLM {
    /// One LM per label.
    Separate { lms: Vec<CausalLM>, labels: Vec<String> },
    /// One LM; the label is announced by a prefix token after `<bos>`.
    Verbalizer {
        lm: CausalLM,
        label_tokens: Vec<usize>,
        labels: Vec<String>,
    },
}

impl ConditionalLM {
    pub fn separate(lms: Vec<CausalLM>, labels: Vec<String>) -> Result<Self> {
        if lms.len() < 2 || lms.len() != labels.len() {
            return Err(Error::invalid("need one LM per label and at least two labels"));
        }
        let hash = lms[0].table().content_hash();
        for lm in &lms[1..] {
            let h = lm.table().content_hash();
            if h != hash {
                return Err(Error::TableMismatch(hash, h));
            }
        }
        Ok(Self::Separate { lms, labels })
    }

    pub fn verbalizer(lm: CausalLM, label_tokens: Vec<usize>, labels: Vec<String>) -> Result<Self> {
        if label_tokens.len() < 2 || label_tokens.len() != labels.len() {
            return Err(Error::invalid("need one prefix token per label and at least two labels"));
        }
        if label_tokens.iter().any(|&t| t >= lm.vocab_size()) {
            return Err(Error::invalid("label token outside vocabulary"));
        }
        Ok(Self::Verbalizer {
            lm,
            label_tokens,
            labels,
        })
    }

    pub fn labels(&self) -> &[String] {
        match self {
            Self::Separate { labels, .. } | Self::Verbalizer { labels, .. } => labels,
        }
    }

    pub fn label_count(&self) -> usize {
        self.labels().len()
    }

    pub fn table(&self) -> &Arc<EmbeddingTable> {
        match self {
            Self::Separate { lms, .. } => lms[0].table(),
            Self::Verbalizer { lm, .. } => lm.table(),
        }
    }

    /// Model and discrete context (`<bos>`, optional label prefix, prompt)
    /// for one label, plus the index of the first prompt token.
    pub fn conditioning(&self, label: usize, prompt: &[usize]) -> Result<(&CausalLM, Vec<usize>, usize)> {
        if label >= self.label_count() {
            return Err(Error::LabelRange {
                label,
                count: self.label_count(),
            });
        }
        let mut ctx = vec![BOS_ID];
        let lm = match self {
            Self::Separate { lms, .. } => &lms[label],
            Self::Verbalizer { lm, label_tokens, .. } => {
                ctx.push(label_tokens[label]);
                lm
            }
        };
        let from = ctx.len();
        ctx.extend_from_slice(prompt);
        Ok((lm, ctx, from))
    }

    /// `−log p(prompt, output | label)`.
    pub fn class_nll_graph(&self, g: &mut Graph, label: usize, prompt: &[usize], view: &OutputView) -> Result<Var> {
        let (lm, ctx, from) = self.conditioning(label, prompt)?;
        let b = lm.bind(g, false, false)?;
        let bias = view.target_bias(g, b.out_bias())?;
        let score = (from < ctx.len()).then_some(from);
        lm.nll_graph(g, &b, &ctx, score, view.vectors, bias)
    }

    pub fn class_nll(&self, label: usize, prompt: &[usize], seq: &SoftSequence) -> Result<f64> {
        let mut g = Graph::new();
        let out = g.constant(seq.vectors().clone())?;
        let view = OutputView::embeds(out, seq.projected_ids());
        let nll = self.class_nll_graph(&mut g, label, prompt, &view)?;
        Ok(g.scalar(nll))
    }

    /// Bayes posterior `p(label | text)` under a uniform label prior.
    pub fn generative_classprob(&self, prompt: &[usize], seq: &SoftSequence, label: usize) -> Result<f64> {
        Ok(self.posterior(prompt, seq)?[label])
    }

    pub fn posterior(&self, prompt: &[usize], seq: &SoftSequence) -> Result<Vec<f64>> {
        let lls = (0..self.label_count())
            .map(|l| self.class_nll(l, prompt, seq).map(|n| -n))
            .collect::<Result<Vec<_>>>()?;
        if lls.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("generative_classprob".into()));
        }
        let z = log_sum_exp(&lls);
        Ok(lls.iter().map(|ll| (ll - z).exp()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::gaussian;
    use crate::model::LmConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lm(seed: u64, table: Arc<EmbeddingTable>) -> CausalLM {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = LmConfig {
            layers: 1,
            heads: 1,
            ffn_hidden: 8,
            context_limit: 16,
            position_scale: 0.5,
        };
        CausalLM::new_random(table, config, &mut rng).unwrap()
    }

    fn table() -> Arc<EmbeddingTable> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        Arc::new(EmbeddingTable::from_weights(gaussian(&mut rng, &[10, 4], 0.8)).unwrap())
    }

    #[test]
    fn identical_class_models_give_even_posterior() {
        let t = table();
        let a = lm(1, t.clone());
        let cond = ConditionalLM::separate(vec![a.clone(), a], vec!["neg".into(), "pos".into()]).unwrap();
        let seq = SoftSequence::from_ids(&t, &[3, 4, 5]).unwrap();
        let p = cond.posterior(&[2], &seq).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn posterior_is_ratio_of_likelihoods() {
        let t = table();
        let cond = ConditionalLM::separate(vec![lm(1, t.clone()), lm(2, t.clone())], vec!["a".into(), "b".into()])
            .unwrap();
        let seq = SoftSequence::from_ids(&t, &[6, 7]).unwrap();
        let n0 = cond.class_nll(0, &[3], &seq).unwrap();
        let n1 = cond.class_nll(1, &[3], &seq).unwrap();
        let expected = (-n1).exp() / ((-n0).exp() + (-n1).exp());
        let p = cond.generative_classprob(&[3], &seq, 1).unwrap();
        assert!((p - expected).abs() < 1e-12);
        let total: f64 = cond.posterior(&[3], &seq).unwrap().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn verbalizer_differs_only_in_prefix() {
        let t = table();
        let base = lm(4, t.clone());
        let cond = ConditionalLM::verbalizer(base.clone(), vec![8, 9], vec!["a".into(), "b".into()]).unwrap();
        let seq = SoftSequence::from_ids(&t, &[2, 5]).unwrap();
        for (label, tok) in [(0, 8), (1, 9)] {
            let direct = base.discrete_nll(&[tok, 3], &[2, 5]).unwrap() + base.discrete_nll(&[tok], &[3]).unwrap();
            let via = cond.class_nll(label, &[3], &seq).unwrap();
            assert!((direct - via).abs() < 1e-9, "{direct} vs {via}");
        }
    }

    #[test]
    fn mismatched_tables_are_rejected() {
        let cond = ConditionalLM::separate(vec![lm(1, table()), lm(1, {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            Arc::new(EmbeddingTable::from_weights(gaussian(&mut rng, &[10, 4], 0.8)).unwrap())
        })], vec!["a".into(), "b".into()]);
        assert!(matches!(cond, Err(Error::TableMismatch(..))));
    }
}
