//! Classifier-based and class-conditional-LM constraints.

use std::sync::Arc;

use rand::RngCore;

use super::{ConstraintFn, ConstraintSpec, EvalContext};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{AttributeClassifier, ConditionalLM};

/// Upper bound used for the "attribute below" form, e.g. `p_toxic < 0.01`.
pub const DEFAULT_TOXIC_THRESHOLD: f64 = 0.01;

/// `f = −log p(label | prompt, ẽ)`.
#[derive(Clone, Debug)]
pub struct Discriminative {
    pub classifier: Arc<AttributeClassifier>,
    pub label: usize,
}

impl ConstraintFn for Discriminative {
    fn kind(&self) -> &'static str {
        "discriminative"
    }

    fn evaluate(&self, g: &mut Graph, ctx: &EvalContext, _rng: &mut dyn RngCore) -> Result<Var> {
        self.classifier.check_label(self.label)?;
        let b = self.classifier.bind(g, false)?;
        let lp = self.classifier.log_probs_graph(g, &b, ctx.prompt, ctx.view.vectors)?;
        let picked = g.gather(lp, &[self.label])?;
        let total = g.sum(picked)?;
        g.neg(total)
    }
}

/// `p(label) ≥ p_min`, as `−log p(label) ≤ −log p_min`.
pub fn disc_constraint(classifier: Arc<AttributeClassifier>, label: usize, p_min: f64) -> Result<ConstraintSpec> {
    if !(p_min > 0.0 && p_min < 1.0) {
        return Err(Error::invalid(format!("p_min must be strictly between 0 and 1, got {p_min}")));
    }
    classifier.check_label(label)?;
    let name = format!("disc:{}>={p_min}", classifier.labels()[label]);
    ConstraintSpec::new(name, Arc::new(Discriminative { classifier, label }), -p_min.ln())
}

/// `p(label) < p_max` for a two-label classifier, expressed as
/// `p(other) > 1 − p_max`.
pub fn disc_constraint_below(classifier: Arc<AttributeClassifier>, label: usize, p_max: f64) -> Result<ConstraintSpec> {
    if classifier.label_count() != 2 {
        return Err(Error::invalid("the upper-bound form needs a two-label classifier"));
    }
    classifier.check_label(label)?;
    disc_constraint(classifier, 1 - label, 1.0 - p_max)
}

/// `f = −log p(x,ẽ | desired) + log p(x,ẽ | other)`, threshold 0.
#[derive(Clone, Debug)]
pub struct Generative {
    pub model: Arc<ConditionalLM>,
    pub desired: usize,
    pub other: usize,
}

impl ConstraintFn for Generative {
    fn kind(&self) -> &'static str {
        "generative"
    }

    fn evaluate(&self, g: &mut Graph, ctx: &EvalContext, _rng: &mut dyn RngCore) -> Result<Var> {
        let want = self.model.class_nll_graph(g, self.desired, ctx.prompt, &ctx.view)?;
        let other = self.model.class_nll_graph(g, self.other, ctx.prompt, &ctx.view)?;
        g.sub(want, other)
    }
}

pub fn gen_constraint(model: Arc<ConditionalLM>, desired: usize, other: usize) -> Result<ConstraintSpec> {
    let n = model.label_count();
    for label in [desired, other] {
        if label >= n {
            return Err(Error::LabelRange { label, count: n });
        }
    }
    if desired == other {
        return Err(Error::invalid("desired and other labels must differ"));
    }
    let name = format!("gen:{}>{}", model.labels()[desired], model.labels()[other]);
    ConstraintSpec::new(name, Arc::new(Generative { model, desired, other }), 0.0)
}

/// One constraint per competing label: `n − 1` specs for `n` labels.
pub fn gen_constraints(model: Arc<ConditionalLM>, desired: usize) -> Result<Vec<ConstraintSpec>> {
    (0..model.label_count())
        .filter(|&k| k != desired)
        .map(|k| gen_constraint(model.clone(), desired, k))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::energy;
    use crate::geometry::SoftSequence;
    use crate::model::{gaussian, CausalLM, EmbeddingTable, LmConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table() -> Arc<EmbeddingTable> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        Arc::new(EmbeddingTable::from_weights(gaussian(&mut rng, &[10, 4], 0.8)).unwrap())
    }

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

    fn f_of(spec: &ConstraintSpec, base: &CausalLM, prompt: &[usize], seq: &SoftSequence) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        energy(prompt, seq, base, std::slice::from_ref(spec), &mut rng, false).unwrap().0.f[0]
    }

    #[test]
    fn degenerate_p_min_is_rejected() {
        let clf = Arc::new(AttributeClassifier::zeros(table(), vec!["a".into(), "b".into()], 3).unwrap());
        assert!(disc_constraint(clf.clone(), 0, 0.0).is_err());
        assert!(disc_constraint(clf.clone(), 0, 1.0).is_err());
        assert!(disc_constraint(clf, 2, 0.5).is_err());
    }

    #[test]
    fn uniform_classifier_sits_on_the_boundary() {
        let t = table();
        let clf = Arc::new(AttributeClassifier::zeros(t.clone(), vec!["a".into(), "b".into()], 3).unwrap());
        let spec = disc_constraint(clf, 1, 0.5).unwrap();
        let seq = SoftSequence::from_ids(&t, &[2, 3]).unwrap();
        let f = f_of(&spec, &lm(1, t), &[4], &seq);
        assert_eq!(f, spec.epsilon);
        assert!(spec.satisfied(f));
    }

    #[test]
    fn satisfaction_matches_direct_probability() {
        let t = table();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clf = Arc::new(AttributeClassifier::new_random(t.clone(), vec!["a".into(), "b".into()], 6, &mut rng).unwrap());
        let spec = disc_constraint(clf.clone(), 1, 0.5).unwrap();
        let base = lm(1, t.clone());
        let mut agree = 0;
        for _ in 0..100 {
            let ids: Vec<usize> = (0..4).map(|_| rng.random_range(0..10)).collect();
            let seq = SoftSequence::from_ids(&t, &ids).unwrap();
            let p = clf.logprob(&[5], &seq, 1).unwrap().exp();
            let f = f_of(&spec, &base, &[5], &seq);
            assert_eq!(spec.satisfied(f), p >= 0.5);
            agree += 1;
        }
        assert_eq!(agree, 100);
    }

    #[test]
    fn below_form_flips_the_label() {
        let t = table();
        let clf = Arc::new(AttributeClassifier::zeros(t, vec!["clean".into(), "toxic".into()], 3).unwrap());
        let spec = disc_constraint_below(clf, 1, DEFAULT_TOXIC_THRESHOLD).unwrap();
        assert!((spec.epsilon + 0.99f64.ln()).abs() < 1e-15);
        assert!(spec.name.contains("clean"));
    }

    #[test]
    fn generative_constraint_is_a_likelihood_difference() {
        let t = table();
        let cond = Arc::new(
            ConditionalLM::separate(vec![lm(2, t.clone()), lm(3, t.clone())], vec!["a".into(), "b".into()]).unwrap(),
        );
        let spec = gen_constraint(cond.clone(), 1, 0).unwrap();
        let seq = SoftSequence::from_ids(&t, &[6, 2, 8]).unwrap();
        let f = f_of(&spec, &lm(9, t.clone()), &[4], &seq);
        let direct = cond.class_nll(1, &[4], &seq).unwrap() - cond.class_nll(0, &[4], &seq).unwrap();
        assert!((f - direct).abs() < 1e-12);
        assert_eq!(spec.epsilon, 0.0);

        let same = Arc::new(ConditionalLM::separate(vec![lm(2, t.clone()), lm(2, t.clone())], vec!["a".into(), "b".into()]).unwrap());
        let spec = gen_constraint(same, 0, 1).unwrap();
        assert_eq!(f_of(&spec, &lm(9, t), &[4], &seq), 0.0);
    }

    #[test]
    fn n_class_extension() {
        let t = table();
        let lms = (0..4).map(|s| lm(s, t.clone())).collect();
        let labels = (0..4).map(|i| format!("c{i}")).collect();
        let cond = Arc::new(ConditionalLM::separate(lms, labels).unwrap());
        let specs = gen_constraints(cond, 2).unwrap();
        assert_eq!(specs.len(), 3);
        assert!(specs.iter().all(|s| s.name.starts_with("gen:c2>")));
    }
}
