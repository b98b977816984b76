//! Finite-difference suites for models and energy compositions, and the
//! table separation check, packaged as one report.

use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::{check_gradients, op_suite, random_tensor, FdReport, FD_STEP};
use crate::autodiff::{Graph, Tensor, Var};
use crate::constraint::{
    disc_constraint, energy_graph, gen_constraint, keyword_set_constraint, ConstraintFn, ConstraintSpec,
    EvalContext, KeywordConstraint, KeywordSet, Selection,
};
use crate::error::Result;
use crate::geometry::{argmax, verify_separation, SeparationReport, SoftSequence};
use crate::model::{
    context_for, AttributeClassifier, CausalLM, ConditionalLM, EmbeddingTable, LmConfig, OutputView,
};

const VOCAB: usize = 10;
const DIM: usize = 4;
const LEN: usize = 3;

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub ops: Vec<FdReport>,
    pub models: Vec<FdReport>,
    pub energies: Vec<FdReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub separation: Option<SeparationReport>,
}

impl VerifyReport {
    pub fn gradients_passed(&self) -> bool {
        self.ops.iter().chain(&self.models).chain(&self.energies).all(FdReport::passed)
    }

    pub fn passed(&self) -> bool {
        self.gradients_passed() && self.separation.as_ref().is_none_or(SeparationReport::holds)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.ops
            .iter()
            .chain(&self.models)
            .chain(&self.energies)
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Runs every gradient suite with `instances` random instances each, and the
/// separation check on `table` if given.
pub fn verify(seed: u64, instances: usize, table: Option<&EmbeddingTable>) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(VerifyReport {
        ops: op_suite(&mut rng, instances)?,
        models: model_suite(&mut rng, instances)?,
        energies: energy_suite(&mut rng, instances)?,
        separation: table.map(verify_separation),
    })
}

/// Random models sharing one table.
struct Fixture {
    lm: CausalLM,
    classifier: Arc<AttributeClassifier>,
    conditional: Arc<ConditionalLM>,
    keyword: KeywordConstraint,
    set: KeywordSet,
    prompt: Vec<usize>,
}

fn lm_config() -> LmConfig {
    LmConfig {
        layers: 1,
        heads: 2,
        ffn_hidden: 8,
        context_limit: 16,
        position_scale: 0.5,
    }
}

fn fixture(rng: &mut ChaCha8Rng, verbalizer: bool) -> Result<Fixture> {
    let (table, keyword, set) = loop {
        let table = EmbeddingTable::from_weights(random_tensor(rng, &[VOCAB, DIM], 1.5))?;
        let a = rng.random_range(0..VOCAB);
        // Distinct members; equal ones tie exactly in the set's min.
        let b = (a + rng.random_range(1..VOCAB)) % VOCAB;
        let kw = KeywordConstraint::new(&table, vec![a, b], 0.5, 0.1);
        let set = keyword_set_constraint(&table, &[vec![a], vec![b]], 0.5, 0.1);
        if let (Ok(kw), Ok(set)) = (kw, set) {
            break (Arc::new(table), kw, set);
        }
    };
    let lm = CausalLM::new_random(table.clone(), lm_config(), rng)?;
    let labels = vec!["x".to_string(), "y".to_string()];
    let classifier = Arc::new(AttributeClassifier::new_random(table.clone(), labels.clone(), 5, rng)?);
    let conditional = if verbalizer {
        ConditionalLM::verbalizer(CausalLM::new_random(table.clone(), lm_config(), rng)?, vec![2, 3], labels)?
    } else {
        let lms = vec![
            CausalLM::new_random(table.clone(), lm_config(), rng)?,
            CausalLM::new_random(table.clone(), lm_config(), rng)?,
        ];
        ConditionalLM::separate(lms, labels)?
    };
    let prompt = (0..rng.random_range(0..3)).map(|_| rng.random_range(0..VOCAB)).collect();
    Ok(Fixture {
        lm,
        classifier,
        conditional: Arc::new(conditional),
        keyword,
        set,
        prompt,
    })
}

/// Table rows of random ids, displaced so nothing sits exactly on a row.
fn near_rows(rng: &mut ChaCha8Rng, table: &EmbeddingTable) -> Result<(Tensor, Vec<usize>)> {
    let ids: Vec<usize> = (0..LEN).map(|_| rng.random_range(0..VOCAB)).collect();
    let mut x = SoftSequence::from_ids(table, &ids)?.vectors().clone();
    x.axpy(0.3, &random_tensor(rng, &[LEN, DIM], 1.0));
    let ids = SoftSequence::from_vectors(table, x.clone())?.projected_ids().to_vec();
    Ok((x, ids))
}

fn report(name: &str, instances: usize, errors: impl IntoIterator<Item = f64>) -> FdReport {
    FdReport {
        name: name.to_string(),
        instances,
        max_rel_error: errors.into_iter().fold(0.0, f64::max),
    }
}

/// Squared error and squared analytic norm of the gradient of a scalar
/// `eval(model)` over every entry of the tensors picked out by `entries`.
fn param_fd<M: Clone>(
    model: &M,
    analytic: &[Tensor],
    entries: impl Fn(&mut M) -> Vec<&mut Tensor>,
    eval: impl Fn(&M) -> Result<f64>,
) -> Result<(f64, f64)> {
    let (mut diff, mut norm) = (0.0, 0.0);
    let mut work = model.clone();
    for (k, a) in analytic.iter().enumerate() {
        for i in 0..a.len() {
            let orig = entries(&mut work)[k].data()[i];
            entries(&mut work)[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&work)?;
            entries(&mut work)[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&work)?;
            entries(&mut work)[k].data_mut()[i] = orig;
            let n = (up - down) / (2.0 * FD_STEP);
            diff += (a.data()[i] - n).powi(2);
            norm += a.data()[i].powi(2);
        }
    }
    Ok((diff, norm))
}

fn rel((diff, norm): (f64, f64)) -> f64 {
    diff.sqrt() / (norm.sqrt() + 1e-8)
}

/// Model gradients with respect to soft inputs and to every parameter.
pub fn model_suite<R: RngCore>(rng: &mut R, instances: usize) -> Result<Vec<FdReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let mut errs: [Vec<f64>; 5] = Default::default();
    for i in 0..instances {
        let fx = fixture(&mut rng, i % 2 == 1)?;
        let table = fx.lm.table().clone();
        let (x, ids) = near_rows(&mut rng, &table)?;
        let ctx = context_for(&fx.prompt);

        errs[0].push(check_gradients(std::slice::from_ref(&x), FD_STEP, |g, v| {
            let b = fx.lm.bind(g, false, false)?;
            let bias = fx.lm.target_bias(g, &b, &ids)?;
            fx.lm.nll_graph(g, &b, &ctx, None, v[0], bias)
        })?);

        let mut tokens = ctx.clone();
        tokens.extend_from_slice(&ids);
        let from = ctx.len();
        let mut g = Graph::new();
        let b = fx.lm.bind(&mut g, true, true)?;
        let nll = fx.lm.token_nll_graph(&mut g, &b, &tokens, from)?;
        let grads = g.backward(nll)?;
        let params: Vec<Tensor> = b.param_vars().iter().map(|&v| grads.wrt(v)).collect();
        let eval = |m: &CausalLM| {
            let mut g = Graph::new();
            let b = m.bind(&mut g, false, false)?;
            let nll = m.token_nll_graph(&mut g, &b, &tokens, from)?;
            Ok(g.scalar(nll))
        };
        let t = param_fd(&fx.lm, &[grads.wrt(b.table)], |m| vec![m.table_mut().weights_mut()], eval)?;
        let p = param_fd(&fx.lm, &params, |m| m.params_mut().tensors_mut().iter_mut().collect(), eval)?;
        errs[1].push(rel((t.0 + p.0, t.1 + p.1)));

        let label = rng.random_range(0..2);
        errs[2].push(check_gradients(std::slice::from_ref(&x), FD_STEP, |g, v| {
            let b = fx.classifier.bind(g, false)?;
            let lp = fx.classifier.log_probs_graph(g, &b, &fx.prompt, v[0])?;
            g.gather(lp, &[label])
        })?);

        let mut g = Graph::new();
        let b = fx.classifier.bind(&mut g, true)?;
        let out = g.constant(SoftSequence::from_ids(&table, &ids)?.vectors().clone())?;
        let lp = fx.classifier.log_probs_graph(&mut g, &b, &fx.prompt, out)?;
        let picked = g.gather(lp, &[label])?;
        let grads = g.backward(picked)?;
        let analytic: Vec<Tensor> = b.param_vars().iter().map(|&v| grads.wrt(v)).collect();
        let seq = SoftSequence::from_ids(&table, &ids)?;
        errs[3].push(rel(param_fd(
            fx.classifier.as_ref(),
            &analytic,
            |m: &mut AttributeClassifier| m.params_mut().tensors_mut().iter_mut().collect(),
            |m| m.logprob(&fx.prompt, &seq, label),
        )?));

        errs[4].push(check_gradients(std::slice::from_ref(&x), FD_STEP, |g, v| {
            let view = OutputView::embeds(v[0], &ids);
            fx.conditional.class_nll_graph(g, label, &fx.prompt, &view)
        })?);
    }
    let names = [
        "lm_nll/vectors",
        "lm_nll/parameters",
        "classifier_logprob/vectors",
        "classifier_logprob/parameters",
        "class_nll/vectors",
    ];
    Ok(names
        .iter()
        .zip(errs)
        .map(|(n, e)| report(n, instances, e))
        .collect())
}

/// A keyword constraint with its gumbel noise and selection frozen, so the
/// same function is evaluated at every finite-difference probe.
#[derive(Debug)]
struct Frozen {
    members: Vec<KeywordConstraint>,
    set: Option<KeywordSet>,
    noise: Vec<Tensor>,
    sel: Vec<Selection>,
}

impl Frozen {
    fn keyword(kw: &KeywordConstraint, rng: &mut dyn RngCore) -> Self {
        Self {
            members: vec![kw.clone()],
            set: None,
            noise: vec![KeywordConstraint::gumbel_noise(LEN + 1 - kw.phrase().len(), rng)],
            sel: vec![Selection::StraightThrough],
        }
    }

    fn set(set: &KeywordSet, rng: &mut dyn RngCore) -> Self {
        Self {
            members: set.members().to_vec(),
            noise: set
                .members()
                .iter()
                .map(|m| KeywordConstraint::gumbel_noise(LEN + 1 - m.phrase().len(), rng))
                .collect(),
            sel: vec![Selection::StraightThrough; set.members().len()],
            set: Some(set.clone()),
        }
    }

    /// Switches to the smooth surrogate anchored at `vectors`.
    fn anchored(mut self, table: &EmbeddingTable, vectors: &Tensor) -> Result<Self> {
        self.sel = self
            .members
            .iter()
            .zip(&self.noise)
            .map(|(m, z)| m.surrogate_offset(table, vectors, z).map(Selection::Surrogate))
            .collect::<Result<_>>()?;
        Ok(self)
    }
}

impl ConstraintFn for Frozen {
    fn kind(&self) -> &'static str {
        "frozen_keyword"
    }

    fn evaluate(&self, g: &mut Graph, ctx: &EvalContext, _rng: &mut dyn RngCore) -> Result<Var> {
        let mut d = Vec::with_capacity(self.members.len());
        for ((m, z), s) in self.members.iter().zip(&self.noise).zip(&self.sel) {
            d.push(m.distance_with(g, ctx.view.vectors, ctx.table, z, s)?);
        }
        match &self.set {
            Some(set) => set.min_slack(g, &d),
            None => Ok(d[0]),
        }
    }
}

#[derive(Clone, Copy)]
enum Param {
    Embeds,
    Simplex,
}

/// Energy at `x` (vectors, or logits for the simplex) on a fresh graph.
fn energy_at(
    g: &mut Graph,
    lm: &CausalLM,
    prompt: &[usize],
    x: Var,
    ids: &[usize],
    param: Param,
    constraints: &[ConstraintSpec],
) -> Result<Var> {
    let b = lm.bind(g, false, false)?;
    let view = match param {
        Param::Embeds => OutputView::embeds(x, ids),
        Param::Simplex => {
            let probs = g.softmax_rows(x)?;
            let vectors = g.matmul(probs, b.table)?;
            OutputView {
                vectors,
                ids,
                mix: Some(probs),
            }
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(energy_graph(g, lm, &b, prompt, view, constraints, &mut rng)?.energy)
}

fn mixture(table: &EmbeddingTable, logits: &Tensor) -> Result<Tensor> {
    let (l, v) = logits.dims2();
    let probs: Vec<f64> = (0..l).flat_map(|r| crate::autodiff::softmax(logits.row(r))).collect();
    Tensor::new(vec![l, v], probs)?.matmul(table.weights())
}

/// Energy gradients for each constraint family, all of them together, and
/// the simplex parameterisation. Keyword terms are checked through the
/// smooth surrogate, which `keyword/straight_through` shows to carry the
/// same gradient as the straight-through node at the anchor.
pub fn energy_suite<R: RngCore>(rng: &mut R, instances: usize) -> Result<Vec<FdReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let names = [
        "energy/lm_only",
        "energy/discriminative",
        "energy/generative",
        "energy/keyword",
        "energy/keyword_set",
        "energy/all",
        "energy/simplex_all",
        "keyword/straight_through",
    ];
    let mut errs: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for i in 0..instances {
        let fx = fixture(&mut rng, i % 2 == 1)?;
        let table = fx.lm.table().clone();
        let (x, ids) = near_rows(&mut rng, &table)?;
        let desired = rng.random_range(0..2);
        let disc = {
            let mut s = disc_constraint(fx.classifier.clone(), desired, 0.8)?;
            s.set_lambda(rng.random_range(0.1..2.0));
            s
        };
        let gen = {
            let mut s = gen_constraint(fx.conditional.clone(), desired, 1 - desired)?;
            s.set_lambda(rng.random_range(0.1..2.0));
            s
        };
        let kw_frozen = Frozen::keyword(&fx.keyword, &mut rng);
        let set_frozen = Frozen::set(&fx.set, &mut rng);
        let kw_eps = fx.keyword.epsilon();
        let kw_lambda = rng.random_range(0.1..2.0);
        let set_lambda = rng.random_range(0.1..2.0);
        let with_lambda = |name: &str, f: Frozen, eps: f64, lambda: f64| -> Result<ConstraintSpec> {
            let mut s = ConstraintSpec::new(name, Arc::new(f), eps)?;
            s.set_lambda(lambda);
            Ok(s)
        };

        let kw = with_lambda("kw", kw_frozen.anchored(&table, &x)?, kw_eps, kw_lambda)?;
        let set = with_lambda("set", set_frozen.anchored(&table, &x)?, 0.0, set_lambda)?;
        let all = vec![disc.clone(), gen.clone(), kw.clone(), set.clone()];

        let check = |cs: &[ConstraintSpec]| {
            check_gradients(std::slice::from_ref(&x), FD_STEP, |g, v| {
                energy_at(g, &fx.lm, &fx.prompt, v[0], &ids, Param::Embeds, cs)
            })
        };
        errs[0].push(check(&[])?);
        errs[1].push(check(std::slice::from_ref(&disc))?);
        errs[2].push(check(std::slice::from_ref(&gen))?);
        errs[3].push(check(std::slice::from_ref(&kw))?);
        errs[4].push(check(std::slice::from_ref(&set))?);
        errs[5].push(check(&all)?);

        let logits = random_tensor(&mut rng, &[LEN, VOCAB], 1.5);
        let mix_ids: Vec<usize> = (0..LEN).map(|r| argmax(logits.row(r))).collect();
        let anchor = mixture(&table, &logits)?;
        let simplex_all = vec![
            disc,
            gen,
            with_lambda("kw", Frozen::keyword(&fx.keyword, &mut rng).anchored(&table, &anchor)?, kw_eps, kw_lambda)?,
            with_lambda("set", Frozen::set(&fx.set, &mut rng).anchored(&table, &anchor)?, 0.0, set_lambda)?,
        ];
        errs[6].push(check_gradients(std::slice::from_ref(&logits), FD_STEP, |g, v| {
            energy_at(g, &fx.lm, &fx.prompt, v[0], &mix_ids, Param::Simplex, &simplex_all)
        })?);

        // Same noise, straight-through vs surrogate: identical gradients.
        let hard = with_lambda("kw", Frozen::keyword(&fx.keyword, &mut ChaCha8Rng::seed_from_u64(i as u64)), kw_eps, kw_lambda)?;
        let smooth = with_lambda(
            "kw",
            Frozen::keyword(&fx.keyword, &mut ChaCha8Rng::seed_from_u64(i as u64)).anchored(&table, &x)?,
            kw_eps,
            kw_lambda,
        )?;
        let grad = |c: &ConstraintSpec| -> Result<Tensor> {
            let mut g = Graph::new();
            let leaf = g.leaf(x.clone())?;
            let e = energy_at(&mut g, &fx.lm, &fx.prompt, leaf, &ids, Param::Embeds, std::slice::from_ref(c))?;
            Ok(g.backward(e)?.wrt(leaf))
        };
        let a = grad(&hard)?;
        let b = grad(&smooth)?;
        let mut diff = a.clone();
        diff.axpy(-1.0, &b);
        errs[7].push(diff.norm() / (a.norm() + 1e-8));
    }
    Ok(names
        .iter()
        .zip(errs)
        .map(|(n, e)| report(n, instances, e))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_on_a_few_instances() {
        let r = verify(11, 3, None).unwrap();
        for f in r.ops.iter().chain(&r.models).chain(&r.energies) {
            assert!(f.passed(), "{} {}", f.name, f.max_rel_error);
        }
        assert!(r.passed());
        assert!(r.energies.iter().any(|e| e.name == "energy/simplex_all"));
    }

    #[test]
    fn duplicated_rows_fail_separation() {
        let mut w = Tensor::identity(4);
        w.row_mut(3).copy_from_slice(&[0.0, 0.0, 1.0, 0.0]);
        let table = EmbeddingTable::from_weights(w).unwrap();
        let r = verify(0, 1, Some(&table)).unwrap();
        assert!(!r.passed());
        assert_eq!(r.separation.unwrap().violating_tokens(), vec![2, 3]);
    }
}
