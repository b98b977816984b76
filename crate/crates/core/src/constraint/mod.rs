//! Constraints `f_i ≤ ε_i`, the energy that combines them with the LM,
//! and the Lagrange multipliers that weight them.

mod decl;
mod families;
mod keyword;
mod multiplier;

use std::fmt;
use std::sync::Arc;

use rand::RngCore;

pub use decl::{ConstraintDecl, ConstraintKind, ModelSet};
pub use families::{
    disc_constraint, disc_constraint_below, gen_constraint, gen_constraints, Discriminative, Generative,
    DEFAULT_TOXIC_THRESHOLD,
};
pub use keyword::{
    contains_phrase, keyword_set_constraint, keyword_threshold, KeywordConstraint, KeywordSet,
    Selection, DEFAULT_DELTA, DEFAULT_TAU,
};
pub use multiplier::{ascend, update_multipliers, MultiplierSchedule};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::SoftSequence;
use crate::model::{BoundLm, CausalLM, OutputView};

/// Everything a constraint may read while building its value on a graph.
pub struct EvalContext<'a> {
    pub prompt: &'a [usize],
    pub view: OutputView<'a>,
    /// The shared embedding table, bound as a constant.
    pub table: Var,
}

/// A differentiable constraint function `f(prompt, ẽ)`.
pub trait ConstraintFn: Send + Sync + fmt::Debug {
    fn kind(&self) -> &'static str;

    /// Builds the scalar `f` on `g`. Randomised constraints draw from `rng`.
    fn evaluate(&self, g: &mut Graph, ctx: &EvalContext, rng: &mut dyn RngCore) -> Result<Var>;

    /// A literal check on discrete ids, for constraints that admit one.
    fn holds_on_tokens(&self, _ids: &[usize]) -> Option<bool> {
        None
    }
}

#[derive(Clone, Debug)]
pub struct ConstraintSpec {
    pub name: String,
    pub f: Arc<dyn ConstraintFn>,
    pub epsilon: f64,
    lambda: f64,
}

impl ConstraintSpec {
    pub fn new(name: impl Into<String>, f: Arc<dyn ConstraintFn>, epsilon: f64) -> Result<Self> {
        if !epsilon.is_finite() {
            return Err(Error::invalid("constraint threshold must be finite"));
        }
        Ok(Self {
            name: name.into(),
            f,
            epsilon,
            lambda: 0.0,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Sets the multiplier, clamping at zero.
    pub fn set_lambda(&mut self, lambda: f64) {
        self.lambda = lambda.max(0.0);
    }

    pub fn satisfied(&self, f: f64) -> bool {
        f <= self.epsilon
    }
}

/// Value of the energy and its parts at one iterate.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyEval {
    pub energy: f64,
    pub nll: f64,
    pub f: Vec<f64>,
}

impl EnergyEval {
    pub fn all_satisfied(&self, constraints: &[ConstraintSpec]) -> bool {
        constraints.iter().zip(&self.f).all(|(c, &f)| c.satisfied(f))
    }
}

/// Graph handles for one energy evaluation.
pub struct EnergyVars {
    pub energy: Var,
    pub nll: Var,
    pub f: Vec<Var>,
}

/// Builds `nll + Σ λ_i (f_i − ε_i)` on `g` in declaration order.
///
/// With no constraints, or all `λ_i = 0`, the energy node holds exactly the
/// NLL value.
pub fn energy_graph(
    g: &mut Graph,
    lm: &CausalLM,
    bound: &BoundLm,
    prompt: &[usize],
    view: OutputView,
    constraints: &[ConstraintSpec],
    rng: &mut dyn RngCore,
) -> Result<EnergyVars> {
    let bias = view.target_bias(g, bound.out_bias())?;
    let nll = lm.nll_graph(g, bound, &crate::model::context_for(prompt), None, view.vectors, bias)?;
    let ctx = EvalContext {
        prompt,
        view,
        table: bound.table,
    };
    let mut f = Vec::with_capacity(constraints.len());
    let mut penalty: Option<Var> = None;
    for c in constraints {
        let v = c.f.evaluate(g, &ctx, rng).map_err(|e| e.in_constraint(&c.name))?;
        let value = g.value(v);
        if value.len() != 1 || !value.data()[0].is_finite() {
            return Err(Error::NonFinite("constraint value".into()).in_constraint(&c.name));
        }
        f.push(v);
        let slack = g.add_const(v, -c.epsilon)?;
        let term = g.scale(slack, c.lambda)?;
        penalty = Some(match penalty {
            None => term,
            Some(p) => g.add(p, term)?,
        });
    }
    let energy = match penalty {
        None => nll,
        Some(p) => g.add(nll, p)?,
    };
    Ok(EnergyVars { energy, nll, f })
}

/// Evaluates the energy at `seq` and, if asked, its gradient w.r.t. the vectors.
pub fn energy(
    prompt: &[usize],
    seq: &SoftSequence,
    lm: &CausalLM,
    constraints: &[ConstraintSpec],
    rng: &mut dyn RngCore,
    with_grad: bool,
) -> Result<(EnergyEval, Option<Tensor>)> {
    let mut g = Graph::new();
    let bound = lm.bind(&mut g, false, false)?;
    let out = if with_grad {
        g.leaf(seq.vectors().clone())?
    } else {
        g.constant(seq.vectors().clone())?
    };
    let view = OutputView::embeds(out, seq.projected_ids());
    let vars = energy_graph(&mut g, lm, &bound, prompt, view, constraints, rng)?;
    let eval = EnergyEval {
        energy: g.scalar(vars.energy),
        nll: g.scalar(vars.nll),
        f: vars.f.iter().map(|v| g.scalar(*v)).collect(),
    };
    let grad = if with_grad {
        Some(g.backward(vars.energy)?.wrt(out))
    } else {
        None
    };
    Ok((eval, grad))
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// `f = c + s · Σ ẽ`, for exercising the energy and multiplier plumbing.
    #[derive(Debug)]
    pub struct Affine {
        pub c: f64,
        pub s: f64,
    }

    impl ConstraintFn for Affine {
        fn kind(&self) -> &'static str {
            "affine"
        }

        fn evaluate(&self, g: &mut Graph, ctx: &EvalContext, _rng: &mut dyn RngCore) -> Result<Var> {
            let total = g.sum(ctx.view.vectors)?;
            let scaled = g.scale(total, self.s)?;
            g.add_const(scaled, self.c)
        }
    }

    #[derive(Debug)]
    pub struct Broken;

    impl ConstraintFn for Broken {
        fn kind(&self) -> &'static str {
            "broken"
        }

        fn evaluate(&self, g: &mut Graph, ctx: &EvalContext, _rng: &mut dyn RngCore) -> Result<Var> {
            let total = g.sum(ctx.view.vectors)?;
            g.add_const(total, f64::INFINITY)
        }
    }
}
