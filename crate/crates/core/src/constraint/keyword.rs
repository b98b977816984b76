//! Keyword and phrase inclusion through the distance-softmax `π_n`.

use std::sync::Arc;

use rand::RngCore;
use rand_distr::{Distribution, Gumbel};

use super::{ConstraintFn, ConstraintSpec, EvalContext};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{argmax, log_pi_matrix, verify_separation, SoftSequence};
use crate::model::EmbeddingTable;

pub const DEFAULT_DELTA: f64 = 0.1;
pub const DEFAULT_TAU: f64 = 0.5;

/// True if `phrase` occurs as a contiguous run of `ids`.
pub fn contains_phrase(ids: &[usize], phrase: &[usize]) -> bool {
    !phrase.is_empty() && ids.windows(phrase.len()).any(|w| w == phrase)
}

/// `ε = (1/l) Σ_u −log π_{w_u}[w_u] + δ`.
///
/// Fails unless every phrase token satisfies the separation property with a
/// column margin above `l·δ`; below that margin an absent phrase can still
/// score under the threshold.
pub fn keyword_threshold(table: &EmbeddingTable, phrase: &[usize], delta: f64) -> Result<f64> {
    if phrase.is_empty() {
        return Err(Error::invalid("keyword phrase is empty"));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::invalid("delta must be positive"));
    }
    if let Some(&w) = phrase.iter().find(|&&w| w >= table.vocab_size()) {
        return Err(Error::invalid(format!("keyword token {w} outside vocabulary")));
    }
    let report = verify_separation(table);
    let l = phrase.len() as f64;
    let mut bad: Vec<usize> = phrase
        .iter()
        .copied()
        .filter(|&w| report.violations.iter().any(|v| v.token == w) || report.column_margins[w] <= l * delta)
        .collect();
    if !bad.is_empty() {
        bad.sort_unstable();
        bad.dedup();
        return Err(Error::Separation(bad));
    }
    let log_pi = log_pi_matrix(table);
    Ok(phrase.iter().map(|&w| -log_pi[w][w]).sum::<f64>() / l + delta)
}

/// How the gumbel sample `q` enters the distance.
#[derive(Clone, Debug, PartialEq)]
pub enum Selection {
    /// One-hot forward, relaxed backward.
    StraightThrough,
    /// `softmax + offset` with a fixed offset.
    Surrogate(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeywordConstraint {
    phrase: Vec<usize>,
    tau: f64,
    delta: f64,
    epsilon: f64,
}

impl KeywordConstraint {
    pub fn new(table: &EmbeddingTable, phrase: Vec<usize>, tau: f64, delta: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid("gumbel temperature must be positive"));
        }
        let epsilon = keyword_threshold(table, &phrase, delta)?;
        Ok(Self {
            phrase,
            tau,
            delta,
            epsilon,
        })
    }

    pub fn phrase(&self) -> &[usize] {
        &self.phrase
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn into_spec(self, name: impl Into<String>) -> Result<ConstraintSpec> {
        let eps = self.epsilon;
        ConstraintSpec::new(name, Arc::new(self), eps)
    }

    /// Window scores `g_n = (1/l) Σ_u log π_{n+u}[w_u]`, shape `[L−l+1]`.
    pub fn scores_graph(&self, g: &mut Graph, vectors: Var, table: Var) -> Result<Var> {
        let (len, _) = g.value(vectors).dims2();
        let l = self.phrase.len();
        if len < l {
            return Err(Error::invalid(format!("sequence length {len} is shorter than the phrase ({l})")));
        }
        let v = g.value(table).dims2().0;
        let d2 = g.sq_dist(vectors, table)?;
        let neg = g.scale(d2, -1.0)?;
        let log_pi = g.log_softmax_rows(neg)?;
        let windows = len - l + 1;
        let mut total: Option<Var> = None;
        for (u, &w) in self.phrase.iter().enumerate() {
            let idx: Vec<usize> = (0..windows).map(|n| (n + u) * v + w).collect();
            let part = g.gather(log_pi, &idx)?;
            total = Some(match total {
                None => part,
                Some(t) => g.add(t, part)?,
            });
        }
        let total = total.expect("phrase is non-empty");
        if l == 1 {
            Ok(total)
        } else {
            g.scale(total, 1.0 / l as f64)
        }
    }

    /// Numeric window scores of a soft sequence.
    pub fn scores(&self, table: &EmbeddingTable, seq: &SoftSequence) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let t = g.constant(table.weights().clone())?;
        let x = g.constant(seq.vectors().clone())?;
        let s = self.scores_graph(&mut g, x, t)?;
        Ok(g.value(s).data().to_vec())
    }

    /// One gumbel draw per window.
    pub fn gumbel_noise(windows: usize, rng: &mut dyn RngCore) -> Tensor {
        let gumbel = Gumbel::new(0.0, 1.0).expect("valid gumbel parameters");
        Tensor::vector((0..windows).map(|_| gumbel.sample(rng)).collect())
    }

    /// `d = Σ −q_n g_n` with `q` a hard gumbel-softmax draw over `g/τ`;
    /// gradients pass through the relaxed sample.
    pub fn distance_graph(&self, g: &mut Graph, vectors: Var, table: Var, rng: &mut dyn RngCore) -> Result<Var> {
        let windows = g.value(vectors).dims2().0.saturating_sub(self.phrase.len() - 1);
        let noise = Self::gumbel_noise(windows, rng);
        self.distance_with(g, vectors, table, &noise, &Selection::StraightThrough)
    }

    /// [`Self::distance_graph`] with explicit noise and selection rule.
    pub fn distance_with(&self, g: &mut Graph, vectors: Var, table: Var, noise: &Tensor, sel: &Selection) -> Result<Var> {
        let scores = self.scores_graph(g, vectors, table)?;
        let n = g.value(scores).len();
        if noise.len() != n {
            return Err(Error::Shape {
                op: "keyword_noise",
                lhs: vec![n],
                rhs: noise.shape().to_vec(),
            });
        }
        let noise = g.constant(noise.clone())?;
        let logits = g.scale(scores, 1.0 / self.tau)?;
        let logits = g.add(logits, noise)?;
        let row = g.reshape(logits, &[1, n])?;
        let soft = g.softmax_rows(row)?;
        let q = match sel {
            Selection::StraightThrough => {
                let pick = argmax(g.value(row).data());
                let mut hard = Tensor::zeros(&[1, n]);
                hard.data_mut()[pick] = 1.0;
                g.straight_through(soft, hard)?
            }
            Selection::Surrogate(offset) => {
                let offset = g.constant(offset.clone().reshape(vec![1, n])?)?;
                g.add(soft, offset)?
            }
        };
        let q = g.reshape(q, &[n])?;
        let weighted = g.mul(q, scores)?;
        let total = g.sum(weighted)?;
        g.neg(total)
    }

    /// The offset `hard − soft` at the point where `vectors` currently sit;
    /// with it, [`Selection::Surrogate`] reproduces the straight-through
    /// value and gradient there while being smooth nearby.
    pub fn surrogate_offset(&self, table: &EmbeddingTable, vectors: &Tensor, noise: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let t = g.constant(table.weights().clone())?;
        let x = g.constant(vectors.clone())?;
        let scores = self.scores_graph(&mut g, x, t)?;
        let logits: Vec<f64> = g
            .value(scores)
            .data()
            .iter()
            .zip(noise.data())
            .map(|(s, z)| s / self.tau + z)
            .collect();
        let soft = crate::autodiff::softmax(&logits);
        let pick = argmax(&logits);
        let offset = soft
            .iter()
            .enumerate()
            .map(|(i, p)| f64::from(u8::from(i == pick)) - p)
            .collect();
        Ok(Tensor::vector(offset))
    }

    pub fn distance(&self, table: &EmbeddingTable, seq: &SoftSequence, rng: &mut dyn RngCore) -> Result<f64> {
        let mut g = Graph::new();
        let t = g.constant(table.weights().clone())?;
        let x = g.constant(seq.vectors().clone())?;
        let d = self.distance_graph(&mut g, x, t, rng)?;
        Ok(g.scalar(d))
    }
}

impl ConstraintFn for KeywordConstraint {
    fn kind(&self) -> &'static str {
        "keyword"
    }

    fn evaluate(&self, g: &mut Graph, ctx: &EvalContext, rng: &mut dyn RngCore) -> Result<Var> {
        self.distance_graph(g, ctx.view.vectors, ctx.table, rng)
    }

    fn holds_on_tokens(&self, ids: &[usize]) -> Option<bool> {
        Some(contains_phrase(ids, &self.phrase))
    }
}

/// "At least one of": `f = min_m (d_m − ε_m)` against threshold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct KeywordSet {
    members: Vec<KeywordConstraint>,
}

impl KeywordSet {
    pub fn members(&self) -> &[KeywordConstraint] {
        &self.members
    }

    /// `min_m (d_m − ε_m)` over per-member distance nodes.
    pub fn min_slack(&self, g: &mut Graph, distances: &[Var]) -> Result<Var> {
        let mut slacks = Vec::with_capacity(distances.len());
        for (m, &d) in self.members.iter().zip(distances) {
            let s = g.add_const(d, -m.epsilon)?;
            slacks.push(g.reshape(s, &[1])?);
        }
        let all = g.concat_rows(&slacks)?;
        let values: Vec<f64> = g.value(all).data().iter().map(|v| -v).collect();
        let best = argmax(&values);
        let picked = g.gather(all, &[best])?;
        g.sum(picked)
    }
}

pub fn keyword_set_constraint(
    table: &EmbeddingTable,
    words: &[Vec<usize>],
    tau: f64,
    delta: f64,
) -> Result<KeywordSet> {
    if words.is_empty() {
        return Err(Error::invalid("keyword set is empty"));
    }
    let members = words
        .iter()
        .map(|w| KeywordConstraint::new(table, w.clone(), tau, delta))
        .collect::<Result<Vec<_>>>()?;
    Ok(KeywordSet { members })
}

impl KeywordSet {
    pub fn into_spec(self, name: impl Into<String>) -> Result<ConstraintSpec> {
        ConstraintSpec::new(name, Arc::new(self), 0.0)
    }
}

impl ConstraintFn for KeywordSet {
    fn kind(&self) -> &'static str {
        "keyword_set"
    }

    fn evaluate(&self, g: &mut Graph, ctx: &EvalContext, rng: &mut dyn RngCore) -> Result<Var> {
        let mut distances = Vec::with_capacity(self.members.len());
        for m in &self.members {
            distances.push(m.distance_graph(g, ctx.view.vectors, ctx.table, rng)?);
        }
        self.min_slack(g, &distances)
    }

    fn holds_on_tokens(&self, ids: &[usize]) -> Option<bool> {
        Some(self.members.iter().any(|m| contains_phrase(ids, &m.phrase)))
    }
}
