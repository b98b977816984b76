//! Causal transformer language model with tied input/output embeddings.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lexicon::BOS_ID;
use super::params::{gaussian, ParamStore};
use super::table::EmbeddingTable;
use crate::autodiff::{softmax, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::SoftSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub context_limit: usize,
    /// Amplitude of the sinusoidal position signal added to the inputs.
    pub position_scale: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            ffn_hidden: 64,
            context_limit: 64,
            position_scale: 0.5,
        }
    }
}

const PER_BLOCK: usize = 12;

mod slot {
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const WQ: usize = 2;
    pub const WK: usize = 3;
    pub const WV: usize = 4;
    pub const WO: usize = 5;
    pub const LN2_G: usize = 6;
    pub const LN2_B: usize = 7;
    pub const W1: usize = 8;
    pub const B1: usize = 9;
    pub const W2: usize = 10;
    pub const B2: usize = 11;
}

#[derive(Clone, Debug, PartialEq)]
pub struct CausalLM {
    table: Arc<EmbeddingTable>,
    config: LmConfig,
    params: ParamStore,
}

/// An LM whose parameters have been placed on a particular graph.
pub struct BoundLm {
    pub table: Var,
    table_t: Var,
    params: Vec<Var>,
    layers: usize,
}

impl BoundLm {
    fn block(&self, layer: usize, slot: usize) -> Var {
        self.params[layer * PER_BLOCK + slot]
    }

    fn final_gain(&self) -> Var {
        self.params[self.layers * PER_BLOCK]
    }

    fn final_bias(&self) -> Var {
        self.params[self.layers * PER_BLOCK + 1]
    }

    pub fn out_bias(&self) -> Var {
        self.params[self.layers * PER_BLOCK + 2]
    }

    /// Parameter leaves, in store order.
    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }
}

fn empty_store(d: usize, v: usize, config: &LmConfig) -> ParamStore {
    let h = config.ffn_hidden;
    let mut p = ParamStore::default();
    for l in 0..config.layers {
        p.push(format!("block{l}.ln1.gain"), Tensor::filled(&[d], 1.0));
        p.push(format!("block{l}.ln1.bias"), Tensor::zeros(&[d]));
        for name in ["wq", "wk", "wv", "wo"] {
            p.push(format!("block{l}.attn.{name}"), Tensor::zeros(&[d, d]));
        }
        p.push(format!("block{l}.ln2.gain"), Tensor::filled(&[d], 1.0));
        p.push(format!("block{l}.ln2.bias"), Tensor::zeros(&[d]));
        p.push(format!("block{l}.ffn.w1"), Tensor::zeros(&[d, h]));
        p.push(format!("block{l}.ffn.b1"), Tensor::zeros(&[h]));
        p.push(format!("block{l}.ffn.w2"), Tensor::zeros(&[h, d]));
        p.push(format!("block{l}.ffn.b2"), Tensor::zeros(&[d]));
    }
    p.push("final.gain", Tensor::filled(&[d], 1.0));
    p.push("final.bias", Tensor::zeros(&[d]));
    p.push("out.bias", Tensor::zeros(&[v]));
    p
}

impl CausalLM {
    pub fn new_random<R: Rng + ?Sized>(table: Arc<EmbeddingTable>, config: LmConfig, rng: &mut R) -> Result<Self> {
        let (d, v) = (table.dim(), table.vocab_size());
        validate_config(&config, d)?;
        let mut params = empty_store(d, v, &config);
        let h = config.ffn_hidden;
        let residual_std = 1.0 / ((d as f64) * (2 * config.layers) as f64).sqrt();
        for l in 0..config.layers {
            let base = l * PER_BLOCK;
            let t = params.tensors_mut();
            for s in [slot::WQ, slot::WK, slot::WV] {
                t[base + s] = gaussian(rng, &[d, d], 1.0 / (d as f64).sqrt());
            }
            t[base + slot::WO] = gaussian(rng, &[d, d], residual_std);
            t[base + slot::W1] = gaussian(rng, &[d, h], 1.0 / (d as f64).sqrt());
            t[base + slot::W2] = gaussian(rng, &[h, d], 1.0 / ((h * 2 * config.layers) as f64).sqrt());
        }
        Ok(Self { table, config, params })
    }

    /// Every parameter (layer-norm gains included) set to zero; the model
    /// predicts the uniform distribution.
    pub fn zeros(table: Arc<EmbeddingTable>, config: LmConfig) -> Result<Self> {
        validate_config(&config, table.dim())?;
        let params = empty_store(table.dim(), table.vocab_size(), &config).zeroed();
        Ok(Self { table, config, params })
    }

    pub fn from_parts(table: Arc<EmbeddingTable>, config: LmConfig, params: ParamStore) -> Result<Self> {
        validate_config(&config, table.dim())?;
        let expected = empty_store(table.dim(), table.vocab_size(), &config);
        if expected.names() != params.names()
            || expected.tensors().iter().zip(params.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Checkpoint("language model parameter layout mismatch".into()));
        }
        Ok(Self { table, config, params })
    }

    pub fn table(&self) -> &Arc<EmbeddingTable> {
        &self.table
    }

    /// Mutable access to the (shared) table; input lookups and output logits
    /// both read this single matrix.
    pub fn table_mut(&mut self) -> &mut EmbeddingTable {
        Arc::make_mut(&mut self.table)
    }

    pub fn set_table(&mut self, table: Arc<EmbeddingTable>) {
        self.table = table;
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.table.vocab_size()
    }

    /// The same model with a different context limit. Positions are
    /// computed on the fly, so longer inputs need no new parameters.
    pub fn with_context_limit(mut self, limit: usize) -> Self {
        self.config.context_limit = limit;
        self
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool, trainable_table: bool) -> Result<BoundLm> {
        let table = if trainable_table {
            g.leaf(self.table.weights().clone())?
        } else {
            g.constant(self.table.weights().clone())?
        };
        let table_t = g.transpose(table)?;
        let params = self.params.bind(g, trainable)?;
        Ok(BoundLm {
            table,
            table_t,
            params,
            layers: self.config.layers,
        })
    }

    fn positions(&self, len: usize) -> Tensor {
        let d = self.table.dim();
        let mut data = Vec::with_capacity(len * d);
        for t in 0..len {
            for i in 0..d {
                let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                let a = t as f64 * rate;
                data.push(self.config.position_scale * if i % 2 == 0 { a.sin() } else { a.cos() });
            }
        }
        Tensor::new(vec![len, d], data).expect("shape")
    }

    fn affine_norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = g.layer_norm_rows(x)?;
        let n = g.mul_rows(n, gain)?;
        g.add_rows(n, bias)
    }

    /// Final hidden states `h_n` for input vectors `x: [T,d]`; row `n` only
    /// depends on rows `0..=n`.
    pub fn hidden(&self, g: &mut Graph, b: &BoundLm, x: Var) -> Result<Var> {
        let (t, d) = g.value(x).dims2();
        if t > self.config.context_limit {
            return Err(Error::ContextLimit {
                len: t,
                limit: self.config.context_limit,
            });
        }
        let pos = g.constant(self.positions(t))?;
        let mut x = g.add(x, pos)?;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..self.config.layers {
            let h = Self::affine_norm(g, x, b.block(l, slot::LN1_G), b.block(l, slot::LN1_B))?;
            let q = g.matmul(h, b.block(l, slot::WQ))?;
            let k = g.matmul(h, b.block(l, slot::WK))?;
            let v = g.matmul(h, b.block(l, slot::WV))?;
            let mut outs = Vec::with_capacity(heads);
            for head in 0..heads {
                let (s, e) = (head * dh, (head + 1) * dh);
                let (qh, kh, vh) = if heads == 1 {
                    (q, k, v)
                } else {
                    (g.slice_cols(q, s, e)?, g.slice_cols(k, s, e)?, g.slice_cols(v, s, e)?)
                };
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale)?;
                let attn = g.causal_softmax_rows(scores)?;
                outs.push(g.matmul(attn, vh)?);
            }
            let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
            let proj = g.matmul(merged, b.block(l, slot::WO))?;
            x = g.add(x, proj)?;

            let h = Self::affine_norm(g, x, b.block(l, slot::LN2_G), b.block(l, slot::LN2_B))?;
            let h = g.matmul(h, b.block(l, slot::W1))?;
            let h = g.add_rows(h, b.block(l, slot::B1))?;
            let h = g.gelu(h)?;
            let h = g.matmul(h, b.block(l, slot::W2))?;
            let h = g.add_rows(h, b.block(l, slot::B2))?;
            x = g.add(x, h)?;
        }
        Self::affine_norm(g, x, b.final_gain(), b.final_bias())
    }

    /// `h W_Eᵀ + b` for hidden rows `h: [T,d]`.
    pub fn logits(&self, g: &mut Graph, b: &BoundLm, h: Var) -> Result<Var> {
        let z = g.matmul(h, b.table_t)?;
        g.add_rows(z, b.out_bias())
    }

    /// Negative log-likelihood of continuous output vectors `out: [L,d]`
    /// following `context` (which must start with `<bos>`).
    ///
    /// Each output factor is `softmax(h_nᵀ e_j + b_j)` evaluated with the
    /// continuous vector in place of the target row; `target_bias: [L]`
    /// supplies the bias term of the target. When `score_context_from` is
    /// set, the discrete context tokens from that index on are scored too.
    pub fn nll_graph(
        &self,
        g: &mut Graph,
        b: &BoundLm,
        context: &[usize],
        score_context_from: Option<usize>,
        out: Var,
        target_bias: Var,
    ) -> Result<Var> {
        if context.first() != Some(&BOS_ID) {
            return Err(Error::invalid("context must start with <bos>"));
        }
        let (l, d) = g.value(out).dims2();
        if d != self.table.dim() {
            return Err(Error::Shape {
                op: "lm_nll",
                lhs: g.shape(out).to_vec(),
                rhs: vec![self.table.dim()],
            });
        }
        let c = context.len();
        let total = c + l;
        if total > self.config.context_limit {
            return Err(Error::ContextLimit {
                len: total,
                limit: self.config.context_limit,
            });
        }
        let ctx = g.embed_rows(b.table, context)?;
        // The last output vector is never an input to a prediction.
        let x = if l > 1 {
            let inputs = g.slice_rows(out, 0, l - 1)?;
            g.concat_rows(&[ctx, inputs])?
        } else {
            ctx
        };
        let h = self.hidden(g, b, x)?;
        let h_out = g.slice_rows(h, c - 1, c - 1 + l)?;
        let logits = self.logits(g, b, h_out)?;
        let lse = g.log_sum_exp_rows(logits)?;
        let target = g.row_dot(h_out, out)?;
        let target = g.add(target, target_bias)?;
        let per_token = g.sub(lse, target)?;
        let mut nll = g.sum(per_token)?;

        if let Some(from) = score_context_from {
            if from < 1 || from > c {
                return Err(Error::invalid("score_context_from out of range"));
            }
            if from < c {
                let h_ctx = g.slice_rows(h, from - 1, c - 1)?;
                let logits = self.logits(g, b, h_ctx)?;
                let lp = g.log_softmax_rows(logits)?;
                let v = self.table.vocab_size();
                let idx: Vec<usize> = (from..c).enumerate().map(|(r, t)| r * v + context[t]).collect();
                let picked = g.gather(lp, &idx)?;
                let ctx_ll = g.sum(picked)?;
                nll = g.sub(nll, ctx_ll)?;
            }
        }
        Ok(nll)
    }

    /// Teacher-forced discrete NLL of `tokens[score_from..]` given the
    /// preceding tokens; `tokens[0]` must be `<bos>`.
    pub fn token_nll_graph(&self, g: &mut Graph, b: &BoundLm, tokens: &[usize], score_from: usize) -> Result<Var> {
        if tokens.first() != Some(&BOS_ID) || score_from == 0 || score_from >= tokens.len() {
            return Err(Error::invalid("token_nll needs <bos> and at least one scored token"));
        }
        let inputs = &tokens[..tokens.len() - 1];
        let x = g.embed_rows(b.table, inputs)?;
        let h = self.hidden(g, b, x)?;
        let h = g.slice_rows(h, score_from - 1, tokens.len() - 1)?;
        let logits = self.logits(g, b, h)?;
        let lp = g.log_softmax_rows(logits)?;
        let v = self.table.vocab_size();
        let idx: Vec<usize> = (score_from..tokens.len())
            .enumerate()
            .map(|(r, t)| r * v + tokens[t])
            .collect();
        let picked = g.gather(lp, &idx)?;
        let ll = g.sum(picked)?;
        g.neg(ll)
    }

    /// Bias entries `b[ids]` as a `[L]` node.
    pub fn target_bias(&self, g: &mut Graph, b: &BoundLm, ids: &[usize]) -> Result<Var> {
        g.gather(b.out_bias(), ids)
    }

    /// `−log P(ẽ | prompt)` for a soft sequence.
    pub fn nll(&self, prompt: &[usize], seq: &SoftSequence) -> Result<f64> {
        self.nll_and_grad(prompt, seq, false).map(|(v, _)| v)
    }

    /// NLL and, when requested, its gradient with respect to the vectors.
    pub fn nll_and_grad(&self, prompt: &[usize], seq: &SoftSequence, with_grad: bool) -> Result<(f64, Option<Tensor>)> {
        seq.vectors().ensure_finite("soft sequence")?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false, false)?;
        let out = if with_grad {
            g.leaf(seq.vectors().clone())?
        } else {
            g.constant(seq.vectors().clone())?
        };
        let bias = self.target_bias(&mut g, &b, seq.projected_ids())?;
        let ctx = context_for(prompt);
        let nll = self.nll_graph(&mut g, &b, &ctx, None, out, bias)?;
        let grad = if with_grad {
            Some(g.backward(nll)?.wrt(out))
        } else {
            None
        };
        Ok((g.scalar(nll), grad))
    }

    /// Discrete teacher-forced `−log P(output | prompt)`.
    pub fn discrete_nll(&self, prompt: &[usize], output: &[usize]) -> Result<f64> {
        let mut tokens = context_for(prompt);
        let from = tokens.len();
        tokens.extend_from_slice(output);
        let mut g = Graph::new();
        let b = self.bind(&mut g, false, false)?;
        let nll = self.token_nll_graph(&mut g, &b, &tokens, from)?;
        Ok(g.scalar(nll))
    }

    /// Next-token distribution after `context` (which starts with `<bos>`).
    pub fn next_token_probs(&self, context: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false, false)?;
        let x = g.embed_rows(b.table, context)?;
        let h = self.hidden(&mut g, &b, x)?;
        let last = g.slice_rows(h, context.len() - 1, context.len())?;
        let logits = self.logits(&mut g, &b, last)?;
        Ok(softmax(g.value(logits).data()))
    }
}

/// `<bos>` followed by the prompt.
pub fn context_for(prompt: &[usize]) -> Vec<usize> {
    let mut c = Vec::with_capacity(prompt.len() + 1);
    c.push(BOS_ID);
    c.extend_from_slice(prompt);
    c
}

fn validate_config(config: &LmConfig, d: usize) -> Result<()> {
    if config.heads == 0 || !d.is_multiple_of(config.heads) {
        return Err(Error::invalid(format!("{} heads do not divide width {d}", config.heads)));
    }
    if config.layers == 0 || config.ffn_hidden == 0 || config.context_limit < 2 {
        return Err(Error::invalid("layers, ffn_hidden must be >= 1 and context_limit >= 2"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Lexicon;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(v: usize, d: usize, seed: u64) -> Arc<EmbeddingTable> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lex = Lexicon::from((0..v).map(|i| format!("w{i}")).collect::<Vec<_>>());
        Arc::new(EmbeddingTable::new(gaussian(&mut rng, &[v, d], 0.5), lex).unwrap())
    }

    fn small_lm(seed: u64) -> CausalLM {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = LmConfig {
            layers: 2,
            heads: 2,
            ffn_hidden: 12,
            context_limit: 16,
            position_scale: 0.5,
        };
        CausalLM::new_random(table(11, 8, seed), config, &mut rng).unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let lm = CausalLM::zeros(table(13, 8, 1), LmConfig::default()).unwrap();
        let seq = SoftSequence::from_ids(lm.table(), &[3, 4, 5, 6]).unwrap();
        let nll = lm.nll(&[2], &seq).unwrap();
        assert!((nll - 4.0 * 13f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn continuous_nll_on_table_rows_equals_discrete_nll() {
        let lm = small_lm(3);
        let ids = [4, 9, 2, 2, 7];
        let seq = SoftSequence::from_ids(lm.table(), &ids).unwrap();
        let cont = lm.nll(&[5, 6], &seq).unwrap();
        let disc = lm.discrete_nll(&[5, 6], &ids).unwrap();
        assert!((cont - disc).abs() < 1e-9, "{cont} vs {disc}");
    }

    #[test]
    fn next_token_distribution_sums_to_one() {
        let lm = small_lm(4);
        let p = lm.next_token_probs(&[0, 3, 4]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn context_limit_is_enforced() {
        let lm = small_lm(5);
        let seq = SoftSequence::from_ids(lm.table(), &[1; 16]).unwrap();
        assert!(matches!(lm.nll(&[], &seq), Err(Error::ContextLimit { .. })));
    }

    #[test]
    fn non_finite_vectors_are_rejected() {
        let lm = small_lm(6);
        let mut seq = SoftSequence::from_ids(lm.table(), &[1, 2]).unwrap();
        let mut v = seq.vectors().clone();
        v.data_mut()[0] = f64::INFINITY;
        // from_vectors itself refuses to project a non-finite vector.
        assert!(SoftSequence::from_vectors(lm.table(), v).is_err());
        seq = seq.quantized(lm.table()).unwrap();
        assert!(lm.nll(&[], &seq).is_ok());
    }

    #[test]
    fn tied_table_feeds_inputs_and_outputs() {
        let mut lm = small_lm(7);
        let before_in = lm.discrete_nll(&[3], &[4]).unwrap();
        let before_out = lm.next_token_probs(&[0, 1]).unwrap();
        // Not a uniform shift: layer norm would cancel that on the input side.
        lm.table_mut().weights_mut().row_mut(3).iter_mut().enumerate().for_each(|(i, v)| *v += 0.3 * i as f64);
        // Row 3 is used as an input in the first case and as an output
        // logit row in the second.
        assert_ne!(before_in, lm.discrete_nll(&[3], &[4]).unwrap());
        assert_ne!(before_out[3], lm.next_token_probs(&[0, 1]).unwrap()[3]);
    }
}
