//! The constrained sampling loop shared by both parameterisations.

use rand::RngCore;

use super::config::SamplerConfig;
use super::record::{ids_hash, ConstraintOutcome, SampleRecord, Termination, TraceEntry, RECORD_VERSION};
use super::step::{gaussian_noise, init_sequence, langevin_step};
use crate::autodiff::{Graph, Tensor};
use crate::constraint::{energy, energy_graph, update_multipliers, ConstraintSpec, EnergyEval};
use crate::error::{Error, Result};
use crate::geometry::{argmax, SoftSequence};
use crate::model::{ar_sample, CausalLM, OutputView};
use crate::rng::{derive_seed, Stream};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeds of the independent random streams of one chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChainSeeds {
    /// Initial sequences (one draw per attempt).
    pub init: u64,
    /// Langevin noise and gumbel draws.
    pub noise: u64,
    /// Autoregressive fallback.
    pub fallback: u64,
}

impl ChainSeeds {
    pub fn derive(seed: u64, chain: u64) -> Self {
        Self {
            init: derive_seed(seed, chain, Stream::Init),
            noise: derive_seed(seed, chain, Stream::Noise),
            fallback: derive_seed(seed, chain, Stream::Fallback),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parameterization {
    /// One `d`-vector per position, projected onto the table every step.
    Embeddings,
    /// One `V`-vector of logits per position; inputs are softmax-weighted rows.
    Simplex,
}

impl Parameterization {
    /// Bytes of optimizer state (state, gradient and noise) for length `len`.
    pub fn state_bytes(self, len: usize, vocab: usize, dim: usize) -> usize {
        let width = match self {
            Parameterization::Embeddings => dim,
            Parameterization::Simplex => vocab,
        };
        3 * len * width * std::mem::size_of::<f64>()
    }
}

enum State {
    Embeds(SoftSequence),
    Simplex { logits: Tensor, ids: Vec<usize> },
}

struct Evaluated {
    eval: EnergyEval,
    grad: Tensor,
    graph_bytes: usize,
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let (rows, _) = t.dims2();
    (0..rows).map(|r| argmax(t.row(r))).collect()
}

impl State {
    fn init(kind: Parameterization, lm: &CausalLM, len: usize, rng: &mut ChaCha8Rng, cfg: &SamplerConfig) -> Result<Self> {
        let seq = init_sequence(lm.table(), len, rng)?;
        Ok(match kind {
            Parameterization::Embeddings => State::Embeds(seq),
            Parameterization::Simplex => {
                let v = lm.vocab_size();
                let mut logits = Tensor::zeros(&[len, v]);
                for (n, &id) in seq.projected_ids().iter().enumerate() {
                    logits.data_mut()[n * v + id] = cfg.simplex_init_logit;
                }
                let ids = seq.projected_ids().to_vec();
                State::Simplex { logits, ids }
            }
        })
    }

    fn ids(&self) -> &[usize] {
        match self {
            State::Embeds(s) => s.projected_ids(),
            State::Simplex { ids, .. } => ids,
        }
    }

    fn state_tensor_bytes(&self) -> usize {
        match self {
            State::Embeds(s) => s.vectors().byte_len(),
            State::Simplex { logits, .. } => logits.byte_len(),
        }
    }

    fn evaluate(&self, lm: &CausalLM, prompt: &[usize], constraints: &[ConstraintSpec], rng: &mut dyn RngCore) -> Result<Evaluated> {
        let mut g = Graph::new();
        let bound = lm.bind(&mut g, false, false)?;
        let (leaf, view) = match self {
            State::Embeds(seq) => {
                let x = g.leaf(seq.vectors().clone())?;
                (x, OutputView::embeds(x, seq.projected_ids()))
            }
            State::Simplex { logits, ids } => {
                let x = g.leaf(logits.clone())?;
                let probs = g.softmax_rows(x)?;
                let vectors = g.matmul(probs, bound.table)?;
                (
                    x,
                    OutputView {
                        vectors,
                        ids,
                        mix: Some(probs),
                    },
                )
            }
        };
        let vars = energy_graph(&mut g, lm, &bound, prompt, view, constraints, rng)?;
        let eval = EnergyEval {
            energy: g.scalar(vars.energy),
            nll: g.scalar(vars.nll),
            f: vars.f.iter().map(|v| g.scalar(*v)).collect(),
        };
        let grad = g.backward(vars.energy)?.wrt(leaf);
        Ok(Evaluated {
            eval,
            grad,
            graph_bytes: g.value_bytes(),
        })
    }

    /// Takes one Langevin step; returns the largest per-position move of
    /// the (projected) state and the bytes of the noise tensor drawn.
    fn step(&mut self, lm: &CausalLM, grad: &Tensor, eta: f64, beta: f64, rng: &mut dyn RngCore) -> Result<(f64, usize)> {
        match self {
            State::Embeds(seq) => {
                let next = langevin_step(seq, grad, eta, beta, rng, lm.table())?;
                let table = lm.table();
                let moved = seq
                    .projected_ids()
                    .iter()
                    .zip(next.projected_ids())
                    .map(|(&a, &b)| crate::autodiff::sq_dist(table.row(a), table.row(b)).sqrt())
                    .fold(0.0, f64::max);
                let noise_bytes = grad.byte_len();
                *seq = next;
                Ok((moved, noise_bytes))
            }
            State::Simplex { logits, ids } => {
                grad.ensure_finite("langevin gradient")?;
                let noise = gaussian_noise(rng, logits.shape());
                let old = ids.clone();
                logits.axpy(-eta, grad);
                logits.axpy((2.0 * eta * beta).sqrt(), &noise);
                logits.ensure_finite("langevin update")?;
                *ids = argmax_rows(logits);
                let moved = if *ids == old { 0.0 } else { f64::INFINITY };
                Ok((moved, noise.byte_len()))
            }
        }
    }
}

/// A satisfying iterate seen during an attempt.
struct Candidate {
    ids: Vec<usize>,
    nll: f64,
    f: Vec<f64>,
    count: usize,
}

enum AttemptOutcome {
    Emit { ids: Vec<usize>, f: Vec<f64>, termination: Termination },
    Failed { last: Vec<usize> },
}

struct Run<'a> {
    lm: &'a CausalLM,
    prompt: &'a [usize],
    cfg: &'a SamplerConfig,
    kind: Parameterization,
    trace: Vec<TraceEntry>,
    iterations: usize,
    peak_state: usize,
    peak_graph: usize,
}

impl Run<'_> {
    fn attempt(
        &mut self,
        attempt: usize,
        len: usize,
        base: &[ConstraintSpec],
        init_rng: &mut ChaCha8Rng,
        noise_rng: &mut ChaCha8Rng,
    ) -> Result<AttemptOutcome> {
        let cfg = self.cfg;
        let mut constraints = base.to_vec();
        constraints.iter_mut().for_each(|c| c.set_lambda(0.0));
        let mut state = State::init(self.kind, self.lm, len, init_rng, cfg)?;
        let tol = cfg.stall_tolerance_for(self.lm.table().dim());
        let noise = cfg.noise();
        let s = cfg.stall_window;

        let mut candidates: Vec<Candidate> = Vec::new();
        let mut best: Option<usize> = None;
        // Consecutive steps without movement, and the subset of those spent
        // with every constraint satisfied.
        let mut quiet = 0usize;
        let mut settled = 0usize;

        for t in 0..cfg.max_steps {
            let ev = state.evaluate(self.lm, self.prompt, &constraints, noise_rng)?;
            self.iterations += 1;
            self.peak_graph = self.peak_graph.max(ev.graph_bytes);
            let satisfied = ev.eval.all_satisfied(&constraints);
            if satisfied {
                let ids = state.ids();
                let k = match candidates.iter().position(|c| c.ids == ids) {
                    Some(k) => {
                        candidates[k].count += 1;
                        k
                    }
                    None => {
                        candidates.push(Candidate {
                            ids: ids.to_vec(),
                            nll: ev.eval.nll,
                            f: ev.eval.f.clone(),
                            count: 1,
                        });
                        candidates.len() - 1
                    }
                };
                if best.is_none_or(|b| candidates[k].nll < candidates[b].nll) {
                    best = Some(k);
                }
            }

            let beta = noise.beta_at(t);
            let eta = if satisfied && quiet > 0 {
                cfg.eta + (cfg.eta_max - cfg.eta) * settled.min(s) as f64 / s as f64
            } else {
                cfg.eta
            };
            if cfg.record_trace {
                self.trace.push(TraceEntry {
                    attempt,
                    t,
                    energy: ev.eval.energy,
                    nll: ev.eval.nll,
                    f: ev.eval.f.clone(),
                    lambda: constraints.iter().map(|c| c.lambda()).collect(),
                    beta,
                    eta,
                    ids_hash: ids_hash(state.ids()),
                    ids: state.ids().to_vec(),
                });
            }
            if satisfied && settled >= s {
                let b = &candidates[best.expect("a satisfying iterate exists")];
                return Ok(AttemptOutcome::Emit {
                    ids: b.ids.clone(),
                    f: b.f.clone(),
                    termination: Termination::ConvergedEarlyStop,
                });
            }

            update_multipliers(&mut constraints, &ev.eval.f, &cfg.multipliers, t, quiet > 0)?;
            let (moved, noise_bytes) = state
                .step(self.lm, &ev.grad, eta, beta, noise_rng)
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!("{what} at attempt {attempt}, iteration {t}")),
                    other => other,
                })?;
            self.peak_state = self
                .peak_state
                .max(state.state_tensor_bytes() + ev.grad.byte_len() + noise_bytes);
            if moved <= tol {
                quiet += 1;
                settled = if satisfied { settled + 1 } else { 0 };
            } else {
                quiet = 0;
                settled = 0;
            }
        }

        let chosen = candidates
            .iter()
            .filter(|c| c.count >= cfg.min_repeats)
            .fold(None::<&Candidate>, |acc, c| match acc {
                Some(a) if a.nll <= c.nll => Some(a),
                _ => Some(c),
            });
        Ok(match chosen {
            Some(c) => AttemptOutcome::Emit {
                ids: c.ids.clone(),
                f: c.f.clone(),
                termination: Termination::SelectedByRepeat,
            },
            None => AttemptOutcome::Failed {
                last: state.ids().to_vec(),
            },
        })
    }
}

/// Evaluates the constraints on a discrete output (multipliers play no role).
fn discrete_outcomes(
    lm: &CausalLM,
    prompt: &[usize],
    ids: &[usize],
    constraints: &[ConstraintSpec],
    rng: &mut dyn RngCore,
) -> Vec<ConstraintOutcome> {
    let values: Option<Vec<f64>> = (!ids.is_empty())
        .then(|| SoftSequence::from_ids(lm.table(), ids).ok())
        .flatten()
        .and_then(|seq| energy(prompt, &seq, lm, constraints, rng, false).ok())
        .map(|(e, _)| e.f);
    constraints
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let f = values.as_ref().map(|v| v[i]);
            let satisfied = match c.f.holds_on_tokens(ids) {
                Some(h) => h,
                None => f.is_some_and(|f| c.satisfied(f)),
            };
            ConstraintOutcome {
                name: c.name.clone(),
                f_final: f,
                epsilon: c.epsilon,
                satisfied,
            }
        })
        .collect()
}

fn certified_outcomes(constraints: &[ConstraintSpec], f: &[f64]) -> Vec<ConstraintOutcome> {
    constraints
        .iter()
        .zip(f)
        .map(|(c, &v)| ConstraintOutcome {
            name: c.name.clone(),
            f_final: Some(v),
            epsilon: c.epsilon,
            satisfied: c.satisfied(v),
        })
        .collect()
}

/// Runs the full constrained sampler with the given parameterisation.
pub fn run_chain(
    kind: Parameterization,
    lm: &CausalLM,
    prompt: &[usize],
    len: usize,
    constraints: &[ConstraintSpec],
    cfg: &SamplerConfig,
    seeds: ChainSeeds,
) -> Result<SampleRecord> {
    cfg.validate()?;
    if len == 0 {
        return Err(Error::invalid("output length must be >= 1"));
    }
    let requested = kind.state_bytes(len, lm.vocab_size(), lm.table().dim());
    if let Some(cap) = cfg.memory_cap_bytes {
        if requested > cap {
            return Err(Error::MemoryCap { requested, cap });
        }
    }
    let mut run = Run {
        lm,
        prompt,
        cfg,
        kind,
        trace: Vec::new(),
        iterations: 0,
        peak_state: 0,
        peak_graph: 0,
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(seeds.init);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seeds.noise);
    let mut last = Vec::new();
    let mut emitted = None;
    for attempt in 0..=cfg.restarts {
        match run.attempt(attempt, len, constraints, &mut init_rng, &mut noise_rng)? {
            AttemptOutcome::Emit { ids, f, termination } => {
                emitted = Some((ids, f, termination));
                break;
            }
            AttemptOutcome::Failed { last: l } => last = l,
        }
    }

    let mut eval_rng = ChaCha8Rng::seed_from_u64(seeds.fallback ^ 0x5eed);
    let (ids, outcomes, termination) = match emitted {
        Some((ids, f, termination)) => {
            let outcomes = match kind {
                Parameterization::Embeddings => certified_outcomes(constraints, &f),
                // The optimiser saw mixtures; report on the discrete readout.
                Parameterization::Simplex => discrete_outcomes(lm, prompt, &ids, constraints, &mut eval_rng),
            };
            (ids, outcomes, termination)
        }
        None if cfg.fallback => {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds.fallback);
            let ids = ar_sample(lm, prompt, len, cfg.nucleus_p, &mut rng)?;
            let outcomes = discrete_outcomes(lm, prompt, &ids, constraints, &mut eval_rng);
            (ids, outcomes, Termination::FallbackAutoregressive)
        }
        None => {
            let outcomes = discrete_outcomes(lm, prompt, &last, constraints, &mut eval_rng);
            (last, outcomes, Termination::FailedRestartExhausted)
        }
    };
    let nll = if ids.is_empty() { 0.0 } else { lm.discrete_nll(prompt, &ids)? };
    let lex = lm.table().lexicon();
    Ok(SampleRecord {
        version: RECORD_VERSION,
        prompt: lex.decode(prompt),
        output_text: lex.decode(&ids),
        output_ids: ids,
        termination,
        constraints: outcomes,
        nll,
        iterations: run.iterations,
        trace: run.trace,
        peak_state_bytes: run.peak_state,
        peak_graph_bytes: run.peak_graph,
    })
}

/// Embedding-space sampler.
pub fn sample(
    lm: &CausalLM,
    prompt: &[usize],
    len: usize,
    constraints: &[ConstraintSpec],
    cfg: &SamplerConfig,
    seeds: ChainSeeds,
) -> Result<SampleRecord> {
    run_chain(Parameterization::Embeddings, lm, prompt, len, constraints, cfg, seeds)
}

/// Vocabulary-simplex ablation.
pub fn simplex_sample(
    lm: &CausalLM,
    prompt: &[usize],
    len: usize,
    constraints: &[ConstraintSpec],
    cfg: &SamplerConfig,
    seeds: ChainSeeds,
) -> Result<SampleRecord> {
    run_chain(Parameterization::Simplex, lm, prompt, len, constraints, cfg, seeds)
}

/// Samples at each length and keeps the satisfying constrained output with
/// the lowest per-token NLL; if none qualifies, the first length's record.
pub fn sample_over_lengths(
    lm: &CausalLM,
    prompt: &[usize],
    lengths: &[usize],
    constraints: &[ConstraintSpec],
    cfg: &SamplerConfig,
    seeds: ChainSeeds,
) -> Result<SampleRecord> {
    if lengths.is_empty() {
        return Err(Error::invalid("at least one output length is required"));
    }
    let mut records = Vec::with_capacity(lengths.len());
    for (k, &len) in lengths.iter().enumerate() {
        let s = ChainSeeds {
            init: derive_seed(seeds.init, k as u64, Stream::Init),
            noise: derive_seed(seeds.noise, k as u64, Stream::Noise),
            fallback: derive_seed(seeds.fallback, k as u64, Stream::Fallback),
        };
        records.push(sample(lm, prompt, len, constraints, cfg, s)?);
    }
    let best = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.termination.is_constrained() && r.all_satisfied())
        .fold(None::<(usize, f64)>, |acc, (i, r)| {
            let p = r.per_token_nll();
            match acc {
                Some((_, q)) if q <= p => acc,
                _ => Some((i, p)),
            }
        })
        .map_or(0, |(i, _)| i);
    let total: usize = records.iter().map(|r| r.iterations).sum();
    let mut out = records.swap_remove(best);
    out.iterations = total;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::sync::{Arc, OnceLock};

    use super::*;
    use crate::constraint::testing::Affine;
    use crate::model::train::{train_lm, TrainConfig};
    use crate::model::{Lexicon, LmConfig};
    use crate::sampler::{NoiseSchedule, RECORD_VERSION};

    fn lm() -> &'static CausalLM {
        static LM: OnceLock<CausalLM> = OnceLock::new();
        LM.get_or_init(|| {
            let line = "a b ".repeat(8);
            let lines: Vec<String> = (0..40).map(|_| line.trim().to_string()).collect();
            let lex = Lexicon::build(lines.iter().map(String::as_str), &[]);
            let corpus: Vec<Vec<usize>> = lines.iter().map(|l| lex.encode(l).unwrap()).collect();
            let lm_cfg = LmConfig {
                layers: 1,
                heads: 1,
                ffn_hidden: 16,
                context_limit: 32,
                position_scale: 0.5,
            };
            let cfg = TrainConfig {
                epochs: 30,
                batch_size: 8,
                embed_dim: 8,
                learning_rate: 0.3,
                ..TrainConfig::default()
            };
            train_lm(&lex, &corpus, lm_cfg, &cfg).unwrap().0
        })
    }

    fn quick() -> SamplerConfig {
        SamplerConfig {
            max_steps: 40,
            stall_window: 5,
            restarts: 1,
            min_repeats: 3,
            ..SamplerConfig::default()
        }
    }

    fn impossible() -> ConstraintSpec {
        ConstraintSpec::new("never", Arc::new(Affine { c: 1.0, s: 0.0 }), 0.0).unwrap()
    }

    #[test]
    fn unconstrained_chain_settles_and_is_reproducible() {
        let lm = lm();
        let a = lm.table().lexicon().id("a").unwrap();
        let mut cfg = quick();
        cfg.set_noise(NoiseSchedule::silent());
        let seeds = ChainSeeds::derive(4, 0);
        let r = sample(lm, &[a], 6, &[], &cfg, seeds).unwrap();
        assert_eq!(r.version, RECORD_VERSION);
        assert_eq!(r.termination, Termination::ConvergedEarlyStop);
        assert_eq!(r.output_ids.len(), 6);
        assert!(r.iterations > cfg.stall_window);
        let again = sample(lm, &[a], 6, &[], &cfg, seeds).unwrap();
        assert_eq!(r.output_ids, again.output_ids);
        assert_eq!(r.nll.to_bits(), again.nll.to_bits());
        assert_eq!(r.trace.len(), r.iterations);
    }

    #[test]
    fn descent_finds_the_alternating_continuation() {
        let lm = lm();
        let lex = lm.table().lexicon();
        let a = lex.id("a").unwrap();
        let mut cfg = quick();
        cfg.max_steps = 150;
        cfg.set_noise(NoiseSchedule {
            beta_init: 0.5,
            beta_floor: 0.0,
            anneal_steps: 60,
        });
        let r = sample(lm, &[a], 4, &[], &cfg, ChainSeeds::derive(0, 0)).unwrap();
        assert_eq!(r.output_text, "b a b a", "{r:?}");
    }

    #[test]
    fn unsatisfiable_constraint_falls_back_or_fails() {
        let lm = lm();
        let cfg = quick();
        let r = sample(lm, &[], 3, &[impossible()], &cfg, ChainSeeds::derive(1, 2)).unwrap();
        assert_eq!(r.termination, Termination::FallbackAutoregressive);
        assert_eq!(r.iterations, (cfg.restarts + 1) * cfg.max_steps);
        assert!(!r.all_satisfied());
        assert_eq!(r.constraints[0].f_final, Some(1.0));

        let strict = SamplerConfig { fallback: false, ..cfg };
        let r = sample(lm, &[], 3, &[impossible()], &strict, ChainSeeds::derive(1, 2)).unwrap();
        assert_eq!(r.termination, Termination::FailedRestartExhausted);
        assert_eq!(r.output_ids.len(), 3);
    }

    #[test]
    fn multipliers_grow_while_violated() {
        let lm = lm();
        let cfg = SamplerConfig {
            restarts: 0,
            fallback: false,
            ..quick()
        };
        let r = sample(lm, &[], 2, &[impossible()], &cfg, ChainSeeds::derive(0, 0)).unwrap();
        let lambdas: Vec<f64> = r.trace.iter().map(|e| e.lambda[0]).collect();
        assert!(lambdas.windows(2).all(|w| w[1] >= w[0]));
        assert!(*lambdas.last().unwrap() > 0.0);
    }

    #[test]
    fn memory_cap_rejects_before_allocation() {
        let lm = lm();
        let cfg = SamplerConfig {
            memory_cap_bytes: Some(100),
            ..quick()
        };
        let err = sample(lm, &[], 4, &[], &cfg, ChainSeeds::derive(0, 0)).unwrap_err();
        assert!(matches!(err, Error::MemoryCap { requested, cap: 100 } if requested == 3 * 4 * 8 * 8));
        assert!(sample(lm, &[], 0, &[], &quick(), ChainSeeds::derive(0, 0)).is_err());
    }

    #[test]
    fn peak_state_matches_the_accounting() {
        let lm = lm();
        let r = sample(lm, &[], 5, &[], &quick(), ChainSeeds::derive(0, 0)).unwrap();
        assert_eq!(r.peak_state_bytes, Parameterization::Embeddings.state_bytes(5, lm.vocab_size(), 8));
        let s = simplex_sample(lm, &[], 5, &[], &quick(), ChainSeeds::derive(0, 0)).unwrap();
        assert_eq!(s.peak_state_bytes, Parameterization::Simplex.state_bytes(5, lm.vocab_size(), 8));
        assert_eq!(s.output_ids.len(), 5);
    }

    #[test]
    fn length_search_keeps_a_satisfying_output() {
        let lm = lm();
        let r = sample_over_lengths(lm, &[], &[2, 3, 4], &[], &quick(), ChainSeeds::derive(0, 0)).unwrap();
        assert!(r.termination.is_constrained());
        assert!((2..=4).contains(&r.output_ids.len()));
        assert!(sample_over_lengths(lm, &[], &[], &[], &quick(), ChainSeeds::derive(0, 0)).is_err());
    }

    #[test]
    fn seeds_differ_by_stream_and_chain() {
        let a = ChainSeeds::derive(0, 0);
        let b = ChainSeeds::derive(0, 1);
        assert_ne!(a, b);
        assert_ne!(a.init, a.noise);
    }
}
