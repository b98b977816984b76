//! Minibatch training for the toy models.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classifier::AttributeClassifier;
use super::conditional::ConditionalLM;
use super::lexicon::{Lexicon, BOS_ID, EOS_ID};
use super::lm::{context_for, CausalLM, LmConfig};
use super::params::gaussian;
use super::table::EmbeddingTable;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{verify_separation, SeparationReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Gradient norm clip; `0` disables clipping.
    pub clip_norm: f64,
    pub heldout_fraction: f64,
    /// Width `d` of a freshly initialised embedding table.
    pub embed_dim: usize,
    /// Standard deviation of the initial embedding rows.
    pub embed_init_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Sgd,
            clip_norm: 1.0,
            heldout_fraction: 0.1,
            embed_dim: 32,
            embed_init_scale: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.embed_dim == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::invalid("epochs, batch_size, embed_dim and learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::invalid("heldout_fraction must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LmTrainSummary {
    pub steps: usize,
    pub train_examples: usize,
    pub heldout_examples: usize,
    pub final_train_nll: f64,
    /// Per-token NLL on held-out lines (training lines if none were held out).
    pub heldout_nll: f64,
    pub uniform_nll: f64,
    pub separation_violations: usize,
    pub min_column_margin: f64,
    pub min_pairwise_sq_dist: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassifierTrainSummary {
    pub steps: usize,
    pub train_examples: usize,
    pub heldout_examples: usize,
    pub final_train_loss: f64,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    clip: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    fn new(cfg: &TrainConfig, shapes: &[&[usize]]) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        Self {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            clip: cfg.clip_norm,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &mut [Tensor]) {
        if self.clip > 0.0 {
            let norm = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
            if norm > self.clip {
                let s = self.clip / norm;
                grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
            }
        }
        self.t += 1;
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            match self.kind {
                OptimizerKind::Sgd => p.axpy(-self.lr, g),
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for i in 0..g.len() {
                        let gi = g.data()[i];
                        let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                        let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                        m.data_mut()[i] = mi;
                        v.data_mut()[i] = vi;
                        p.data_mut()[i] -= self.lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

fn split<T: Clone>(items: &[T], frac: f64, rng: &mut ChaCha8Rng) -> (Vec<T>, Vec<T>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let held = ((items.len() as f64) * frac).floor() as usize;
    let held = held.min(items.len().saturating_sub(1));
    let heldout = order[..held].iter().map(|&i| items[i].clone()).collect();
    let train = order[held..].iter().map(|&i| items[i].clone()).collect();
    (train, heldout)
}

fn as_diverged(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged { step, loss: f64::NAN },
        other => other,
    }
}

/// `<bos>`, optional label prefix, tokens, `<eos>`; returns the sequence and
/// the index of the first scored token.
fn framed(tokens: &[usize], prefix: Option<usize>) -> (Vec<usize>, usize) {
    let mut seq = vec![BOS_ID];
    seq.extend(prefix);
    let from = seq.len();
    seq.extend_from_slice(tokens);
    seq.push(EOS_ID);
    (seq, from)
}

/// Per-token teacher-forced NLL over `lines`.
pub fn corpus_nll(lm: &CausalLM, lines: &[Vec<usize>], prefix: Option<usize>) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for line in lines {
        let (seq, from) = framed(line, prefix);
        let mut g = Graph::new();
        let b = lm.bind(&mut g, false, false)?;
        let nll = lm.token_nll_graph(&mut g, &b, &seq, from)?;
        total += g.scalar(nll);
        count += seq.len() - from;
    }
    Ok(total / count.max(1) as f64)
}

fn fit_lm(
    lm: &mut CausalLM,
    train: &[(Vec<usize>, Option<usize>)],
    cfg: &TrainConfig,
    train_table: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, f64)> {
    let mut shapes: Vec<&[usize]> = lm.params().tensors().iter().map(|t| t.shape()).collect();
    let table_shape = lm.table().weights().shape().to_vec();
    if train_table {
        shapes.push(&table_shape);
    }
    let mut opt = Optimizer::new(cfg, &shapes);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut steps = 0;
    let mut last = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let b = lm.bind(&mut g, true, train_table).map_err(|e| as_diverged(e, steps))?;
            let mut losses = Vec::with_capacity(batch.len());
            let mut tokens = 0usize;
            for &i in batch {
                let (line, prefix) = &train[i];
                let (seq, from) = framed(line, *prefix);
                tokens += seq.len() - from;
                losses.push(lm.token_nll_graph(&mut g, &b, &seq, from).map_err(|e| as_diverged(e, steps))?);
            }
            let stacked = g.concat_rows(&losses)?;
            let total = g.sum(stacked)?;
            let loss = g.scale(total, 1.0 / tokens as f64)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged { step: steps, loss: value });
            }
            epoch_loss += g.scalar(total);
            epoch_tokens += tokens;
            let grads = g.backward(loss).map_err(|e| as_diverged(e, steps))?;
            let mut vars: Vec<Var> = b.param_vars().to_vec();
            if train_table {
                vars.push(b.table);
            }
            let mut grad_list: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();
            drop(g);
            let mut table = train_table.then(|| lm.table().as_ref().clone());
            {
                let mut targets: Vec<&mut Tensor> = lm.params_mut().tensors_mut().iter_mut().collect();
                if let Some(t) = table.as_mut() {
                    targets.push(t.weights_mut());
                }
                opt.step(&mut targets, &mut grad_list);
            }
            if let Some(t) = table {
                if !t.weights().is_finite() {
                    return Err(Error::Diverged { step: steps, loss: value });
                }
                lm.set_table(Arc::new(t));
            }
            steps += 1;
        }
        last = epoch_loss / epoch_tokens.max(1) as f64;
        log::debug!("epoch loss {last:.4}");
    }
    Ok((steps, last))
}

fn summarize(lm: &CausalLM, steps: usize, last: f64, n_train: usize, heldout: &[Vec<usize>], eval: f64) -> LmTrainSummary {
    let sep: SeparationReport = verify_separation(lm.table());
    LmTrainSummary {
        steps,
        train_examples: n_train,
        heldout_examples: heldout.len(),
        final_train_nll: last,
        heldout_nll: eval,
        uniform_nll: (lm.vocab_size() as f64).ln(),
        separation_violations: sep.violations.len(),
        min_column_margin: sep.min_column_margin,
        min_pairwise_sq_dist: sep.min_pairwise_sq_dist,
    }
}

/// Trains an LM and its embedding table from scratch.
pub fn train_lm(
    lexicon: &Lexicon,
    corpus: &[Vec<usize>],
    lm_config: LmConfig,
    cfg: &TrainConfig,
) -> Result<(CausalLM, LmTrainSummary)> {
    if corpus.is_empty() || corpus.iter().all(Vec::is_empty) {
        return Err(Error::invalid("empty corpus"));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train, heldout) = split(corpus, cfg.heldout_fraction, &mut rng);
    let weights = gaussian(&mut rng, &[lexicon.len(), cfg.embed_dim], cfg.embed_init_scale);
    let table = Arc::new(EmbeddingTable::new(weights, lexicon.clone())?);
    let mut lm = CausalLM::new_random(table, lm_config, &mut rng)?;
    let examples: Vec<(Vec<usize>, Option<usize>)> = train.iter().map(|l| (l.clone(), None)).collect();
    let (steps, last) = fit_lm(&mut lm, &examples, cfg, true, &mut rng)?;
    let eval_set = if heldout.is_empty() { &train } else { &heldout };
    let eval = corpus_nll(&lm, eval_set, None)?;
    let summary = summarize(&lm, steps, last, train.len(), &heldout, eval);
    if !(summary.heldout_nll < summary.uniform_nll) {
        return Err(Error::invalid(format!(
            "held-out NLL {:.4} is not below the uniform baseline {:.4}",
            summary.heldout_nll, summary.uniform_nll
        )));
    }
    Ok((lm, summary))
}

/// Continues training `base` on `lines` with its embedding table frozen.
/// Each line may carry a prefix token placed right after `<bos>`.
pub fn finetune_lm(
    base: &CausalLM,
    lines: &[(Vec<usize>, Option<usize>)],
    cfg: &TrainConfig,
) -> Result<(CausalLM, LmTrainSummary)> {
    if lines.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train, heldout) = split(lines, cfg.heldout_fraction, &mut rng);
    let mut lm = base.clone();
    let (steps, last) = fit_lm(&mut lm, &train, cfg, false, &mut rng)?;
    let eval_set = if heldout.is_empty() { &train } else { &heldout };
    let mut total = 0.0;
    let mut tokens = 0usize;
    for (line, prefix) in eval_set {
        let n = line.len() + 1;
        total += corpus_nll(&lm, std::slice::from_ref(line), *prefix)? * n as f64;
        tokens += n;
    }
    let plain: Vec<Vec<usize>> = heldout.iter().map(|(l, _)| l.clone()).collect();
    let summary = summarize(&lm, steps, last, train.len(), &plain, total / tokens as f64);
    Ok((lm, summary))
}

/// Builds a class-conditional LM by fine-tuning `base` once per label
/// (`Separate`), or once on label-prefixed lines (`Verbalizer`).
pub fn train_conditional(
    base: &CausalLM,
    labeled: &[(Vec<usize>, usize)],
    labels: Vec<String>,
    label_tokens: Option<Vec<usize>>,
    cfg: &TrainConfig,
) -> Result<(ConditionalLM, Vec<LmTrainSummary>)> {
    if let Some((_, l)) = labeled.iter().find(|(_, l)| *l >= labels.len()) {
        return Err(Error::LabelRange {
            label: *l,
            count: labels.len(),
        });
    }
    match label_tokens {
        Some(tokens) => {
            let lines: Vec<_> = labeled.iter().map(|(t, l)| (t.clone(), Some(tokens[*l]))).collect();
            let (lm, s) = finetune_lm(base, &lines, cfg)?;
            Ok((ConditionalLM::verbalizer(lm, tokens, labels)?, vec![s]))
        }
        None => {
            let mut lms = Vec::new();
            let mut summaries = Vec::new();
            for label in 0..labels.len() {
                let lines: Vec<_> = labeled
                    .iter()
                    .filter(|(_, l)| *l == label)
                    .map(|(t, _)| (t.clone(), None))
                    .collect();
                let (lm, s) = finetune_lm(base, &lines, cfg)?;
                lms.push(lm);
                summaries.push(s);
            }
            Ok((ConditionalLM::separate(lms, labels)?, summaries))
        }
    }
}

fn accuracy(clf: &AttributeClassifier, data: &[(Vec<usize>, usize)]) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let mut hits = 0usize;
    for (tokens, label) in data {
        let probs = clf.probs_for_tokens(&context_for(tokens))?;
        hits += usize::from(crate::geometry::argmax(&probs) == *label);
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Trains an attribute classifier over a frozen embedding table.
pub fn train_classifier(
    table: Arc<EmbeddingTable>,
    labels: Vec<String>,
    hidden: usize,
    data: &[(Vec<usize>, usize)],
    cfg: &TrainConfig,
) -> Result<(AttributeClassifier, ClassifierTrainSummary)> {
    if data.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clf = AttributeClassifier::new_random(table, labels, hidden, &mut rng)?;
    for (_, l) in data {
        clf.check_label(*l)?;
    }
    let (train, heldout) = split(data, cfg.heldout_fraction, &mut rng);
    let shapes: Vec<&[usize]> = clf.params().tensors().iter().map(|t| t.shape()).collect();
    let mut opt = Optimizer::new(cfg, &shapes);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut steps = 0;
    let mut last = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let b = clf.bind(&mut g, true)?;
            let mut picked = Vec::with_capacity(batch.len());
            for &i in batch {
                let (tokens, label) = &train[i];
                let x = g.embed_rows(b.table, &context_for(tokens))?;
                let lp = clf.log_probs_from_inputs(&mut g, &b, x)?;
                picked.push(g.gather(lp, &[*label])?);
            }
            let stacked = g.concat_rows(&picked)?;
            let total = g.sum(stacked)?;
            let loss = g.scale(total, -1.0 / batch.len() as f64)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged { step: steps, loss: value });
            }
            epoch += value * batch.len() as f64;
            let grads = g.backward(loss).map_err(|e| as_diverged(e, steps))?;
            let mut grad_list: Vec<Tensor> = b.param_vars().iter().map(|v| grads.wrt(*v)).collect();
            let mut targets: Vec<&mut Tensor> = clf.params_mut().tensors_mut().iter_mut().collect();
            opt.step(&mut targets, &mut grad_list);
            steps += 1;
        }
        last = epoch / train.len() as f64;
    }
    let summary = ClassifierTrainSummary {
        steps,
        train_examples: train.len(),
        heldout_examples: heldout.len(),
        final_train_loss: last,
        train_accuracy: accuracy(&clf, &train)?,
        heldout_accuracy: accuracy(&clf, &heldout)?,
    };
    Ok((clf, summary))
}
