use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use embed_langevin::constraint::{ConstraintSpec, ModelSet};
use embed_langevin::eval::{state_memory_report, tokenize_keywords, write_memory_csv, MetricReport};
use embed_langevin::model::checkpoint::{self, Checkpoint};
use embed_langevin::model::corpus::{read_corpus, read_labeled};
use embed_langevin::model::train::{train_classifier, train_conditional, train_lm};
use embed_langevin::model::{CausalLM, EmbeddingTable, Lexicon};
use embed_langevin::sampler::{
    read_jsonl, run_chain, sample_over_lengths, write_jsonl, write_trace, ChainSeeds, Parameterization,
    SampleRecord,
};
use embed_langevin::verify::verify;
use embed_langevin::Error;
use serde_json::json;

use crate::config::{
    self, ensure_lengths, invalid, AblateConfig, ClassifierKind, EvalConfig, ParamKind, Paths, SampleConfig,
    TrainClassifierConfig, TrainLmConfig, VerifyConfig,
};

/// Flags shared by every subcommand.
pub struct Common {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub paths: Paths,
}

impl Common {
    fn config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        let path = self.config.as_ref().ok_or_else(|| invalid("--config is required"))?;
        config::load(path)
    }

    /// `--out` wins over the config's own output path.
    fn out(&self, configured: Option<&Path>) -> Option<PathBuf> {
        self.out.clone().or_else(|| configured.map(|p| self.paths.resolve(p)))
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn train_lm_cmd(c: &Common) -> Result<()> {
    let mut cfg: TrainLmConfig = c.config()?;
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    let corpus_path = c.paths.existing(&cfg.corpus, "corpus")?;
    cfg.train.validate().map_err(|e| invalid(e.to_string()))?;
    let out = c.out(cfg.out.as_deref()).ok_or_else(|| invalid("no output path (--out or \"out\")"))?;

    let lines: Vec<String> = if cfg.labeled {
        read_labeled(&corpus_path)?.into_iter().map(|(_, t)| t).collect()
    } else {
        read_corpus(&corpus_path)?
    };
    let lex = Lexicon::build(lines.iter().map(String::as_str), &cfg.extra_tokens);
    let corpus = lines.iter().map(|l| lex.encode(l)).collect::<embed_langevin::Result<Vec<_>>>()?;
    let (lm, summary) = train_lm(&lex, &corpus, cfg.lm, &cfg.train)?;
    checkpoint::save(&out, &Checkpoint::Lm(lm.clone()))?;
    print_json(&json!({
        "checkpoint": out,
        "vocab_size": lm.vocab_size(),
        "table_hash": lm.table().content_hash(),
        "summary": summary,
    }))
}

pub fn train_classifier_cmd(c: &Common) -> Result<()> {
    let mut cfg: TrainClassifierConfig = c.config()?;
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    let lm_path = c.paths.existing(&cfg.lm, "LM checkpoint")?;
    let corpus_path = c.paths.existing(&cfg.corpus, "corpus")?;
    cfg.train.validate().map_err(|e| invalid(e.to_string()))?;
    let out = c.out(cfg.out.as_deref()).ok_or_else(|| invalid("no output path (--out or \"out\")"))?;

    let base = checkpoint::load_lm(&lm_path)?;
    let rows = read_labeled(&corpus_path)?;
    let labels = cfg.labels.clone().unwrap_or_else(|| {
        rows.iter()
            .map(|(l, _)| l.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    });
    let lex = base.table().lexicon();
    let data = rows
        .iter()
        .map(|(l, t)| {
            let label = labels
                .iter()
                .position(|x| x == l)
                .ok_or_else(|| anyhow!("corpus label {l:?} not among {labels:?}"))?;
            Ok((lex.encode(t)?, label))
        })
        .collect::<Result<Vec<_>>>()?;

    let (model, summary) = match cfg.kind {
        ClassifierKind::Discriminative => {
            let (clf, s) = train_classifier(base.table().clone(), labels.clone(), cfg.hidden, &data, &cfg.train)?;
            (Checkpoint::Classifier(clf), serde_json::to_value(s)?)
        }
        ClassifierKind::GenerativeSeparate | ClassifierKind::GenerativeVerbalizer => {
            let tokens = if cfg.kind == ClassifierKind::GenerativeVerbalizer {
                Some(labels.iter().map(|l| lex.id(l)).collect::<embed_langevin::Result<Vec<_>>>()?)
            } else {
                None
            };
            let (cond, s) = train_conditional(&base, &data, labels.clone(), tokens, &cfg.train)?;
            (Checkpoint::Conditional(cond), serde_json::to_value(s)?)
        }
    };
    checkpoint::save(&out, &model)?;
    print_json(&json!({
        "checkpoint": out,
        "kind": model.kind(),
        "labels": labels,
        "table_hash": model.table().content_hash(),
        "summary": summary,
    }))
}

/// Loads every constraint model named in the declarations and checks that
/// all of them share the LM's table.
fn load_models(cfg: &SampleConfig, paths: &Paths, table: &Arc<EmbeddingTable>) -> Result<ModelSet> {
    let mut set = ModelSet {
        table: table.clone(),
        classifiers: BTreeMap::new(),
        conditionals: BTreeMap::new(),
    };
    let want = table.content_hash();
    for d in &cfg.constraints {
        let Some(name) = d.model_path() else { continue };
        if set.classifiers.contains_key(&name) || set.conditionals.contains_key(&name) {
            continue;
        }
        let model = checkpoint::load(&paths.resolve(Path::new(&name)))?;
        let got = model.table().content_hash();
        if got != want {
            return Err(Error::TableMismatch(want, got).into());
        }
        match model {
            Checkpoint::Classifier(m) => {
                set.classifiers.insert(name, Arc::new(m));
            }
            Checkpoint::Conditional(m) => {
                set.conditionals.insert(name, Arc::new(m));
            }
            Checkpoint::Lm(_) => return Err(anyhow!("{name}: an LM checkpoint cannot serve as a constraint model")),
        }
    }
    Ok(set)
}

pub fn sample_cmd(c: &Common, jobs: Option<usize>) -> Result<()> {
    let mut cfg: SampleConfig = c.config()?;
    if let Some(seed) = c.seed {
        cfg.sampler.seed = seed;
    }
    cfg.validate(&c.paths)?;
    let out = c.out(cfg.out.as_deref());

    let lm = checkpoint::load_lm(&c.paths.resolve(&cfg.lm))?;
    let models = load_models(&cfg, &c.paths, lm.table())?;
    let constraints: Vec<ConstraintSpec> = cfg
        .constraints
        .iter()
        .enumerate()
        .map(|(i, d)| d.build(i, &models))
        .collect::<embed_langevin::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let mut prompts = cfg.prompts.clone();
    if let Some(p) = &cfg.prompts_file {
        prompts.extend(read_corpus(&c.paths.resolve(p))?);
    }
    let lex = lm.table().lexicon();
    let prompt_ids = prompts
        .iter()
        .map(|p| lex.encode(p))
        .collect::<embed_langevin::Result<Vec<_>>>()
        .map_err(|e| invalid(format!("prompt: {e}")))?;

    let per = cfg.samples_per_prompt;
    let n = prompt_ids.len() * per;
    let kind = match cfg.parameterization {
        ParamKind::Embeddings => Parameterization::Embeddings,
        ParamKind::Simplex => Parameterization::Simplex,
    };
    let run = || {
        cfg.execution.map(n, |i| {
            let prompt = &prompt_ids[i / per];
            let seeds = ChainSeeds::derive(cfg.sampler.seed, i as u64);
            let attempt = catch_unwind(AssertUnwindSafe(|| {
                if cfg.lengths.len() > 1 {
                    sample_over_lengths(&lm, prompt, &cfg.lengths, &constraints, &cfg.sampler, seeds)
                } else {
                    run_chain(kind, &lm, prompt, cfg.lengths[0], &constraints, &cfg.sampler, seeds)
                }
            }));
            match attempt {
                Ok(r) => r.map_err(|e| anyhow!("chain {i}: {e}")),
                Err(_) => Err(anyhow!("chain {i} panicked")),
            }
        })
    };
    let results = match jobs {
        Some(j) => embed_langevin::exec::with_jobs(j, run),
        None => run(),
    };

    // Keep the in-order prefix of completed records even if a chain failed.
    let mut records: Vec<SampleRecord> = Vec::with_capacity(n);
    let mut failure = None;
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    match &out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
            write_jsonl(&mut w, &records)?;
            w.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            write_jsonl(&mut w, &records)?;
        }
    }
    if let Some(p) = &cfg.trace {
        let path = c.paths.resolve(p);
        let gzip = path.extension().is_some_and(|e| e == "gz");
        let w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        write_trace(w, &records, gzip)?;
    }
    let satisfied = records.iter().filter(|r| r.all_satisfied()).count();
    let fallback = records.iter().filter(|r| !r.termination.is_constrained()).count();
    eprintln!(
        "{} records, satisfaction {:.3}, fallback or failed {}",
        records.len(),
        satisfied as f64 / records.len().max(1) as f64,
        fallback
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn eval_cmd(c: &Common, samples: &Path) -> Result<()> {
    let cfg: EvalConfig = c.config()?;
    let lm_path = c.paths.existing(&cfg.lm, "LM checkpoint")?;
    let lm = checkpoint::load_lm(&lm_path)?;
    let keywords = if cfg.keywords.is_empty() {
        None
    } else {
        Some(tokenize_keywords(lm.table().lexicon(), &cfg.keywords).map_err(|e| invalid(e.to_string()))?)
    };
    let file = File::open(samples).with_context(|| format!("opening {}", samples.display()))?;
    let records = read_jsonl(std::io::BufReader::new(file))?;
    let report = MetricReport::from_records(&records, &lm, keywords.as_deref())?;
    let value = serde_json::to_value(&report)?;
    if let Some(out) = c.out(None) {
        write_json(&out, &value)?;
    }
    if let Some(p) = &cfg.csv {
        report.write_csv(File::create(c.paths.resolve(p))?)?;
    }
    print_json(&value)
}

pub fn ablate_memory_cmd(c: &Common) -> Result<()> {
    let mut cfg: AblateConfig = c.config()?;
    if let Some(seed) = c.seed {
        cfg.sampler.seed = seed;
    }
    ensure_lengths(&cfg.lengths)?;
    let lm_path = c.paths.existing(&cfg.lm, "LM checkpoint")?;
    cfg.sampler.memory_cap_bytes = Some(cfg.memory_cap_bytes);
    cfg.sampler.validate().map_err(|e| invalid(e.to_string()))?;

    let base = checkpoint::load_lm(&lm_path)?;
    let prompt = base.table().lexicon().encode(&cfg.prompt)?;
    let longest = cfg.lengths.iter().copied().max().unwrap_or(0);
    let needed = (longest + prompt.len() + 1).max(base.config().context_limit);
    let lm: CausalLM = base.with_context_limit(needed);
    let mut rows = state_memory_report(&cfg.lengths, lm.vocab_size(), lm.table().dim());
    for row in &mut rows {
        for kind in [Parameterization::Embeddings, Parameterization::Simplex] {
            let seeds = ChainSeeds::derive(cfg.sampler.seed, row.len as u64);
            let (ok, peak) = match run_chain(kind, &lm, &prompt, row.len, &[], &cfg.sampler, seeds) {
                Ok(r) => (true, Some(r.peak_state_bytes)),
                Err(Error::MemoryCap { .. }) => (false, None),
                Err(e) => return Err(e.into()),
            };
            log::info!("L={} {kind:?}: ok={ok} peak={peak:?}", row.len);
            match kind {
                Parameterization::Embeddings => (row.embeds_ok, row.embeds_peak_bytes) = (Some(ok), peak),
                Parameterization::Simplex => (row.simplex_ok, row.simplex_peak_bytes) = (Some(ok), peak),
            }
        }
    }
    let max_ok = |f: fn(&embed_langevin::eval::StateMemoryRow) -> Option<bool>| {
        rows.iter().filter(|r| f(r) == Some(true)).map(|r| r.len).max()
    };
    let value = json!({
        "vocab_size": lm.vocab_size(),
        "dim": lm.table().dim(),
        "memory_cap_bytes": cfg.memory_cap_bytes,
        "max_len_embeds": max_ok(|r| r.embeds_ok),
        "max_len_simplex": max_ok(|r| r.simplex_ok),
        "rows": rows,
    });
    if let Some(p) = &cfg.csv {
        write_memory_csv(File::create(c.paths.resolve(p))?, &rows)?;
    }
    if let Some(out) = c.out(None) {
        write_json(&out, &value)?;
    }
    print_json(&value)
}

/// Returns whether every check passed.
pub fn verify_cmd(c: &Common, checkpoint_arg: Option<&Path>) -> Result<bool> {
    let mut cfg: VerifyConfig = match &c.config {
        Some(_) => c.config()?,
        None => VerifyConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(p) = checkpoint_arg {
        cfg.checkpoint = Some(p.to_path_buf());
    }
    let table = match &cfg.checkpoint {
        Some(p) => Some(checkpoint::load(&c.paths.existing(p, "checkpoint")?)?.table().clone()),
        None => None,
    };
    let report = verify(cfg.seed, cfg.instances, table.as_deref())?;
    let value = json!({
        "passed": report.passed(),
        "max_rel_error": report.max_rel_error(),
        "report": report,
    });
    if let Some(out) = c.out(None) {
        write_json(&out, &value)?;
    }
    print_json(&value)?;
    Ok(report.passed())
}
