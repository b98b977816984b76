//! JSON run configurations. Unknown keys are rejected and every referenced
//! file is checked before any compute starts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use embed_langevin::constraint::ConstraintDecl;
use embed_langevin::exec::Execution;
use embed_langevin::model::train::TrainConfig;
use embed_langevin::model::LmConfig;
use embed_langevin::sampler::SamplerConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// A configuration that was rejected before doing any work.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// Resolves config-relative paths against the data directory.
#[derive(Clone, Debug)]
pub struct Paths {
    pub data_dir: PathBuf,
}

impl Paths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.data_dir.join(p)
        }
    }

    pub fn existing(&self, p: &Path, what: &str) -> Result<PathBuf> {
        let full = self.resolve(p);
        if !full.is_file() {
            return Err(invalid(format!("{what} {} does not exist", full.display())));
        }
        Ok(full)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainLmConfig {
    /// One sequence per line; `label<TAB>text` lines when `labeled` is set.
    pub corpus: PathBuf,
    #[serde(default)]
    pub labeled: bool,
    /// Tokens added to the lexicon even if absent from the corpus.
    #[serde(default)]
    pub extra_tokens: Vec<String>,
    #[serde(default)]
    pub lm: LmConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Discriminative,
    GenerativeSeparate,
    GenerativeVerbalizer,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainClassifierConfig {
    /// Base LM checkpoint; supplies the shared table.
    pub lm: PathBuf,
    /// `label<TAB>text` lines.
    pub corpus: PathBuf,
    pub kind: ClassifierKind,
    /// Label order; defaults to the sorted distinct corpus labels.
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_hidden() -> usize {
    16
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    #[default]
    Embeddings,
    Simplex,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub lm: PathBuf,
    #[serde(default)]
    pub prompts: Vec<String>,
    /// One prompt per line, appended after `prompts`.
    #[serde(default)]
    pub prompts_file: Option<PathBuf>,
    /// Several lengths: keep the best satisfying output across them.
    pub lengths: Vec<usize>,
    #[serde(default)]
    pub constraints: Vec<ConstraintDecl>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default = "one")]
    pub samples_per_prompt: usize,
    #[serde(default)]
    pub parameterization: ParamKind,
    #[serde(default)]
    pub execution: Execution,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Per-iteration trace; gzip-compressed if the name ends in `.gz`.
    #[serde(default)]
    pub trace: Option<PathBuf>,
}

fn one() -> usize {
    1
}

impl SampleConfig {
    pub fn validate(&self, paths: &Paths) -> Result<()> {
        paths.existing(&self.lm, "LM checkpoint")?;
        if let Some(p) = &self.prompts_file {
            paths.existing(p, "prompts file")?;
        } else if self.prompts.is_empty() {
            return Err(invalid("no prompts given"));
        }
        if self.lengths.is_empty() || self.lengths.contains(&0) {
            return Err(invalid("lengths must be a non-empty list of positive lengths"));
        }
        if self.samples_per_prompt == 0 {
            return Err(invalid("samples_per_prompt must be >= 1"));
        }
        if self.lengths.len() > 1 && self.parameterization == ParamKind::Simplex {
            return Err(invalid("length search is only available for the embeddings sampler"));
        }
        self.sampler.validate().map_err(|e| invalid(e.to_string()))?;
        for d in &self.constraints {
            if let Some(m) = d.model_path() {
                paths.existing(Path::new(&m), "constraint model")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Judging LM, normally the base LM.
    pub lm: PathBuf,
    /// Keywords (words or phrases) for coverage.
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub csv: Option<PathBuf>,
}

pub const DEFAULT_LENGTHS: [usize; 7] = [10, 20, 50, 100, 200, 500, 1000];

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub lm: PathBuf,
    #[serde(default = "default_lengths")]
    pub lengths: Vec<usize>,
    pub memory_cap_bytes: usize,
    #[serde(default)]
    pub prompt: String,
    /// A short budget is enough to measure the state footprint.
    #[serde(default = "ablation_sampler")]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub csv: Option<PathBuf>,
}

fn default_lengths() -> Vec<usize> {
    DEFAULT_LENGTHS.to_vec()
}

pub fn ablation_sampler() -> SamplerConfig {
    SamplerConfig {
        max_steps: 2,
        restarts: 0,
        fallback: false,
        record_trace: false,
        ..SamplerConfig::default()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Checkpoint whose table gets the separation check.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            instances: default_instances(),
            seed: 0,
        }
    }
}

fn default_instances() -> usize {
    100
}

pub fn ensure_lengths(lengths: &[usize]) -> Result<()> {
    ensure!(!lengths.is_empty(), invalid("length grid is empty"));
    if lengths.contains(&0) {
        bail!(invalid("lengths must be positive"));
    }
    Ok(())
}
