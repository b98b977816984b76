//! Many chains at once.

use super::chain::{run_chain, ChainSeeds, Parameterization};
use super::config::SamplerConfig;
use super::record::SampleRecord;
use crate::constraint::ConstraintSpec;
use crate::error::Result;
use crate::exec::Execution;
use crate::model::CausalLM;

/// One unit of sampling work.
#[derive(Clone, Debug)]
pub struct Job {
    pub prompt: Vec<usize>,
    pub len: usize,
    /// Chain index, used to derive the chain's random streams.
    pub chain: u64,
}

/// Runs every job with its own derived seeds; results are in job order and
/// identical under either execution mode.
pub fn run_batch(
    kind: Parameterization,
    lm: &CausalLM,
    jobs: &[Job],
    constraints: &[ConstraintSpec],
    cfg: &SamplerConfig,
    exec: Execution,
) -> Vec<Result<SampleRecord>> {
    exec.map(jobs.len(), |i| {
        let job = &jobs[i];
        let seeds = ChainSeeds::derive(cfg.seed, job.chain);
        run_chain(kind, lm, &job.prompt, job.len, constraints, cfg, seeds)
    })
}
