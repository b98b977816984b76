//! Constrained Langevin sampling over output embeddings.

mod batch;
mod chain;
mod config;
mod record;
mod step;

pub use batch::{run_batch, Job};
pub use chain::{run_chain, sample, sample_over_lengths, simplex_sample, ChainSeeds, Parameterization};
pub use config::{NoiseSchedule, SamplerConfig};
pub use record::{
    ids_hash, read_jsonl, write_jsonl, write_trace, ConstraintOutcome, SampleRecord, Termination, TraceEntry,
    RECORD_VERSION,
};
pub use step::{gaussian_noise, init_sequence, langevin_step};
