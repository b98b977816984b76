use serde::{Deserialize, Serialize};

use crate::constraint::MultiplierSchedule;
use crate::error::{Error, Result};
use crate::model::DEFAULT_NUCLEUS_P;

/// Geometric annealing of the noise scale `β`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta_init: f64,
    pub beta_floor: f64,
    pub anneal_steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta_init: 5.0,
            beta_floor: 0.05,
            anneal_steps: 100,
        }
    }
}

impl NoiseSchedule {
    /// `β_init · r^t` for `t < anneal_steps`, `β_floor` afterwards, with
    /// `r = (β_floor / β_init)^(1 / (anneal_steps − 1))`.
    pub fn beta_at(&self, t: usize) -> f64 {
        if t >= self.anneal_steps {
            return self.beta_floor;
        }
        if t == 0 || self.anneal_steps == 1 {
            return self.beta_init;
        }
        if self.beta_init == 0.0 {
            return 0.0;
        }
        let r = (self.beta_floor / self.beta_init).powf(1.0 / (self.anneal_steps - 1) as f64);
        self.beta_init * r.powi(t as i32)
    }

    /// A schedule with no noise at all.
    pub fn silent() -> Self {
        Self {
            beta_init: 0.0,
            beta_floor: 0.0,
            anneal_steps: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub max_steps: usize,
    pub eta: f64,
    pub eta_max: f64,
    /// Stall window `s`: iterations without change before early stopping.
    pub stall_window: usize,
    pub beta_init: f64,
    pub beta_floor: f64,
    pub beta_anneal_steps: usize,
    pub multipliers: MultiplierSchedule,
    pub restarts: usize,
    pub min_repeats: usize,
    /// Largest per-position move (after projection) still counted as stalled;
    /// defaults to `1e-6·√d`.
    pub stall_tolerance: Option<f64>,
    pub fallback: bool,
    pub nucleus_p: f64,
    /// Cap on optimizer-state bytes (vectors, gradient, noise).
    pub memory_cap_bytes: Option<usize>,
    /// Initial logit of the sampled token in the simplex parameterisation.
    pub simplex_init_logit: f64,
    pub record_trace: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        let noise = NoiseSchedule::default();
        Self {
            max_steps: 250,
            eta: 0.1,
            eta_max: 1.0,
            stall_window: 40,
            beta_init: noise.beta_init,
            beta_floor: noise.beta_floor,
            beta_anneal_steps: noise.anneal_steps,
            multipliers: MultiplierSchedule::default(),
            restarts: 3,
            min_repeats: 5,
            stall_tolerance: None,
            fallback: true,
            nucleus_p: DEFAULT_NUCLEUS_P,
            memory_cap_bytes: None,
            simplex_init_logit: 4.0,
            record_trace: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn noise(&self) -> NoiseSchedule {
        NoiseSchedule {
            beta_init: self.beta_init,
            beta_floor: self.beta_floor,
            anneal_steps: self.beta_anneal_steps,
        }
    }

    pub fn set_noise(&mut self, n: NoiseSchedule) {
        self.beta_init = n.beta_init;
        self.beta_floor = n.beta_floor;
        self.beta_anneal_steps = n.anneal_steps;
    }

    pub fn stall_tolerance_for(&self, dim: usize) -> f64 {
        self.stall_tolerance.unwrap_or(1e-6 * (dim as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::invalid(format!("sampler config: {m}")));
        if !(self.eta > 0.0 && self.eta <= self.eta_max && self.eta_max.is_finite()) {
            return fail("need 0 < eta <= eta_max");
        }
        if !(self.beta_floor >= 0.0 && self.beta_floor <= self.beta_init && self.beta_init.is_finite()) {
            return fail("need 0 <= beta_floor <= beta_init");
        }
        if self.max_steps == 0 || self.stall_window == 0 || self.min_repeats == 0 || self.beta_anneal_steps == 0 {
            return fail("max_steps, stall_window, min_repeats and beta_anneal_steps must be >= 1");
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return fail("nucleus_p must be in (0, 1]");
        }
        if self.stall_tolerance.is_some_and(|t| !(t >= 0.0)) {
            return fail("stall_tolerance must be non-negative");
        }
        self.multipliers.validate()
    }
}
