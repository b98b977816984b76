//! Projected gradient ascent on the Lagrange multipliers.

use serde::{Deserialize, Serialize};

use super::ConstraintSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiplierSchedule {
    pub alpha: f64,
    pub cadence: usize,
    /// Update violated constraints every iteration while the sequence is stalled.
    pub violation_boost: bool,
    /// Weight on the previous multiplier, `λ ← γ λ + (1−γ) λ'`; 0 disables it.
    pub damping: f64,
}

impl Default for MultiplierSchedule {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            cadence: 20,
            violation_boost: true,
            damping: 0.0,
        }
    }
}

impl MultiplierSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || self.cadence == 0 || !(0.0..1.0).contains(&self.damping) {
            return Err(Error::invalid("multiplier schedule needs alpha > 0, cadence >= 1, 0 <= damping < 1"));
        }
        Ok(())
    }

    /// Whether iteration `t` (0-based) is a scheduled update.
    pub fn on_cadence(&self, t: usize) -> bool {
        (t + 1).is_multiple_of(self.cadence)
    }
}

/// `max(0, λ + α (f − ε))`.
pub fn ascend(lambda: f64, f: f64, epsilon: f64, alpha: f64) -> f64 {
    (lambda + alpha * (f - epsilon)).max(0.0)
}

/// Applies one round of updates at iteration `t`; returns whether any
/// multiplier was touched.
pub fn update_multipliers(
    constraints: &mut [ConstraintSpec],
    f: &[f64],
    schedule: &MultiplierSchedule,
    t: usize,
    stalled: bool,
) -> Result<bool> {
    if f.len() != constraints.len() {
        return Err(Error::invalid("one f value per constraint is required"));
    }
    if let Some(c) = constraints.iter().zip(f).find(|(_, v)| !v.is_finite()).map(|(c, _)| c) {
        return Err(Error::NonFinite("constraint value".into()).in_constraint(&c.name));
    }
    let scheduled = schedule.on_cadence(t);
    let mut touched = false;
    for (c, &value) in constraints.iter_mut().zip(f) {
        let boosted = schedule.violation_boost && stalled && !c.satisfied(value);
        if !(scheduled || boosted) {
            continue;
        }
        let next = ascend(c.lambda(), value, c.epsilon, schedule.alpha);
        let g = schedule.damping;
        c.set_lambda(if g > 0.0 { g * c.lambda() + (1.0 - g) * next } else { next });
        touched = true;
    }
    Ok(touched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::testing::Affine;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn spec(eps: f64) -> ConstraintSpec {
        ConstraintSpec::new("c", Arc::new(Affine { c: 0.0, s: 0.0 }), eps).unwrap()
    }

    #[test]
    fn defaults() {
        let s = MultiplierSchedule::default();
        assert_eq!((s.alpha, s.cadence, s.damping), (1.0, 20, 0.0));
    }

    #[test]
    fn analytic_updates() {
        assert_eq!(ascend(0.0, 0.7, 1.0, 1.0), 0.0);
        assert!((ascend(0.0, 1.2, 1.0, 1.0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn cadence_and_boost() {
        let s = MultiplierSchedule::default();
        let mut cs = vec![spec(0.0), spec(1.0)];
        // Off-cadence, not stalled: nothing happens.
        assert!(!update_multipliers(&mut cs, &[0.5, 0.5], &s, 3, false).unwrap());
        // Stalled: only the violated constraint moves.
        assert!(update_multipliers(&mut cs, &[0.5, 0.5], &s, 3, true).unwrap());
        assert_eq!((cs[0].lambda(), cs[1].lambda()), (0.5, 0.0));
        // On cadence (t = 19): every constraint is updated.
        update_multipliers(&mut cs, &[0.0, 0.5], &s, 19, false).unwrap();
        assert_eq!((cs[0].lambda(), cs[1].lambda()), (0.5, 0.0));
        update_multipliers(&mut cs, &[-1.0, 0.5], &s, 39, false).unwrap();
        assert_eq!(cs[0].lambda(), 0.0);
    }

    #[test]
    fn damping_blends_old_and_new() {
        let s = MultiplierSchedule {
            damping: 0.5,
            ..Default::default()
        };
        let mut cs = vec![spec(0.0)];
        update_multipliers(&mut cs, &[2.0], &s, 19, false).unwrap();
        assert_eq!(cs[0].lambda(), 1.0);
    }

    proptest! {
        #[test]
        fn multipliers_stay_non_negative(
            steps in prop::collection::vec((-5.0f64..5.0, any::<bool>(), 0usize..60), 1..80),
            damping in 0.0f64..0.9,
            alpha in 0.01f64..3.0,
        ) {
            let s = MultiplierSchedule { alpha, damping, cadence: 3, violation_boost: true };
            let mut cs = vec![spec(0.3), spec(-0.2)];
            for (f, stalled, t) in steps {
                update_multipliers(&mut cs, &[f, -f], &s, t, stalled).unwrap();
                prop_assert!(cs.iter().all(|c| c.lambda() >= 0.0));
            }
        }
    }
}
