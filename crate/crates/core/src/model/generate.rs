//! Autoregressive nucleus sampling.

use rand::Rng;

use super::lexicon::EOS_ID;
use super::lm::{context_for, CausalLM};
use crate::error::{Error, Result};

pub const DEFAULT_NUCLEUS_P: f64 = 0.96;

/// Draws from the smallest highest-probability prefix whose mass reaches `p`.
/// Equal probabilities are ordered by token id.
pub fn nucleus_pick<R: Rng + ?Sized>(probs: &[f64], p: f64, rng: &mut R) -> Result<usize> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("nucleus_p must be in (0, 1], got {p}")));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    let u: f64 = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    for &i in &kept {
        acc += probs[i];
        if u < acc {
            return Ok(i);
        }
    }
    Ok(*kept.last().expect("non-empty vocabulary"))
}

/// Samples up to `max_len` tokens after `prompt`; stops early on `<eos>`
/// (which is not included in the output).
pub fn ar_sample<R: Rng + ?Sized>(
    lm: &CausalLM,
    prompt: &[usize],
    max_len: usize,
    nucleus_p: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut ctx = context_for(prompt);
    let mut out = Vec::with_capacity(max_len);
    for _ in 0..max_len {
        let probs = lm.next_token_probs(&ctx)?;
        let tok = nucleus_pick(&probs, nucleus_p, rng)?;
        if tok == EOS_ID {
            break;
        }
        out.push(tok);
        ctx.push(tok);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tiny_p_is_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let probs = [0.1, 0.5, 0.4];
        for _ in 0..100 {
            assert_eq!(nucleus_pick(&probs, 1e-9, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn nucleus_excludes_the_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probs = [0.05, 0.5, 0.45];
        for _ in 0..1000 {
            assert_ne!(nucleus_pick(&probs, 0.9, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn invalid_p_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(nucleus_pick(&[1.0], 0.0, &mut rng).is_err());
        assert!(nucleus_pick(&[1.0], 1.5, &mut rng).is_err());
    }

    #[test]
    fn full_nucleus_matches_the_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let probs = [0.2, 0.3, 0.5];
        let n = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[nucleus_pick(&probs, 1.0, &mut rng).unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sigma);
        }
    }
}
