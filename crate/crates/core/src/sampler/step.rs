use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{project, SoftSequence};
use crate::model::EmbeddingTable;

/// `L` uniformly drawn table rows.
pub fn init_sequence<R: Rng + ?Sized>(table: &EmbeddingTable, len: usize, rng: &mut R) -> Result<SoftSequence> {
    if len == 0 {
        return Err(Error::invalid("sequence length must be >= 1"));
    }
    let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..table.vocab_size())).collect();
    SoftSequence::from_ids(table, &ids)
}

/// Standard normal noise of the given shape.
pub fn gaussian_noise(rng: &mut dyn RngCore, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    t
}

/// `Proj_E(ẽ − η ∇ + √(2ηβ) z)` with `z ~ N(0, I)` per coordinate.
pub fn langevin_step(
    seq: &SoftSequence,
    grad: &Tensor,
    eta: f64,
    beta: f64,
    rng: &mut dyn RngCore,
    table: &EmbeddingTable,
) -> Result<SoftSequence> {
    if grad.shape() != seq.vectors().shape() {
        return Err(Error::Shape {
            op: "langevin_step",
            lhs: seq.vectors().shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    grad.ensure_finite("langevin gradient")?;
    let noise = gaussian_noise(rng, grad.shape());
    let scale = (2.0 * eta * beta).sqrt();
    let mut moved = seq.vectors().clone();
    moved.axpy(-eta, grad);
    moved.axpy(scale, &noise);
    moved.ensure_finite("langevin update")?;
    let (len, _) = moved.dims2();
    let ids = (0..len)
        .map(|n| project(table, moved.row(n)).map(|p| p.id))
        .collect::<Result<Vec<_>>>()?;
    SoftSequence::from_ids(table, &ids)
}
