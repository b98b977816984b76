use sha2::{Digest, Sha256};

use super::lexicon::Lexicon;
use crate::autodiff::{sq_dist, Tensor};
use crate::error::{Error, Result};

/// The `V x d` token embedding matrix shared by every model of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    weights: Tensor,
    lexicon: Lexicon,
}

impl EmbeddingTable {
    pub fn new(weights: Tensor, lexicon: Lexicon) -> Result<Self> {
        let (v, _) = weights.dims2();
        if weights.shape().len() != 2 || v != lexicon.len() {
            return Err(Error::Shape {
                op: "embedding_table",
                lhs: weights.shape().to_vec(),
                rhs: vec![lexicon.len()],
            });
        }
        weights.ensure_finite("embedding table")?;
        Ok(Self { weights, lexicon })
    }

    /// Table without a meaningful lexicon (tokens are named by id).
    pub fn from_weights(weights: Tensor) -> Result<Self> {
        let (v, _) = weights.dims2();
        let lexicon = Lexicon::from((0..v).map(|i| format!("t{i}")).collect::<Vec<_>>());
        Self::new(weights, lexicon)
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.dims2().0
    }

    pub fn dim(&self) -> usize {
        self.weights.dims2().1
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.weights.row(id)
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    /// SHA-256 over the shape and the little-endian value bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for dim in self.weights.shape() {
            h.update((*dim as u64).to_le_bytes());
        }
        for v in self.weights.data() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Smallest squared distance between two distinct rows.
    pub fn min_pairwise_sq_dist(&self) -> f64 {
        let v = self.vocab_size();
        let mut best = f64::INFINITY;
        for i in 0..v {
            for j in (i + 1)..v {
                best = best.min(sq_dist(self.row(i), self.row(j)));
            }
        }
        best
    }

    /// Median over rows of the distance to the nearest other row.
    pub fn median_nearest_gap(&self) -> f64 {
        let v = self.vocab_size();
        let mut gaps: Vec<f64> = (0..v)
            .map(|i| {
                (0..v)
                    .filter(|&j| j != i)
                    .map(|j| sq_dist(self.row(i), self.row(j)))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect();
        gaps.sort_by(f64::total_cmp);
        gaps.get(v / 2).copied().unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_content() {
        let a = EmbeddingTable::from_weights(Tensor::identity(3)).unwrap();
        let mut b = a.clone();
        assert_eq!(a.content_hash(), b.content_hash());
        b.weights_mut().data_mut()[0] = 0.5;
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn min_distance_of_orthonormal_rows() {
        let t = EmbeddingTable::from_weights(Tensor::identity(4)).unwrap();
        assert!((t.min_pairwise_sq_dist() - 2.0).abs() < 1e-15);
    }
}
