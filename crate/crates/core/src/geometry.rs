//! Nearest-row projection onto the embedding table, the distance-induced
//! token distributions, and the table-wide separation check that the
//! keyword threshold relies on.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, softmax, sq_dist, Tensor};
use crate::error::{Error, Result};
use crate::model::EmbeddingTable;

/// Index of the first maximal entry.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub id: usize,
    pub sq_dist: f64,
}

/// Nearest table row by squared Euclidean distance; ties go to the lowest id.
pub fn project(table: &EmbeddingTable, v: &[f64]) -> Result<Projection> {
    if v.len() != table.dim() {
        return Err(Error::Shape {
            op: "project",
            lhs: vec![table.dim()],
            rhs: vec![v.len()],
        });
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("project".into()));
    }
    let mut best = Projection {
        id: 0,
        sq_dist: f64::INFINITY,
    };
    for id in 0..table.vocab_size() {
        let d = sq_dist(table.row(id), v);
        if d < best.sq_dist {
            best = Projection { id, sq_dist: d };
        }
    }
    Ok(best)
}

/// `softmax(-‖v - e_j‖²)` over the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution {
    pub probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

fn neg_sq_dists(table: &EmbeddingTable, v: &[f64]) -> Vec<f64> {
    (0..table.vocab_size())
        .map(|j| -sq_dist(table.row(j), v))
        .collect()
}

pub fn token_distribution(table: &EmbeddingTable, v: &[f64]) -> Result<TokenDistribution> {
    if v.len() != table.dim() || !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("token_distribution".into()));
    }
    Ok(TokenDistribution {
        probs: softmax(&neg_sq_dists(table, v)),
    })
}

/// `log π_v[w]` for a single vector.
pub fn log_token_prob(table: &EmbeddingTable, v: &[f64], w: usize) -> f64 {
    let logits = neg_sq_dists(table, v);
    logits[w] - log_sum_exp(&logits)
}

/// Continuous optimizer state: one d-vector per output position together
/// with the id of its nearest table row.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftSequence {
    vectors: Tensor,
    projected_ids: Vec<usize>,
}

impl SoftSequence {
    /// Sequence whose vectors are exactly the table rows of `ids`.
    pub fn from_ids(table: &EmbeddingTable, ids: &[usize]) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("sequence length must be at least 1"));
        }
        let d = table.dim();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= table.vocab_size() {
                return Err(Error::UnknownToken(format!("id {id}")));
            }
            data.extend_from_slice(table.row(id));
        }
        let vectors = Tensor::new(vec![ids.len(), d], data)?;
        // Duplicate rows could project elsewhere; go through projection.
        Self::from_vectors(table, vectors)
    }

    pub fn from_vectors(table: &EmbeddingTable, vectors: Tensor) -> Result<Self> {
        let (l, d) = vectors.dims2();
        if l == 0 || d != table.dim() || vectors.shape().len() != 2 {
            return Err(Error::Shape {
                op: "soft_sequence",
                lhs: vectors.shape().to_vec(),
                rhs: vec![table.dim()],
            });
        }
        let projected_ids = (0..l)
            .map(|i| project(table, vectors.row(i)).map(|p| p.id))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            vectors,
            projected_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.projected_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projected_ids.is_empty()
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn projected_ids(&self) -> &[usize] {
        &self.projected_ids
    }

    /// Replaces every vector by its projection.
    pub fn quantized(&self, table: &EmbeddingTable) -> Result<Self> {
        Self::from_ids(table, &self.projected_ids)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    /// `π_w` is not maximal at `w`.
    Row,
    /// Some other row's distribution gives `w` at least as much mass as `π_w` does.
    Column,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationViolation {
    pub token: usize,
    pub kind: ViolationKind,
    pub competitor: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeparationReport {
    pub vocab_size: usize,
    pub dim: usize,
    pub min_pairwise_sq_dist: f64,
    /// Per token `w`: `min_{j≠w} (−log π_j[w]) − (−log π_w[w])`.
    pub column_margins: Vec<f64>,
    pub min_column_margin: f64,
    pub violations: Vec<SeparationViolation>,
}

impl SeparationReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn violating_tokens(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.violations.iter().map(|v| v.token).collect();
        t.sort_unstable();
        t.dedup();
        t
    }
}

/// Full `V x V` matrix of `log π_i[j]`.
pub fn log_pi_matrix(table: &EmbeddingTable) -> Vec<Vec<f64>> {
    (0..table.vocab_size())
        .map(|i| {
            let logits = neg_sq_dists(table, table.row(i));
            let lse = log_sum_exp(&logits);
            logits.into_iter().map(|l| l - lse).collect()
        })
        .collect()
}

/// Checks `π_w[w] > π_w[j]` and `π_w[w] > π_j[w]` for every `w` and `j ≠ w`.
pub fn verify_separation(table: &EmbeddingTable) -> SeparationReport {
    let v = table.vocab_size();
    let log_pi = log_pi_matrix(table);
    let mut violations = Vec::new();
    let mut column_margins = vec![f64::INFINITY; v];
    for w in 0..v {
        for j in 0..v {
            if j == w {
                continue;
            }
            if log_pi[w][j] >= log_pi[w][w] {
                violations.push(SeparationViolation {
                    token: w,
                    kind: ViolationKind::Row,
                    competitor: j,
                });
            }
            let margin = log_pi[w][w] - log_pi[j][w];
            column_margins[w] = column_margins[w].min(margin);
            if margin <= 0.0 {
                violations.push(SeparationViolation {
                    token: w,
                    kind: ViolationKind::Column,
                    competitor: j,
                });
            }
        }
    }
    let min_column_margin = column_margins.iter().copied().fold(f64::INFINITY, f64::min);
    SeparationReport {
        vocab_size: v,
        dim: table.dim(),
        min_pairwise_sq_dist: table.min_pairwise_sq_dist(),
        column_margins,
        min_column_margin,
        violations,
    }
}
